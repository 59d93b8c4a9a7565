import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from longicausal.panel import PanelData
from longicausal.simgen import scenario_preset, simulate_panel

settings.register_profile(
    "default",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def small_panel(preset: str = "design1b", n: int = 800, seed: int = 0, **overrides) -> PanelData:
    cfg = scenario_preset(preset).with_overrides(n=n, **overrides)
    return simulate_panel(cfg, seed)


def exact_panel(n: int = 400, seed: int = 0, **overrides) -> PanelData:
    """Near-deterministic outcomes and no time-varying covariate.

    With tau = 0 and no AR innovations ``V`` is identically zero, so it is
    dropped. Outcome noise is 1e-8 rather than zero: fully deterministic
    outcomes make each lagged outcome an exact linear function of the
    history, and the history design would be rank deficient. Estimation
    error scales with that noise, staying near 1e-10.
    """
    base = {"n": n, "tau": 0.0, "sd_eps": 1e-8, "ar_sd": 0.0}
    base.update(overrides)
    cfg = scenario_preset("design1b").with_overrides(**base)
    return simulate_panel(cfg, seed).replace(V=None)


@pytest.fixture
def panel1b():
    return small_panel("design1b", n=1000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
