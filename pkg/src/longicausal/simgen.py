"""Seeded simulation of longitudinal panels with known causal effects.

For ``k = 1..K`` (with ``A_0 = Y_0 = 0`` and ``BV_0 = 0``)::

    BV_k = ar_rho * BV_{k-1} + N(0, ar_sd^2)
    V_k  = BV_k + tau * A_{k-1}
    A_k  = gamma_G G + eta_A A_{k-1} + eta_Y Y_{k-1} + eta_1 F1 + eta_2 F2 + eta_V V_k + xi_k
    Y_k  = sum_j pi_k(j) A_j + beta_Y Y_{k-1} + beta_F1 F1 + beta_F2 F2 + beta_V V_k + eps_k

The configured quantities are the *total* effects ``beta_k(j)`` of ``A_j`` on
``Y_k`` with later exposures held fixed. The direct effects ``pi_k(j)`` that
enter the outcome equation are backed out so the totals come out exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .effects import EffectGrid
from .errors import DimensionMismatch, IncompleteGrid, UnknownConfigKey, UnknownPreset
from .numkit import binomial2, rng_new
from .panel import PanelData

F1_MEAN, F2_MEAN = 0.2, -0.1


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of the data-generating process.

    ``effect`` is either ``{"decay": [beta, alpha]}`` or
    ``{"saturated": [b11, b21, b22, b31, ...]}`` in outcome-major order.
    ``times`` defaults to ``1..K``. The three flags do not change the data;
    they tell estimators what to withhold or how to adjust.
    """

    n: int = 5000
    K: int = 3
    gamma_G: float = 0.5
    eta_A: float = 0.2
    eta_Y: float = 0.1
    eta_1: float = 0.2
    eta_2: float = 0.3
    eta_V: float = 0.5
    beta_Y: float = 0.5
    beta_F1: float = 0.4
    beta_F2: float = -0.1
    beta_V: float = -0.6
    tau: float = 0.8
    ar_rho: float = 0.98
    ar_sd: float = 0.2
    p_G: float = 0.2
    sd_xi: float = 1.0
    sd_eps: float = 1.0
    sd_F: float = 1.0
    effect: Mapping = field(default_factory=lambda: {"decay": [-1.1, 0.95]})
    times: tuple[float, ...] | None = None
    omit_F1_from_estimation: bool = False
    weak_iv: bool = False
    wrong_partial_out: bool = False

    def __post_init__(self):
        if self.K < 1 or self.n < 1:
            raise DimensionMismatch("n and K must be positive")
        for name in ("ar_sd", "sd_xi", "sd_eps", "sd_F", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.p_G <= 1.0:
            raise ValueError("p_G must lie in [0, 1]")
        if self.times is not None:
            t = tuple(float(x) for x in self.times)
            if len(t) != self.K or np.any(np.diff(t) <= 0):
                raise DimensionMismatch("times must be K strictly increasing values")
            object.__setattr__(self, "times", t)
        effect = dict(self.effect)
        if set(effect) not in ({"decay"}, {"saturated"}):
            raise UnknownConfigKey("effect must have exactly one key: 'decay' or 'saturated'")
        object.__setattr__(self, "effect", {k: [float(x) for x in v] for k, v in effect.items()})
        self.total_effects()  # validates the grid

    @property
    def time_grid(self) -> np.ndarray:
        return np.arange(1.0, self.K + 1) if self.times is None else np.array(self.times)

    def total_effects(self) -> EffectGrid:
        if "decay" in self.effect:
            beta, alpha = self.effect["decay"]
            return EffectGrid.from_decay(beta, alpha, self.time_grid)
        vec = self.effect["saturated"]
        if len(vec) != self.K * (self.K + 1) // 2:
            raise IncompleteGrid(f"saturated effect needs {self.K * (self.K + 1) // 2} entries")
        return EffectGrid.from_vector(vec, self.K)

    def estimation_exclude(self) -> frozenset[str]:
        """Baseline columns estimators must not see."""
        return frozenset({"F1"}) if self.omit_F1_from_estimation else frozenset()

    def with_overrides(self, **overrides) -> "ScenarioConfig":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise UnknownConfigKey(f"unknown scenario keys: {sorted(unknown)}")
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["times"] = None if self.times is None else list(self.times)
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        return cls().with_overrides(**d)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))


def derive_direct_effects(total: EffectGrid, beta_Y: float, beta_V: float, tau: float) -> EffectGrid:
    """Direct effects ``pi_k(j)`` that reproduce the total effects ``beta_k(j)``.

    ``A_j`` reaches ``Y_k`` directly, through ``Y_{k-1}`` (factor ``beta_Y``)
    and, one step ahead only, through ``V_{j+1}`` (factor ``beta_V * tau``).
    Hence ``beta_k(j) = pi_k(j) + beta_Y beta_{k-1}(j) + beta_V tau [j = k-1]``.
    """
    K = total.K
    pi = np.full((K, K), np.nan)
    for k in range(1, K + 1):
        for j in range(1, k + 1):
            value = total[k, j]
            if j < k:
                value -= beta_Y * total[k - 1, j]
                if j == k - 1:
                    value -= beta_V * tau
            pi[k - 1, j - 1] = value
    return EffectGrid(pi)


def total_from_direct(direct: EffectGrid, beta_Y: float, beta_V: float, tau: float) -> EffectGrid:
    """Inverse of :func:`derive_direct_effects`."""
    K = direct.K
    tot = np.full((K, K), np.nan)
    for k in range(1, K + 1):
        for j in range(1, k + 1):
            value = direct[k, j]
            if j < k:
                value += beta_Y * tot[k - 2, j - 1]
                if j == k - 1:
                    value += beta_V * tau
            tot[k - 1, j - 1] = value
    return EffectGrid(tot)


def simulate_panel(cfg: ScenarioConfig, seed: int | None) -> PanelData:
    """Draw one panel. ``L0`` exposes ``F1`` and ``F2``; ``latent`` keeps ``F1, F2, BV``."""
    rng = rng_new(seed)
    n, K = cfg.n, cfg.K
    pi = derive_direct_effects(cfg.total_effects(), cfg.beta_Y, cfg.beta_V, cfg.tau)

    G = binomial2(rng, cfg.p_G, n)
    F1 = F1_MEAN + cfg.sd_F * rng.standard_normal(n)
    F2 = F2_MEAN + cfg.sd_F * rng.standard_normal(n)

    A = np.zeros((n, K))
    Y = np.zeros((n, K))
    V = np.zeros((n, K))
    BV = np.zeros((n, K))
    bv_prev = np.zeros(n)
    a_prev = np.zeros(n)
    y_prev = np.zeros(n)
    for k in range(K):
        bv = cfg.ar_rho * bv_prev + cfg.ar_sd * rng.standard_normal(n)
        v = bv + cfg.tau * a_prev
        a = (
            cfg.gamma_G * G
            + cfg.eta_A * a_prev
            + cfg.eta_Y * y_prev
            + cfg.eta_1 * F1
            + cfg.eta_2 * F2
            + cfg.eta_V * v
            + cfg.sd_xi * rng.standard_normal(n)
        )
        A[:, k] = a
        y = (
            A[:, : k + 1] @ pi.outcome_block(k + 1)
            + cfg.beta_Y * y_prev
            + cfg.beta_F1 * F1
            + cfg.beta_F2 * F2
            + cfg.beta_V * v
            + cfg.sd_eps * rng.standard_normal(n)
        )
        Y[:, k], V[:, k], BV[:, k] = y, v, bv
        bv_prev, a_prev, y_prev = bv, a, y

    t = np.tile(cfg.time_grid, (n, 1))
    return PanelData(
        A=A,
        Y=Y,
        t=t,
        L0=np.column_stack([F1, F2]),
        L0_names=("F1", "F2"),
        V=V,
        G=G,
        latent={"F1": F1, "F2": F2, "BV": BV},
    )


DESIGN3_EFFECTS = (-1.1, -0.6, -1.05, -0.2, -0.55, -0.1)

_PRESETS: dict[str, dict] = {
    "design1a": {"tau": 0.8},
    "design1b": {"tau": 0.0},
    "design2": {"tau": 0.8, "omit_F1_from_estimation": True},
    "design2_weak_iv": {"tau": 0.8, "omit_F1_from_estimation": True, "gamma_G": 0.05, "weak_iv": True},
    "design2_wrong_adjust": {"tau": 0.8, "omit_F1_from_estimation": True, "wrong_partial_out": True},
    "design3": {"tau": 0.0, "effect": {"saturated": list(DESIGN3_EFFECTS)}},
}

PRESET_NAMES: tuple[str, ...] = tuple(_PRESETS)


def scenario_preset(name: str) -> ScenarioConfig:
    try:
        overrides = _PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None
    return ScenarioConfig().with_overrides(**overrides)


def true_effect_vector(cfg: ScenarioConfig) -> np.ndarray:
    return cfg.total_effects().as_vector()


def implied_cumulative_truth(cfg: ScenarioConfig, k: int) -> float:
    """``sum_j beta_k(j)``: the effect on ``Y_k`` of a unit exposure at every time up to ``k``."""
    return float(cfg.total_effects().outcome_block(k).sum())


def flat_overrides(pairs: Sequence[str]) -> dict:
    """Parse ``key=value`` strings; values are read as JSON when possible."""
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise UnknownConfigKey(f"override {pair!r} is not key=value")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out
