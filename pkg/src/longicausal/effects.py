"""Effect grids and fit reports shared by every estimator.

Causal parameters are indexed by outcome time ``k`` and exposure time
``j <= k``. A saturated grid stores each ``beta_k(j)`` separately; the
two-parameter decay model sets ``beta_k(j) = beta * alpha ** (t_k - t_j)``.
Parameters are always ordered outcome-major: ``(1,1), (2,1), (2,2), (3,1), ...``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DimensionMismatch, IncompleteGrid, MissingOutcomeBlock


def grid_index(K: int) -> list[tuple[int, int]]:
    """Outcome-major list of ``(k, j)`` pairs, 1-based."""
    return [(k, j) for k in range(1, K + 1) for j in range(1, k + 1)]


def param_label(k: int, j: int) -> str:
    return f"beta_{k}({j})"


def decay_coefficients(beta: float, alpha: float, times: Sequence[float], k: int) -> np.ndarray:
    """``beta * alpha ** (t_k - t_j)`` for ``j = 1..k`` on a shared time grid."""
    t = np.asarray(times, dtype=float)
    lags = t[k - 1] - t[:k]
    return beta * np.power(alpha, lags)


@dataclass(frozen=True)
class EffectGrid:
    """Lower-triangular grid of ``beta_k(j)``.

    ``values`` is ``K x K`` with NaN above the diagonal. ``decay`` holds
    ``(beta, alpha)`` when the grid was generated from the decay model.
    """

    values: np.ndarray
    decay: tuple[float, float] | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise DimensionMismatch("effect grid must be square")
        v[np.triu_indices(v.shape[0], 1)] = np.nan
        if np.isnan(v[np.tril_indices(v.shape[0])]).any():
            raise IncompleteGrid("effect grid has missing lower-triangular entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, kj: tuple[int, int]) -> float:
        k, j = kj
        if not 1 <= j <= k <= self.K:
            raise KeyError(kj)
        return float(self.values[k - 1, j - 1])

    @classmethod
    def from_decay(cls, beta: float, alpha: float, times: Sequence[float]) -> "EffectGrid":
        K = len(times)
        v = np.full((K, K), np.nan)
        for k in range(1, K + 1):
            v[k - 1, :k] = decay_coefficients(beta, alpha, times, k)
        return cls(v, decay=(float(beta), float(alpha)))

    @classmethod
    def from_vector(cls, vec: Sequence[float], K: int | None = None) -> "EffectGrid":
        vec = np.asarray(vec, dtype=float)
        if K is None:
            K = int(round((np.sqrt(8 * vec.size + 1) - 1) / 2))
        if vec.size != K * (K + 1) // 2:
            raise IncompleteGrid(f"{vec.size} values cannot fill a K={K} grid")
        v = np.full((K, K), np.nan)
        for value, (k, j) in zip(vec, grid_index(K)):
            v[k - 1, j - 1] = value
        return cls(v)

    def as_vector(self) -> np.ndarray:
        return np.array([self[k, j] for k, j in grid_index(self.K)])

    def outcome_block(self, k: int) -> np.ndarray:
        return np.array(self.values[k - 1, :k])

    def labels(self) -> list[str]:
        return [param_label(k, j) for k, j in grid_index(self.K)]


def _jsonable(a):
    if a is None:
        return None
    return np.asarray(a, dtype=float).tolist()


@dataclass
class FitReport:
    """Point estimates and covariances from one estimator.

    Parameters
    ----------
    estimator
        Tag such as ``"iptw"``, ``"gest-basic"``, ``"gest-efficient"``, ``"iv"``.
    structure
        ``"saturated"`` (one coefficient per ``(k, j)``) or ``"decay"``.
    params, names
        Full parameter vector, possibly including nuisance intercepts.
    blocks
        For saturated fits, ``k -> indices into params`` of ``beta_k(1..k)``.
        Decay fits locate ``beta`` and ``alpha`` through ``names`` instead.
    times
        Reference time grid used to expand a decay fit into a grid.
    """

    estimator: str
    structure: str
    params: np.ndarray
    names: list[str]
    cov_sandwich: np.ndarray
    cov_naive: np.ndarray | None = None
    blocks: dict[int, list[int]] = field(default_factory=dict)
    n: int = 0
    K: int = 0
    times: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        self.cov_sandwich = np.asarray(self.cov_sandwich, dtype=float)
        p = self.params.size
        if self.cov_sandwich.shape != (p, p):
            raise DimensionMismatch(f"sandwich covariance {self.cov_sandwich.shape} for {p} parameters")
        if self.cov_naive is not None:
            self.cov_naive = np.asarray(self.cov_naive, dtype=float)
            if self.cov_naive.shape != (p, p):
                raise DimensionMismatch("naive covariance has the wrong shape")
        if len(self.names) != p:
            raise DimensionMismatch("one name per parameter is required")
        self.blocks = {int(k): [int(i) for i in v] for k, v in self.blocks.items()}
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=float)

    # -- accessors -----------------------------------------------------------

    @property
    def se_sandwich(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_sandwich), 0.0, None))

    @property
    def se_naive(self) -> np.ndarray | None:
        if self.cov_naive is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov_naive), 0.0, None))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def decay_params(self) -> tuple[float, float]:
        return float(self.params[self.index("beta")]), float(self.params[self.index("alpha")])

    def _times(self) -> np.ndarray:
        if self.times is not None:
            return self.times
        return np.arange(1.0, self.K + 1)

    def outcome_block(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Coefficients ``beta_k(1..k)`` and their sandwich covariance.

        For decay fits the covariance is the delta-method transform of the
        ``(beta, alpha)`` block.
        """
        if self.structure == "saturated":
            if k not in self.blocks:
                raise MissingOutcomeBlock(f"fit has no coefficients for outcome {k}")
            idx = self.blocks[k]
            return self.params[idx].copy(), self.cov_sandwich[np.ix_(idx, idx)].copy()
        if not 1 <= k <= self.K:
            raise MissingOutcomeBlock(f"fit has no coefficients for outcome {k}")
        beta, alpha = self.decay_params()
        t = self._times()
        lags = t[k - 1] - t[:k]
        coef = decay_coefficients(beta, alpha, t, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            d_alpha = np.where(lags == 0, 0.0, beta * lags * np.power(alpha, lags - 1))
        D = np.column_stack([np.power(alpha, lags), d_alpha])
        idx = [self.index("beta"), self.index("alpha")]
        sub = self.cov_sandwich[np.ix_(idx, idx)]
        return coef, D @ sub @ D.T

    def grid(self) -> EffectGrid:
        if self.structure == "decay":
            beta, alpha = self.decay_params()
            return EffectGrid.from_decay(beta, alpha, self._times())
        v = np.full((self.K, self.K), np.nan)
        for k in range(1, self.K + 1):
            v[k - 1, :k] = self.outcome_block(k)[0]
        return EffectGrid(v)

    def effect_vector(self) -> np.ndarray:
        """Outcome-major ``beta_k(j)`` values (decay fits expanded)."""
        return self.grid().as_vector()

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "structure": self.structure,
            "names": list(self.names),
            "params": _jsonable(self.params),
            "se_sandwich": _jsonable(self.se_sandwich),
            "se_naive": _jsonable(self.se_naive),
            "cov_sandwich": _jsonable(self.cov_sandwich),
            "cov_naive": _jsonable(self.cov_naive),
            "blocks": {str(k): v for k, v in self.blocks.items()},
            "n": self.n,
            "K": self.K,
            "times": _jsonable(self.times),
            "info": self.info,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), default=_json_default, **kwargs)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitReport":
        return cls(
            estimator=d["estimator"],
            structure=d["structure"],
            params=np.asarray(d["params"], dtype=float),
            names=list(d["names"]),
            cov_sandwich=np.asarray(d["cov_sandwich"], dtype=float),
            cov_naive=None if d.get("cov_naive") is None else np.asarray(d["cov_naive"], dtype=float),
            blocks={int(k): v for k, v in d.get("blocks", {}).items()},
            n=int(d.get("n", 0)),
            K=int(d.get("K", 0)),
            times=None if d.get("times") is None else np.asarray(d["times"], dtype=float),
            info=dict(d.get("info", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls.from_dict(json.loads(text))

    def coefficient_table(self) -> pd.DataFrame:
        """One row per parameter: name, estimate, sandwich SE, naive SE."""
        naive = self.se_naive
        return pd.DataFrame(
            {
                "estimator": self.estimator,
                "param": self.names,
                "estimate": self.params,
                "se_sandwich": self.se_sandwich,
                "se_naive": naive if naive is not None else np.nan,
            }
        )


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
