"""Longitudinal panel data model, wide-CSV ingestion and history designs.

A panel holds ``n`` individuals observed at ``K`` time points: exposure
``A``, outcome ``Y`` and measurement time ``t`` (all ``n x K``), baseline
covariates ``L0`` (``n x p0``), and optionally time-varying covariates
``V`` (``n x K``) and an instrument ``G`` (length ``n``).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    BadTimeIndex,
    DimensionMismatch,
    MissingColumn,
    MissingFile,
    NonFiniteValue,
    NonIncreasingTimes,
    NonPositiveDenominator,
    TooFewRows,
    UnknownConfigKey,
    ZeroPeriod,
)

logger = logging.getLogger(__name__)

DEFAULT_MPR_CAP = 200.0


def _frozen(a) -> np.ndarray | None:
    if a is None:
        return None
    arr = np.array(a, dtype=float, copy=True, order="C")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PanelData:
    """Rectangular longitudinal dataset; immutable after construction."""

    A: np.ndarray
    Y: np.ndarray
    t: np.ndarray
    L0: np.ndarray
    L0_names: tuple[str, ...] = ()
    V: np.ndarray | None = None
    G: np.ndarray | None = None
    ids: tuple = ()
    latent: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        n, K = A.shape
        L0 = np.asarray(self.L0, dtype=float).reshape(n, -1) if np.size(self.L0) else np.empty((n, 0))
        names = tuple(self.L0_names) if self.L0_names else tuple(f"L{c + 1}" for c in range(L0.shape[1]))
        ids = tuple(self.ids) if len(self.ids) else tuple(range(1, n + 1))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "Y", _frozen(np.asarray(self.Y, dtype=float).reshape(n, -1)))
        object.__setattr__(self, "t", _frozen(np.asarray(self.t, dtype=float).reshape(n, -1)))
        object.__setattr__(self, "L0", _frozen(L0))
        object.__setattr__(self, "L0_names", names)
        object.__setattr__(self, "ids", ids)
        if self.V is not None:
            object.__setattr__(self, "V", _frozen(np.asarray(self.V, dtype=float).reshape(n, -1)))
        if self.G is not None:
            object.__setattr__(self, "G", _frozen(np.asarray(self.G, dtype=float).reshape(n)))
        object.__setattr__(self, "latent", {k: _frozen(v) for k, v in dict(self.latent).items()})
        self._validate()

    def _validate(self) -> None:
        n, K = self.A.shape
        if K < 1:
            raise DimensionMismatch("panel needs at least one time point")
        for name in ("Y", "t"):
            if getattr(self, name).shape != (n, K):
                raise DimensionMismatch(f"{name} has shape {getattr(self, name).shape}, expected {(n, K)}")
        if self.V is not None and self.V.shape != (n, K):
            raise DimensionMismatch(f"V has shape {self.V.shape}, expected {(n, K)}")
        if len(self.L0_names) != self.L0.shape[1]:
            raise DimensionMismatch("L0_names does not match the number of L0 columns")
        if len(self.ids) != n:
            raise DimensionMismatch("ids does not match the number of rows")
        for label, arr in self._named_columns():
            bad = ~np.isfinite(arr)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise NonFiniteValue(row, label)
        if K > 1:
            steps = np.diff(self.t, axis=1)
            bad_rows = np.flatnonzero((steps <= 0).any(axis=1))
            if bad_rows.size:
                raise NonIncreasingTimes(self.ids[bad_rows[0]])
        if n < K + self.p0 + 2:
            raise TooFewRows(f"n={n} rows but at least K + p0 + 2 = {K + self.p0 + 2} are needed")

    def _named_columns(self):
        for k in range(self.K):
            yield f"A{k + 1}", self.A[:, k]
            yield f"Y{k + 1}", self.Y[:, k]
            yield f"t{k + 1}", self.t[:, k]
            if self.V is not None:
                yield f"V{k + 1}", self.V[:, k]
        for c, name in enumerate(self.L0_names):
            yield name, self.L0[:, c]
        if self.G is not None:
            yield "G", self.G

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def K(self) -> int:
        return self.A.shape[1]

    @property
    def p0(self) -> int:
        return self.L0.shape[1]

    @property
    def common_times(self) -> np.ndarray | None:
        """The shared time grid when every row has the same ``t``, else ``None``."""
        if np.all(self.t == self.t[0]):
            return np.array(self.t[0])
        return None

    def baseline(self, exclude: Iterable[str] = ()) -> tuple[np.ndarray, list[str]]:
        """Baseline covariates with the named columns removed."""
        drop = set(exclude)
        keep = [c for c, name in enumerate(self.L0_names) if name not in drop]
        return self.L0[:, keep], [self.L0_names[c] for c in keep]

    def replace(self, **changes) -> "PanelData":
        return replace(self, **changes)

    def to_frame(self) -> pd.DataFrame:
        """Wide layout: ``id, A1..AK, Y1..YK, t1..tK, L0..., V1..VK, G``."""
        cols: dict[str, np.ndarray] = {"id": np.asarray(self.ids, dtype=object)}
        for prefix, arr in (("A", self.A), ("Y", self.Y), ("t", self.t)):
            for k in range(self.K):
                cols[f"{prefix}{k + 1}"] = arr[:, k]
        for c, name in enumerate(self.L0_names):
            cols[name] = self.L0[:, c]
        if self.V is not None:
            for k in range(self.K):
                cols[f"V{k + 1}"] = self.V[:, k]
        if self.G is not None:
            cols["G"] = self.G
        return pd.DataFrame(cols)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """A history design ``H_j``: one row per individual, named columns."""

    X: np.ndarray
    columns: tuple[str, ...]
    j: int

    def header(self) -> str:
        return ",".join(self.columns)


# ---------------------------------------------------------------------------
# column spec and CSV round trip


@dataclass(frozen=True)
class ColumnSpec:
    """Maps a wide CSV onto a :class:`PanelData`.

    ``A``, ``Y`` and ``t`` list the per-time columns in time order. ``t`` may
    be left empty for equally spaced designs (``t_k = k``). Columns listed in
    ``categorical`` (or non-numeric ``L0`` columns) are one-hot encoded with
    the first level, by order of appearance, as reference.
    """

    A: tuple[str, ...]
    Y: tuple[str, ...]
    id: str | None = None
    t: tuple[str, ...] = ()
    L0: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    V: tuple[str, ...] = ()
    G: str | None = None
    exposure_cap: float | None = DEFAULT_MPR_CAP

    def __post_init__(self):
        for name in ("A", "Y", "t", "L0", "categorical", "V"):
            value = getattr(self, name)
            if isinstance(value, str):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        if len(self.A) != len(self.Y):
            raise DimensionMismatch("A and Y must list the same number of time points")
        for name in ("t", "V"):
            if getattr(self, name) and len(getattr(self, name)) != len(self.A):
                raise DimensionMismatch(f"{name} must list one column per time point")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UnknownConfigKey(f"unknown column-spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path_or_text: str | Path) -> "ColumnSpec":
        text = str(path_or_text)
        if not text.lstrip().startswith("{"):
            text = Path(path_or_text).read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}

    @classmethod
    def infer(cls, columns: Sequence[str], id_column: str | None = "id") -> "ColumnSpec":
        """Guess a spec from the naming convention written by :func:`save_panel`."""

        def series(prefix: str) -> tuple[str, ...]:
            found = {}
            for c in columns:
                m = re.fullmatch(rf"{prefix}(\d+)", c)
                if m:
                    found[int(m.group(1))] = c
            return tuple(found[k] for k in sorted(found))

        A, Y, t, V = series("A"), series("Y"), series("t"), series("V")
        if not A:
            raise MissingColumn("A1")
        taken = set(A) | set(Y) | set(t) | set(V) | {"G", id_column}
        L0 = tuple(c for c in columns if c not in taken)
        return cls(
            A=A,
            Y=Y,
            id=id_column if id_column in columns else None,
            t=t,
            L0=L0,
            V=V,
            G="G" if "G" in columns else None,
        )


def _dummy_code(values: pd.Series, name: str) -> tuple[np.ndarray, list[str]]:
    levels = list(pd.unique(values))
    if len(levels) < 2:
        return np.empty((len(values), 0)), []
    cols = [(values == lev).to_numpy(dtype=float) for lev in levels[1:]]
    return np.column_stack(cols), [f"{name}[{lev}]" for lev in levels[1:]]


def panel_from_frame(df: pd.DataFrame, spec: ColumnSpec) -> PanelData:
    """Build a :class:`PanelData` from a wide frame according to ``spec``."""
    needed = list(spec.A) + list(spec.Y) + list(spec.t) + list(spec.L0) + list(spec.V)
    needed += [c for c in (spec.id, spec.G) if c]
    for c in needed:
        if c not in df.columns:
            raise MissingColumn(c)

    numeric_cols = list(spec.A) + list(spec.Y) + list(spec.t) + list(spec.V) + ([spec.G] if spec.G else [])
    for c in numeric_cols:
        coerced = pd.to_numeric(df[c], errors="coerce")
        bad = ~np.isfinite(coerced.to_numpy(dtype=float))
        if bad.any():
            raise NonFiniteValue(int(np.flatnonzero(bad)[0]), c)

    if spec.exposure_cap is not None:
        A_all = df[list(spec.A)].to_numpy(dtype=float)
        extreme = (A_all > spec.exposure_cap).any(axis=1)
        if extreme.any():
            logger.info("excluding %d rows with exposure above %g", int(extreme.sum()), spec.exposure_cap)
            df = df.loc[~extreme].reset_index(drop=True)

    K = len(spec.A)
    A = df[list(spec.A)].to_numpy(dtype=float)
    Y = df[list(spec.Y)].to_numpy(dtype=float)
    t = df[list(spec.t)].to_numpy(dtype=float) if spec.t else np.tile(np.arange(1.0, K + 1), (len(df), 1))
    V = df[list(spec.V)].to_numpy(dtype=float) if spec.V else None
    G = df[spec.G].to_numpy(dtype=float) if spec.G else None

    blocks, names = [], []
    for c in spec.L0:
        col = df[c]
        is_cat = c in spec.categorical or not pd.api.types.is_numeric_dtype(col)
        if is_cat:
            if col.isna().any():
                raise NonFiniteValue(int(np.flatnonzero(col.isna().to_numpy())[0]), c)
            mat, labels = _dummy_code(col, c)
            blocks.append(mat)
            names.extend(labels)
        else:
            blocks.append(col.to_numpy(dtype=float)[:, None])
            names.append(c)
    L0 = np.column_stack(blocks) if blocks else np.empty((len(df), 0))
    ids = tuple(df[spec.id].tolist()) if spec.id else ()
    return PanelData(A=A, Y=Y, t=t, L0=L0, L0_names=tuple(names), V=V, G=G, ids=ids)


def load_panel(path: str | Path, schema: ColumnSpec | None = None) -> PanelData:
    """Read a wide CSV (one row per individual) into a validated panel.

    With ``schema=None`` the column roles are inferred from the ``A1..AK``,
    ``Y1..YK``, ``t1..tK``, ``V1..VK``, ``G`` and ``id`` naming convention.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"file not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")
    if schema is None:
        schema = ColumnSpec.infer(list(df.columns))
    return panel_from_frame(df, schema)


def save_panel(panel: PanelData, path: str | Path) -> ColumnSpec:
    """Write ``panel`` as wide CSV; returns the column layout that reads it back."""
    df = panel.to_frame()
    df.to_csv(path, index=False, float_format="%.17g")
    K = panel.K
    return ColumnSpec(
        A=tuple(f"A{k + 1}" for k in range(K)),
        Y=tuple(f"Y{k + 1}" for k in range(K)),
        id="id",
        t=tuple(f"t{k + 1}" for k in range(K)),
        L0=panel.L0_names,
        V=tuple(f"V{k + 1}" for k in range(K)) if panel.V is not None else (),
        G="G" if panel.G is not None else None,
        exposure_cap=None,
    )


def long_to_wide(df: pd.DataFrame, id_col: str, time_col: str, values: Sequence[str]) -> pd.DataFrame:
    """Pivot a long panel (one row per id and visit) to the wide layout.

    Visits are numbered 1..K within each id by ``time_col`` order; value
    columns become ``<name><k>``. Columns constant within id are carried
    over once.
    """
    df = df.sort_values([id_col, time_col]).copy()
    df["_visit"] = df.groupby(id_col).cumcount() + 1
    wide = df.pivot(index=id_col, columns="_visit", values=list(values) + [time_col])
    wide.columns = [f"{'t' if name == time_col else name}{k}" for name, k in wide.columns]
    rest = [c for c in df.columns if c not in set(values) | {time_col, "_visit", id_col}]
    const = [c for c in rest if (df.groupby(id_col)[c].nunique(dropna=False) <= 1).all()]
    if const:
        wide = wide.join(df.groupby(id_col)[const].first())
    return wide.reset_index()


# ---------------------------------------------------------------------------
# derived variables for the applied example


def compute_mpr(tablets, period_days):
    """Medication possession ratio in percent: ``100 * tablets / period_days``."""
    tablets = np.asarray(tablets, dtype=float)
    period_days = np.asarray(period_days, dtype=float)
    if np.any(period_days <= 0):
        raise ZeroPeriod("period length must be positive")
    if np.any(tablets < 0):
        raise ValueError("tablet counts must be non-negative")
    out = 100.0 * tablets / period_days
    return float(out) if out.ndim == 0 else out


def flag_extreme_mpr(mpr, cap: float = DEFAULT_MPR_CAP):
    """True where the MPR exceeds ``cap`` and the individual should be excluded."""
    return np.asarray(mpr, dtype=float) > cap


def compute_ldl_outcome(ldl_k, ldl_0, denominator: str = "current"):
    """LDL-c change ``(LDL_k - LDL_0) / LDL_k``.

    ``denominator="baseline"`` divides by ``LDL_0`` instead, the usual
    definition of a change relative to baseline.
    """
    ldl_k = np.asarray(ldl_k, dtype=float)
    ldl_0 = np.asarray(ldl_0, dtype=float)
    if denominator == "current":
        denom = ldl_k
    elif denominator == "baseline":
        denom = ldl_0
    else:
        raise ValueError(f"denominator must be 'current' or 'baseline', got {denominator!r}")
    if np.any(denom <= 0):
        raise NonPositiveDenominator("LDL denominator must be positive")
    out = (ldl_k - ldl_0) / denom
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# history designs


def history_design(panel: PanelData, j: int, exclude: Iterable[str] = ()) -> DesignMatrix:
    """Design matrix of the observed history before exposure ``j`` (1-based).

    Column order: ``const``, baseline covariates, ``A1..A{j-1}``,
    ``Y1..Y{j-1}``, ``V1..Vj``, ``t1..tj``. Time columns that are identical
    for everyone carry no information beyond the intercept and are left
    out, as are any names in ``exclude``.
    """
    if not 1 <= j <= panel.K:
        raise BadTimeIndex(f"time index {j} outside 1..{panel.K}")
    drop = set(exclude)
    cols: list[np.ndarray] = [np.ones(panel.n)]
    names: list[str] = ["const"]

    def add(name: str, values: np.ndarray, skip_constant: bool = False) -> None:
        if name in drop:
            return
        if skip_constant and np.all(values == values[0]):
            return
        cols.append(values)
        names.append(name)

    for c, name in enumerate(panel.L0_names):
        add(name, panel.L0[:, c])
    for s in range(j - 1):
        add(f"A{s + 1}", panel.A[:, s])
    for s in range(j - 1):
        add(f"Y{s + 1}", panel.Y[:, s])
    if panel.V is not None:
        for s in range(j):
            add(f"V{s + 1}", panel.V[:, s])
    for s in range(j):
        add(f"t{s + 1}", panel.t[:, s], skip_constant=True)
    return DesignMatrix(np.column_stack(cols), tuple(names), j)
