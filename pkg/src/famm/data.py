"""Containers for functional responses and their covariates.

Responses are kept in long format (one :class:`CurveRecord` per curve, each
with its own grid), so irregular and sparse designs need no special casing.
A missing response value is simply an absent ``(t, y)`` pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    AlreadyCentered,
    DimensionMismatch,
    DuplicateObservation,
    InvalidValue,
    MissingCovariate,
    UnknownCurve,
)


@dataclass(frozen=True)
class CurveRecord:
    curve_id: int
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if t.shape != y.shape or t.size == 0:
            raise InvalidValue(f"curve {self.curve_id}: t and y must be non-empty and of equal length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise InvalidValue(f"curve {self.curve_id}: non-finite value")
        if np.any(np.diff(t) <= 0):
            raise InvalidValue(f"curve {self.curve_id}: t must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.t.size


@dataclass(frozen=True)
class FunctionalCovariate:
    """Functional covariate evaluated on a common dense grid.

    Row ``i`` of ``values`` holds ``x_i(s)`` at ``s_grid``.
    """

    s_grid: np.ndarray
    values: np.ndarray
    mean_curve: Optional[np.ndarray] = None
    centered: bool = False

    def __post_init__(self):
        s = np.asarray(self.s_grid, dtype=float).ravel()
        x = np.atleast_2d(np.asarray(self.values, dtype=float))
        if x.shape[1] != s.size:
            raise DimensionMismatch(f"covariate has {x.shape[1]} columns but grid has {s.size} points")
        if np.any(np.diff(s) <= 0):
            raise InvalidValue("s_grid must be strictly increasing")
        if not np.all(np.isfinite(x)):
            raise InvalidValue("functional covariate contains non-finite values")
        object.__setattr__(self, "s_grid", s)
        object.__setattr__(self, "values", x)
        if self.mean_curve is not None:
            object.__setattr__(self, "mean_curve", np.asarray(self.mean_curve, dtype=float).ravel())

    @property
    def n(self):
        return self.values.shape[0]

    def uncentered(self):
        """Values with the stored mean function added back."""
        if not self.centered:
            return self.values.copy()
        return self.values + self.mean_curve


def center_functional_covariate(x: FunctionalCovariate) -> FunctionalCovariate:
    """Subtract the pointwise mean function from every covariate curve."""
    if x.centered:
        raise AlreadyCentered("functional covariate is already centered")
    mean = x.values.mean(axis=0)
    return FunctionalCovariate(x.s_grid, x.values - mean, mean_curve=mean, centered=True)


@dataclass(frozen=True)
class FunctionalDataset:
    """Functional responses with scalar, functional and grouping covariates.

    Curves are ordered by ``curve_id`` and all per-curve covariates are
    aligned with that order. Grouping factors are integer codes ``1..M``.
    """

    curves: tuple
    scalar_covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    functional_covariates: Mapping[str, FunctionalCovariate] = field(default_factory=dict)
    groupings: Mapping[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_curves(self):
        return len(self.curves)

    @property
    def curve_ids(self):
        return np.array([c.curve_id for c in self.curves], dtype=int)

    @property
    def lengths(self):
        return np.array([len(c) for c in self.curves], dtype=int)

    @property
    def n_obs(self):
        return int(self.lengths.sum())

    @property
    def y(self):
        return np.concatenate([c.y for c in self.curves])

    @property
    def t(self):
        return np.concatenate([c.t for c in self.curves])

    @property
    def curve_index(self):
        """0-based curve position for every stacked observation."""
        return np.repeat(np.arange(self.n_curves), self.lengths)

    @property
    def t_range(self):
        t = self.t
        return float(t.min()), float(t.max())

    def common_grid(self):
        """The shared response grid, or ``None`` if curves differ."""
        first = self.curves[0].t
        for c in self.curves[1:]:
            if c.t.shape != first.shape or not np.array_equal(c.t, first):
                return None
        return first.copy()

    def n_levels(self, name):
        return int(self.grouping(name).max())

    def scalar(self, name):
        try:
            return self.scalar_covariates[name]
        except KeyError:
            raise MissingCovariate(f"unknown scalar covariate {name!r}") from None

    def functional(self, name) -> FunctionalCovariate:
        try:
            return self.functional_covariates[name]
        except KeyError:
            raise MissingCovariate(f"unknown functional covariate {name!r}") from None

    def grouping(self, name):
        try:
            return self.groupings[name]
        except KeyError:
            raise MissingCovariate(f"unknown grouping factor {name!r}") from None

    def response_matrix(self):
        """``n x T`` response matrix; requires a common grid."""
        if self.common_grid() is None:
            raise DimensionMismatch("response grids differ between curves")
        return np.vstack([c.y for c in self.curves])

    def with_responses(self, y):
        """Copy of the dataset with the stacked response vector replaced."""
        y = np.asarray(y, dtype=float).ravel()
        if y.size != self.n_obs:
            raise DimensionMismatch("response vector length does not match the dataset")
        parts = np.split(y, np.cumsum(self.lengths)[:-1])
        curves = tuple(CurveRecord(c.curve_id, c.t, p) for c, p in zip(self.curves, parts))
        return replace(self, curves=curves)

    def with_functional(self, name, covariate: FunctionalCovariate):
        fc = dict(self.functional_covariates)
        fc[name] = covariate
        return replace(self, functional_covariates=fc)

    def subset(self, positions):
        """Dataset restricted to the curves at the given 0-based positions."""
        positions = np.asarray(positions, dtype=int)
        curves = tuple(self.curves[p] for p in positions)
        scalars = {k: v[positions] for k, v in self.scalar_covariates.items()}
        funcs = {
            k: replace(v, values=v.values[positions]) for k, v in self.functional_covariates.items()
        }
        groups = {k: v[positions] for k, v in self.groupings.items()}
        return FunctionalDataset(curves, scalars, funcs, groups)


def _recode(levels):
    """Map arbitrary labels onto contiguous codes ``1..M`` in sorted order."""
    _, codes = np.unique(np.asarray(levels), return_inverse=True)
    return codes.astype(int) + 1


def _column_table(table, name, ids):
    """Align a columnar table ``{"curve_id": [...], col: [...]}`` to ``ids``."""
    if "curve_id" not in table:
        raise MissingCovariate(f"{name} table has no curve_id column")
    tab_ids = [int(v) for v in table["curve_id"]]
    if len(set(tab_ids)) != len(tab_ids):
        raise InvalidValue(f"{name} table has duplicate curve ids")
    extra = set(tab_ids) - set(ids)
    if extra:
        raise UnknownCurve(f"{name} table references unknown curves {sorted(extra)[:5]}")
    missing = set(ids) - set(tab_ids)
    if missing:
        raise MissingCovariate(f"{name} table lacks rows for curves {sorted(missing)[:5]}")
    pos = {cid: k for k, cid in enumerate(tab_ids)}
    order = np.array([pos[cid] for cid in ids], dtype=int)
    out = {}
    for col, vals in table.items():
        if col == "curve_id":
            continue
        vals = np.asarray(vals)
        if len(vals) != len(tab_ids):
            raise DimensionMismatch(f"{name} column {col!r} has the wrong length")
        out[col] = vals[order]
    return out


def build_dataset(
    long_records: Sequence,
    scalar_table: Optional[Mapping] = None,
    functional_tables: Optional[Mapping] = None,
    grouping_table: Optional[Mapping] = None,
) -> FunctionalDataset:
    """Assemble and validate a :class:`FunctionalDataset`.

    Parameters
    ----------
    long_records : sequence of (curve_id, t, y)
        One entry per observed response value.
    scalar_table, grouping_table : mapping, optional
        Columnar tables with a ``curve_id`` column and one column per
        covariate.
    functional_tables : mapping, optional
        ``name -> (s_grid, curve_ids, values)`` with one row of ``values`` per
        listed curve id.
    """
    recs = list(long_records)
    if not recs:
        raise InvalidValue("no response records given")
    arr = np.array([(float(c), float(t), float(y)) for c, t, y in recs])
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("non-finite value in response records")
    cid = arr[:, 0].astype(int)
    order = np.lexsort((arr[:, 1], cid))
    cid, t, y = cid[order], arr[order, 1], arr[order, 2]
    dup = (np.diff(cid) == 0) & (np.diff(t) == 0)
    if np.any(dup):
        k = int(np.flatnonzero(dup)[0])
        raise DuplicateObservation(f"duplicate observation for curve {cid[k]} at t={t[k]}")
    ids, starts = np.unique(cid, return_index=True)
    bounds = list(starts[1:]) + [cid.size]
    curves = tuple(CurveRecord(int(i), t[a:b], y[a:b]) for i, a, b in zip(ids, starts, bounds))
    id_list = [int(i) for i in ids]

    scalars = {}
    if scalar_table:
        for k, v in _column_table(scalar_table, "scalar", id_list).items():
            v = np.asarray(v, dtype=float)
            if not np.all(np.isfinite(v)):
                raise InvalidValue(f"scalar covariate {k!r} has missing or non-finite values")
            scalars[k] = v

    groups = {}
    if grouping_table:
        for k, v in _column_table(grouping_table, "grouping", id_list).items():
            groups[k] = _recode(v)

    funcs = {}
    for name, (s_grid, f_ids, values) in (functional_tables or {}).items():
        f_ids = [int(i) for i in f_ids]
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[0] != len(f_ids):
            raise DimensionMismatch(f"functional covariate {name!r}: row count differs from id count")
        table = {"curve_id": f_ids, "_row": np.arange(len(f_ids))}
        rows = _column_table(table, f"functional {name!r}", id_list)["_row"]
        funcs[name] = FunctionalCovariate(s_grid, values[rows.astype(int)])

    return FunctionalDataset(curves, scalars, funcs, groups)


def to_long_records(ds: FunctionalDataset):
    """Inverse of the response part of :func:`build_dataset`."""
    return [(c.curve_id, float(tt), float(yy)) for c in ds.curves for tt, yy in zip(c.t, c.y)]
