"""CSV readers and writers, fit artifacts and SVG plots.

File layouts
------------
responses
    long format with header ``curve_id,t,y``.
functional covariate / curve matrix
    wide format: the first row is ``curve_id`` followed by the grid points,
    each further row is a curve id followed by its values (empty or ``nan``
    for missing values).
covariates
    one row per curve: ``curve_id`` then one column per scalar or grouping
    covariate.
Numbers are written with 17 significant digits.
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path

import numpy as np

from .data import FunctionalDataset, build_dataset
from .errors import ParseError

FLOAT_FMT = "%.17g"


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return FLOAT_FMT % v


def _parse_float(cell, path, line, col):
    cell = cell.strip()
    if cell == "" or cell.lower() == "nan" or cell.upper() == "NA":
        return float("nan")
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{path}: not a number: {cell!r}", f"line {line}, column {col}") from None


def _parse_int(cell, path, line, col):
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"{path}: not an integer: {cell!r}", f"line {line}, column {col}") from None
    if not float(v).is_integer():
        raise ParseError(f"{path}: not an integer: {cell!r}", f"line {line}, column {col}")
    return int(v)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            yield lineno, row


def read_responses_csv(path):
    """Read ``curve_id,t,y`` records."""
    out = []
    header = None
    for line, row in _rows(path):
        if header is None:
            header = [c.strip() for c in row]
            if header != ["curve_id", "t", "y"]:
                raise ParseError(f"{path}: expected header curve_id,t,y", f"line {line}")
            continue
        if len(row) != 3:
            raise ParseError(f"{path}: expected 3 fields, found {len(row)}", f"line {line}")
        cid = _parse_int(row[0], path, line, 1)
        t = _parse_float(row[1], path, line, 2)
        y = _parse_float(row[2], path, line, 3)
        if math.isnan(t) or math.isnan(y):
            raise ParseError(f"{path}: missing t or y value (omit the row instead)", f"line {line}")
        out.append((cid, t, y))
    if header is None:
        raise ParseError(f"{path}: empty file", "line 1")
    return out


def write_responses_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id", "t", "y"])
        for cid, t, y in records:
            w.writerow([int(cid), fmt(t), fmt(y)])


def read_wide_csv(path):
    """Read a wide curve matrix. Returns ``(grid, curve_ids, values)``."""
    grid, ids, vals = None, [], []
    for line, row in _rows(path):
        if grid is None:
            if row[0].strip() != "curve_id":
                raise ParseError(f"{path}: first cell must be 'curve_id'", f"line {line}")
            grid = np.array([_parse_float(c, path, line, j + 2) for j, c in enumerate(row[1:])])
            if np.isnan(grid).any() or grid.size < 1:
                raise ParseError(f"{path}: grid row has missing values", f"line {line}")
            continue
        if len(row) != grid.size + 1:
            raise ParseError(
                f"{path}: expected {grid.size + 1} fields, found {len(row)}", f"line {line}"
            )
        ids.append(_parse_int(row[0], path, line, 1))
        vals.append([_parse_float(c, path, line, j + 2) for j, c in enumerate(row[1:])])
    if grid is None:
        raise ParseError(f"{path}: empty file", "line 1")
    return grid, ids, np.array(vals, dtype=float).reshape(len(ids), grid.size)


def write_wide_csv(path, grid, ids, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id"] + [fmt(g) for g in grid])
        for cid, row in zip(ids, np.atleast_2d(values)):
            w.writerow([int(cid)] + [fmt(v) for v in row])


def read_table_csv(path):
    """Columnar table keyed by header names; cells stay strings."""
    header, cols = None, {}
    for line, row in _rows(path):
        if header is None:
            header = [c.strip() for c in row]
            if not header or header[0] != "curve_id":
                raise ParseError(f"{path}: first column must be curve_id", f"line {line}")
            cols = {h: [] for h in header}
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: expected {len(header)} fields, found {len(row)}", f"line {line}")
        for h, c in zip(header, row):
            cols[h].append((c.strip(), line))
    if header is None:
        raise ParseError(f"{path}: empty file", "line 1")
    return cols


def read_covariates_csv(path, grouping_columns=()):
    """Split a per-curve table into scalar and grouping tables."""
    cols = read_table_csv(path)
    ids = [_parse_int(c, path, ln, 1) for c, ln in cols.pop("curve_id")]
    scalars = {"curve_id": ids}
    groups = {"curve_id": ids}
    for name in grouping_columns:
        if name not in cols:
            raise ParseError(f"{path}: no grouping column {name!r}", "line 1")
    for j, (name, cells) in enumerate(cols.items(), start=2):
        if name in grouping_columns:
            groups[name] = [c for c, _ in cells]
        else:
            scalars[name] = [_parse_float(c, path, ln, j) for c, ln in cells]
    return (scalars if len(scalars) > 1 else None), (groups if len(groups) > 1 else None)


def write_covariates_csv(path, ds: FunctionalDataset):
    names = list(ds.scalar_covariates) + list(ds.groupings)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id"] + names)
        for i, cid in enumerate(ds.curve_ids):
            row = [int(cid)]
            row += [fmt(ds.scalar_covariates[n][i]) for n in ds.scalar_covariates]
            row += [int(ds.groupings[n][i]) for n in ds.groupings]
            w.writerow(row)


def load_dataset(responses, covariates=None, functional=None, groupings=()):
    """Read all data files and build a validated dataset."""
    records = read_responses_csv(responses)
    scalars, groups = (None, None)
    if covariates:
        scalars, groups = read_covariates_csv(covariates, tuple(groupings))
    ftabs = {name: read_wide_csv(p) for name, p in (functional or {}).items()}
    return build_dataset(records, scalars, ftabs, groups)


def write_dataset(directory, ds: FunctionalDataset):
    """Write a dataset as responses.csv, covariates.csv and one wide file per functional covariate.

    Returns the ``data`` block of a model specification pointing at them.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_responses_csv(d / "responses.csv", [(c.curve_id, t, y) for c in ds.curves for t, y in zip(c.t, c.y)])
    block = {"responses": "responses.csv"}
    if ds.scalar_covariates or ds.groupings:
        write_covariates_csv(d / "covariates.csv", ds)
        block["covariates"] = "covariates.csv"
        block["groupings"] = list(ds.groupings)
    if ds.functional_covariates:
        block["functional"] = {}
        for name, x in ds.functional_covariates.items():
            fname = f"functional_{name}.csv"
            write_wide_csv(d / fname, x.s_grid, ds.curve_ids, x.uncentered())
            block["functional"][name] = fname
    return block


def safe_name(label):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label).strip("_") or "term"


def write_term_estimate(path, est):
    """One row per grid point: grid columns, estimate, se, ci_lo, ci_hi."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(est.columns) + ["estimate", "se", "ci_lo", "ci_hi"])
        for g, v, s, lo, hi in zip(est.grid, est.values, est.se, est.ci_lower, est.ci_upper):
            w.writerow([fmt(x) for x in g] + [fmt(v), fmt(s), fmt(lo), fmt(hi)])


def read_term_estimate(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return header, data


def write_matrix_csv(path, M, grid=None):
    """Square matrix with the grid as first row and column when given."""
    M = np.atleast_2d(M)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if grid is not None:
            w.writerow(["t"] + [fmt(g) for g in grid])
            for g, row in zip(grid, M):
                w.writerow([fmt(g)] + [fmt(v) for v in row])
        else:
            for row in M:
                w.writerow([fmt(v) for v in row])


def read_matrix_csv(path, with_grid=True):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if with_grid:
        grid = np.array([float(c) for c in rows[0][1:]])
        M = np.array([[float(c) for c in r[1:]] for r in rows[1:]])
        return grid, M
    return None, np.array([[float(c) for c in r] for r in rows])


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def fit_summary(model, spec_hash=None, seed=None):
    """JSON-ready summary of a fitted model."""
    pens = model.system.penalties
    return {
        "lambda": [float(v) for v in model.lam],
        "log_lambda": [float(v) for v in model.log_lambda],
        "penalties": [p.label for p in pens],
        "sigma2_eps": float(model.sigma2_eps),
        "edf": {k: float(v) for k, v in model.edf.items()},
        "edf_total": float(model.edf_total),
        "reml_value": float(model.reml_value),
        "converged": bool(model.converged),
        "local_minimum": None if model.local_minimum is None else bool(model.local_minimum),
        "iterations": int(model.iterations),
        "n_obs": int(model.system.N),
        "n_coef": int(model.system.K),
        "terms": [t.label for t in model.terms],
        "spec_hash": spec_hash,
        "seed": seed,
        "notes": list(model.notes),
        "fpc_components": None if model.fpca is None else int(model.fpca.n_components),
    }


def ensure_writable_dir(path):
    """Create ``path`` if needed and check that files can be written there."""
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    probe = p / ".famm_write_test"
    with open(probe, "w") as fh:
        fh.write("")
    probe.unlink()
    return p


# ---------------------------------------------------------------------------
# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "famm"
    return plt


def plot_curve(path, est, xlabel="t", title=None):
    """Line plot of a one-dimensional estimate with its pointwise band."""
    plt = _pyplot()
    x = est.grid[:, -1]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.fill_between(x, est.ci_lower, est.ci_upper, color="0.8", label=f"{est.level:.0%} CI")
    ax.plot(x, est.values, color="k", lw=1.5, label="estimate")
    ax.axhline(0, color="0.5", lw=0.5)
    ax.set_xlabel(xlabel)
    ax.set_title(title or est.label)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_surface(path, est, n_x, n_t, xlabel="s", title=None):
    """Heatmap of a surface estimate, colored by sign and significance.

    Cells whose pointwise band excludes zero are drawn at full strength;
    the rest are faded.
    """
    plt = _pyplot()
    from matplotlib.colors import TwoSlopeNorm

    vals = est.values.reshape(n_x, n_t)
    sig = ((est.ci_lower > 0) | (est.ci_upper < 0)).reshape(n_x, n_t)
    x = est.grid[:, 0].reshape(n_x, n_t)[:, 0]
    t = est.grid[:, -1].reshape(n_x, n_t)[0]
    vmax = max(np.abs(vals).max(), 1e-12)
    fig, ax = plt.subplots(figsize=(5, 4))
    norm = TwoSlopeNorm(vcenter=0.0, vmin=-vmax, vmax=vmax)
    im = ax.pcolormesh(x, t, vals.T, cmap="RdBu_r", norm=norm, shading="auto")
    ax.pcolormesh(x, t, np.where(sig, np.nan, 1.0).T, cmap="Greys", vmin=0, vmax=1,
                  alpha=0.45, shading="auto")
    fig.colorbar(im, ax=ax)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("t")
    ax.set_title(title or est.label)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
