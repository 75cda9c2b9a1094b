"""Simulated repeated-measures functional data and a replicate runner.

Data come from four additive predictors of increasing complexity, all with
a functional intercept and a functional random intercept per subject:

1. ``alpha(t) + b0_g(t) + u * b1_g(t)``
2. ``alpha(t) + int x1(s) beta1(s, t) ds + b0_g(t)``
3. scenario 2 plus ``int x2(s) beta2(s, t) ds``
4. scenario 2 plus ``gamma1(z1, t) + z2 * delta2(t)``

Seeds: replicate ``r`` of a study with seed ``s`` draws every latent
quantity from ``SeedSequence(s, spawn_key=(r, 0))`` and the residual noise
from ``SeedSequence(s, spawn_key=(r, 1))``. Configurations that differ only
in the noise level therefore share all latent draws, and results do not
depend on the number of workers.
"""

from __future__ import annotations

import csv
import io
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .basis import bspline_basis, trapezoid_weights
from .data import FunctionalCovariate, FunctionalDataset, CurveRecord
from .errors import FammError, InvalidValue, UnknownScenario
from .spec import ModelSpec
from .terms import TermSpec

S_GRID_SIZE = 40
RE_BASIS_SIZE = 5
COVARIATE_BASIS_SIZE = 5
RESULT_COLUMNS = (
    "scenario", "M", "ni", "T", "snr_b", "snr_eps", "rep",
    "component", "rimse", "coverage", "seconds", "converged",
)


def alpha(t):
    return np.sin(2 * np.pi * t) + 1.0


def beta1(s, t):
    return np.cos(2 * np.pi * s) * np.sin(np.pi * t)


def beta2(s, t):
    return s * t


def gamma1(z, t):
    return np.cos(np.pi * z) * t


def delta2(t):
    return 1.0 + t**2


@dataclass(frozen=True)
class SimConfig:
    scenario: int
    M: int = 10
    ni: int = 3
    T: int = 30
    snr_b: float = 1.0
    snr_eps: float = 5.0
    replications: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2, 3, 4):
            raise UnknownScenario(f"scenario must be 1-4, got {self.scenario}")
        for name in ("M", "ni", "T", "replications"):
            if int(getattr(self, name)) < 1:
                raise InvalidValue(f"{name} must be positive")
        if self.T < 2:
            raise InvalidValue("T must be at least 2")
        if not (self.snr_b > 0 and self.snr_eps > 0):
            raise InvalidValue("signal-to-noise ratios must be positive")
        if self.seed < 0:
            raise InvalidValue("seed must be non-negative")


@dataclass
class SimTruth:
    """True term evaluations, stacked in dataset row order."""

    components: dict
    predictor: np.ndarray
    sigma_eps: float
    labels: dict = field(default_factory=dict)


def replicate_streams(seed, rep):
    latent = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, 0)))
    noise = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, 1)))
    return latent, noise


def subject_probabilities(M):
    p = np.sqrt(np.arange(1, M + 1, dtype=float))
    return p / p.sum()


def draw_subject_labels(rng, M, n):
    """Unbalanced labels ``1..M`` with ``P(i) ~ sqrt(i)``; every level appears.

    Each subject first receives one curve; the remaining ``n - M`` labels
    are multinomial draws. If ``n < M`` the first ``n`` levels are used.
    """
    if n <= M:
        return np.arange(1, n + 1)
    extra = rng.choice(M, size=n - M, p=subject_probabilities(M)) + 1
    return np.sort(np.concatenate([np.arange(1, M + 1), extra]))


def _random_curves(rng, count, grid, K):
    B, _ = bspline_basis(grid, K, 3, 1, domain=(0.0, 1.0))
    return rng.standard_normal((count, K)) @ B.T


def _sd(v):
    return float(np.std(v))


def generate_scenario(cfg: SimConfig, rep: int = 0):
    """Draw one replicate. Returns ``(dataset, truth)``.

    Random-effect curves are cubic B-spline curves with five standard-normal
    coefficients, rescaled so that ``sd(fixed predictor) / sd(effect) =
    snr_b`` for every random effect. The residual standard deviation is
    ``sd(predictor) / snr_eps``.
    """
    rng, noise_rng = replicate_streams(cfg.seed, rep)
    M, n, T = cfg.M, cfg.M * cfg.ni, cfg.T
    t = np.linspace(0.0, 1.0, T)
    s = np.linspace(0.0, 1.0, S_GRID_SIZE)
    w = trapezoid_weights(s)
    g = draw_subject_labels(rng, M, n)
    b0 = _random_curves(rng, M, t, RE_BASIS_SIZE)
    b1 = _random_curves(rng, M, t, RE_BASIS_SIZE)
    x1 = _random_curves(rng, n, s, COVARIATE_BASIS_SIZE)
    x2 = _random_curves(rng, n, s, COVARIATE_BASIS_SIZE)
    u = rng.uniform(0.0, 1.0, n)
    z1 = rng.uniform(0.0, 1.0, n)
    z2 = rng.standard_normal(n)
    x1 -= x1.mean(axis=0)
    x2 -= x2.mean(axis=0)

    S, Tt = np.meshgrid(s, t, indexing="ij")
    fixed = {"alpha": np.tile(alpha(t), (n, 1))}
    if cfg.scenario >= 2:
        fixed["beta1"] = (x1 * w) @ beta1(S, Tt)
    if cfg.scenario == 3:
        fixed["beta2"] = (x2 * w) @ beta2(S, Tt)
    if cfg.scenario == 4:
        gam = gamma1(z1[:, None], t[None, :])
        gbar = gam.mean(axis=0)
        fixed["gamma1"] = gam - gbar
        fixed["alpha"] = fixed["alpha"] + gbar
        fixed["delta2"] = z2[:, None] * delta2(t)[None, :]
    fixed_total = sum(fixed.values())
    sd_fixed = _sd(fixed_total)
    random = {"b0": b0[g - 1]}
    if cfg.scenario == 1:
        random["b1"] = b1[g - 1] * u[:, None]
    for key, val in random.items():
        scale = sd_fixed / (cfg.snr_b * _sd(val))
        random[key] = val * scale
    comps = {**fixed, **random}
    eta = sum(comps.values())
    sigma = _sd(eta) / cfg.snr_eps
    y = eta + sigma * noise_rng.standard_normal(eta.shape)

    curves = tuple(CurveRecord(i + 1, t, y[i]) for i in range(n))
    scalars = {"u": u, "z1": z1, "z2": z2}
    funcs = {"x1": FunctionalCovariate(s, x1)}
    if cfg.scenario == 3:
        funcs["x2"] = FunctionalCovariate(s, x2)
    ds = FunctionalDataset(curves, scalars, funcs, {"subject": g})
    truth = SimTruth(
        components={k: v.ravel() for k, v in comps.items()},
        predictor=eta.ravel(),
        sigma_eps=sigma,
        labels=component_labels(cfg.scenario),
    )
    return ds, truth


def component_labels(scenario):
    """Map truth component names to the term labels of :func:`default_model_spec`."""
    out = {"alpha": "intercept_t", "b0": "random_intercept:subject"}
    if scenario == 1:
        out["b1"] = "random_slope:u:subject"
    if scenario >= 2:
        out["beta1"] = "functional_linear:x1"
    if scenario == 3:
        out["beta2"] = "functional_linear:x2"
    if scenario == 4:
        out["gamma1"] = "scalar_smooth_t:z1"
        out["delta2"] = "scalar_linear_t:z2"
    return out


def default_model_spec(scenario, fpc_random_intercept=False) -> ModelSpec:
    """The model matching a scenario, with library-default bases."""
    terms = [TermSpec("intercept_t")]
    if scenario >= 2:
        terms.append(TermSpec("functional_linear", covariate="x1"))
    if scenario == 3:
        terms.append(TermSpec("functional_linear", covariate="x2"))
    if scenario == 4:
        terms.append(TermSpec("scalar_smooth_t", covariate="z1"))
        terms.append(TermSpec("scalar_linear_t", covariate="z2"))
    if fpc_random_intercept:
        terms.append(TermSpec("fpc_random_intercept", group="subject", label="random_intercept:subject"))
    else:
        terms.append(TermSpec("random_intercept", group="subject"))
    if scenario == 1:
        terms.append(TermSpec("random_slope", group="subject", covariate="u"))
    return ModelSpec(terms=terms)


def rimse(estimated, truth, t_grid, lengths=None):
    """Relative integrated squared error averaged over curves.

    ``estimated`` and ``truth`` are stacked per-curve values (or ``n x T``
    matrices on ``t_grid``). With ``lengths`` each curve uses its own slice
    of ``t_grid`` (then the stacked t values). Curves whose true function
    integrates to zero are skipped with a warning.
    """
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise InvalidValue("estimate and truth shapes differ")
    t_grid = np.asarray(t_grid, dtype=float)
    if lengths is None:
        T = t_grid.size
        E, F = est.reshape(-1, T), tru.reshape(-1, T)
        w = trapezoid_weights(t_grid)
        num = (E - F) ** 2 @ w
        den = F**2 @ w
    else:
        bounds = np.cumsum(lengths)[:-1]
        num, den = [], []
        for e, f, tt in zip(np.split(est, bounds), np.split(tru, bounds), np.split(t_grid, bounds)):
            w = trapezoid_weights(tt) if tt.size > 1 else np.ones(1)
            num.append(((e - f) ** 2) @ w)
            den.append((f**2) @ w)
        num, den = np.array(num), np.array(den)
    ok = den > 0
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} curves with zero true function excluded", stacklevel=2)
    if not ok.any():
        return float("nan")
    return float(np.mean(num[ok] / den[ok]))


def coverage(lower, upper, truth):
    """Share of pointwise intervals that contain the true value."""
    truth = np.asarray(truth, dtype=float)
    inside = (np.asarray(lower) <= truth) & (truth <= np.asarray(upper))
    return float(inside.mean())


@dataclass
class ReplicateResult:
    config: SimConfig
    rep: int
    metrics: dict
    converged: bool
    seconds: float
    constraint_violation: float
    local_minimum: Optional[bool]
    error: Optional[str] = None
    model: object = field(default=None, repr=False)
    truth: object = field(default=None, repr=False)


def evaluate_fit(model, truth, t_grid, level=0.95):
    """rIMSE and coverage for the predictor and each true component."""
    from .inference import fitted_with_ci

    out = {}
    ci = fitted_with_ci(model, level)
    out["y"] = (rimse(ci.values, truth.predictor, t_grid), coverage(ci.ci_lower, ci.ci_upper, truth.predictor))
    labels = {t.label for t in model.terms}
    for comp, label in truth.labels.items():
        if label not in labels:
            continue
        ci = fitted_with_ci(model, level, labels=[label])
        f = truth.components[comp]
        out[comp] = (rimse(ci.values, f, t_grid), coverage(ci.ci_lower, ci.ci_upper, f))
    return out


def max_constraint_violation(model):
    from .constraints import constraint_violation

    worst = 0.0
    for t in model.terms:
        if t.constraint is not None:
            worst = max(worst, constraint_violation(t, model.theta_hat[t.coef_slice]))
    return worst


def fit_replicate(cfg: SimConfig, rep: int, fpc_random_intercept=False, keep_model=False):
    """Generate, fit and score one replicate; failures are captured, not raised."""
    from .solver import fit_model

    t0 = time.perf_counter()
    try:
        ds, truth = generate_scenario(cfg, rep)
        spec = default_model_spec(cfg.scenario, fpc_random_intercept)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = fit_model(ds, spec)
        metrics = evaluate_fit(model, truth, ds.common_grid())
        return ReplicateResult(
            cfg, rep, metrics, bool(model.converged), time.perf_counter() - t0,
            max_constraint_violation(model), model.local_minimum,
            model=model if keep_model else None, truth=truth if keep_model else None,
        )
    except (FammError, np.linalg.LinAlgError, ValueError, ArithmeticError) as e:
        return ReplicateResult(cfg, rep, {}, False, time.perf_counter() - t0, float("nan"), None,
                               error=f"{type(e).__name__}: {e}")


def _job(args):
    cfg, rep = args
    return fit_replicate(cfg, rep)


def worker_count(requested=None):
    """Requested workers, capped by the ``FAMM_THREADS`` environment variable."""
    n = requested or 1
    env = os.environ.get("FAMM_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise InvalidValue(f"FAMM_THREADS must be an integer, got {env!r}") from None
    return max(1, int(n))


def run_study(configs, workers=None):
    """Fit every replicate of every configuration.

    Returns a list of :class:`ReplicateResult` in (configuration, replicate)
    order regardless of the number of workers.
    """
    configs = list(configs)
    if not configs:
        raise InvalidValue("no configurations given")
    jobs = [(c, r) for c in configs for r in range(c.replications)]
    n = worker_count(workers)
    if n == 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_job, jobs))


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else "%.17g" % v
    return str(v)


def result_rows(results, record_timing=False):
    """Long-format rows, one per replicate and component."""
    rows = []
    for res in results:
        c = res.config
        base = [c.scenario, c.M, c.ni, c.T, float(c.snr_b), float(c.snr_eps), res.rep]
        secs = _fmt(float(res.seconds)) if record_timing else ""
        if res.error:
            rows.append(base + ["failed:" + res.error.split(":")[0], float("nan"), float("nan"), secs, False])
            continue
        for comp, (ri, cov) in res.metrics.items():
            rows.append(base + [comp, ri, cov, secs, res.converged])
    return [[_fmt(v) if not isinstance(v, str) else v for v in row] for row in rows]


def results_csv(results, record_timing=False):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    w.writerows(result_rows(results, record_timing))
    return buf.getvalue()


def config_dict(cfg):
    return asdict(cfg)
