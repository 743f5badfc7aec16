"""Simulation scenarios and the three desk-scale studies.

Scenario S1 has one covariate with ``eta(x) = log(4.5 - 1.5 sin(pi x))``;
S2 has two with ``eta(x1, x2) = log(4.5 - sin x1 - sin x2)``.  Covariates are
Uniform[0, 1], data come from a Clayton copula with normal linear margins,
and every fit standardizes covariates to [-1, 1] first.

Seeds: replicate ``r`` of a study with root seed ``s`` generates its data
from ``derive_seed(s, r)`` and runs fit number ``k`` with
``derive_seed(s, r, k + 1)``.  Results therefore do not depend on how many
worker processes are used.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .calibration import evaluate_eta, standardize, tau_from_eta
from .copulas import Family, sample, theta_from_eta
from .cvml import cvml_estimate
from .mcmc import ProposalConfig, run_chain
from .model import Dataset, Model, ModelSpec

SCENARIOS = ("s1", "s2")
SCALES = ("theta", "eta", "tau")
GRID_SIZE = 400


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic 63-bit child seed for ``(root, *keys)``."""
    ss = np.random.SeedSequence([int(root), *map(int, keys)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def true_calibration(scenario: str, x):
    """True eta; ``x`` has shape (n,) for S1 or (n, 2) for S2."""
    x = np.asarray(x, dtype=float)
    if scenario == "s1":
        x = x.reshape(-1) if x.ndim > 1 else x
        return np.log(4.5 - 1.5 * np.sin(np.pi * x))
    if scenario == "s2":
        x = np.atleast_2d(x)
        return np.log(4.5 - np.sin(x[:, 0]) - np.sin(x[:, 1]))
    raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating settings.

    ``beta`` defaults to intercept 0.5 and slope 1 on every true covariate;
    ``sigma`` to 1 for both outcomes.  ``extra_covariates`` appends
    independent Uniform[0, 1] columns that play no role in the truth.
    """

    id: str = "s1"
    n: int = 450
    seed: int = 0
    beta: tuple | None = None
    sigma: tuple = (1.0, 1.0)
    extra_covariates: int = 0

    def __post_init__(self):
        sid = str(self.id).lower()
        if sid not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.id!r}; expected one of {SCENARIOS}")
        object.__setattr__(self, "id", sid)
        if self.n < 3:
            raise ValueError("n must be at least 3")

    @property
    def n_true(self) -> int:
        return 1 if self.id == "s1" else 2

    @property
    def betas(self) -> tuple:
        if self.beta is not None:
            return tuple(tuple(float(v) for v in b) for b in self.beta)
        b = (0.5,) + (1.0,) * self.n_true
        return (b, b)

    def to_dict(self) -> dict:
        return {"id": self.id, "n": self.n, "seed": self.seed,
                "beta": [list(b) for b in self.betas], "sigma": list(self.sigma),
                "extra_covariates": self.extra_covariates}


def generate(scenario: ScenarioSpec, x=None) -> Dataset:
    """Simulate one dataset on the raw (unstandardized) covariate scale.

    ``x`` optionally fixes the true covariates (shape ``(n, d)``) instead of
    drawing them uniformly.
    """
    data_ss, extra_ss = np.random.SeedSequence(int(scenario.seed)).spawn(2)
    rng = np.random.default_rng(data_ss)
    n = scenario.n
    u01 = rng.uniform(size=(n, scenario.n_true))
    if x is None:
        x = u01
    else:
        x = np.asarray(x, dtype=float).reshape(n, scenario.n_true)
    theta = np.exp(true_calibration(scenario.id, x))
    u, v = sample(n, theta, Family.CLAYTON, rng)
    ys = []
    for b, s, w in zip(scenario.betas, scenario.sigma, (u, v)):
        b = np.asarray(b)
        ys.append(b[0] + x @ b[1:] + s * special.ndtri(w))
    if scenario.extra_covariates:
        extra = np.random.default_rng(extra_ss).uniform(
            size=(n, scenario.extra_covariates))
        x = np.column_stack([x, extra])
    return Dataset(ys[0], ys[1], x)


def eval_grid(scenario: str, size: int = GRID_SIZE) -> np.ndarray:
    """Equidistant grid over the raw covariate domain [0, 1]^d, shape (G, d)."""
    if scenario == "s1":
        return np.linspace(0.0, 1.0, size)[:, None]
    side = int(round(math.sqrt(size)))
    if side * side != size:
        raise ValueError("S2 grid size must be a perfect square")
    g = np.linspace(0.0, 1.0, side)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([a.ravel(), b.ravel()])


def to_scale(eta, family, scale: str):
    if scale == "eta":
        return np.asarray(eta, dtype=float)
    if scale == "theta":
        return theta_from_eta(eta, Family.parse(family))
    if scale == "tau":
        return tau_from_eta(eta, family)
    raise ValueError(f"scale must be one of {SCALES}")


def posterior_eta(trace, x_std) -> np.ndarray:
    """Calibration draws on standardized points: an ``(M, G)`` array."""
    x_std = np.atleast_2d(np.asarray(x_std, dtype=float))
    out = np.empty((len(trace), x_std.shape[0]))
    for m, state in enumerate(trace.states()):
        out[m] = evaluate_eta(x_std, state.calibration)
    return out


def posterior_mean_curve(trace, x_std, family, scale: str = "theta") -> np.ndarray:
    """Pointwise posterior mean on the chosen scale (mean of transformed draws)."""
    return to_scale(posterior_eta(trace, x_std), family, scale).mean(axis=0)


SLICE_VALUES = (-0.75, -0.25, 0.25, 0.75)


def slice_grids(p: int, points: int = 101, fixed=SLICE_VALUES):
    """Standardized evaluation slices for plotting a p-covariate surface.

    Yields ``(i, value, x)``: covariate ``i`` runs over ``points`` values in
    [-1, 1] while every other covariate is held at ``value``.  With a single
    covariate there is one slice and ``value`` is NaN.
    """
    t = np.linspace(-1.0, 1.0, points)
    if p == 1:
        yield 0, float("nan"), t[:, None]
        return
    for i in range(p):
        for v in fixed:
            x = np.full((points, p), float(v))
            x[:, i] = t
            yield i, float(v), x


def credible_band(eta_draws, family, level: float = 0.95, scale: str = "theta"):
    """Pointwise posterior mean and equal-tailed band from ``(M, G)`` eta draws."""
    vals = to_scale(eta_draws, family, scale)
    a = 0.5 * (1.0 - level)
    lo, hi = np.quantile(vals, [a, 1.0 - a], axis=0)
    return vals.mean(axis=0), lo, hi


@dataclass
class ErrorReport:
    ibias2: float
    ivar: float
    imse: float
    grid_size: int
    replicate_count: int
    scale: str = "theta"

    def to_dict(self) -> dict:
        return {"ibias2": self.ibias2, "ivar": self.ivar, "imse": self.imse,
                "grid_size": self.grid_size,
                "replicate_count": self.replicate_count, "scale": self.scale}


def error_metrics(estimates, truth, scale: str = "theta") -> ErrorReport:
    """Integrated squared bias, variance and MSE over a grid.

    ``estimates`` is ``(R, G)``: one estimated curve per replicate.  The
    across-replicate variance uses the 1/R convention, which makes
    ``imse == ibias2 + ivar`` an exact identity.
    """
    est = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.ndim != 2 or est.shape[0] < 2:
        raise ValueError("need estimates from at least two replicates")
    if truth.shape != (est.shape[1],):
        raise ValueError("truth and estimate grids do not match")
    mean = est.mean(axis=0)
    ibias2 = float(np.mean((mean - truth) ** 2))
    ivar = float(np.mean(np.mean((est - mean) ** 2, axis=0)))
    return ErrorReport(ibias2, ivar, ibias2 + ivar, est.shape[1], est.shape[0], scale)


# ---------------------------------------------------------------------------
# Fitting helpers
# ---------------------------------------------------------------------------

@dataclass
class Fit:
    trace: object
    model: Model
    raw: Dataset

    @property
    def standardization(self):
        return self.model.dataset.standardization


def fit(raw: Dataset, family, copula_covariates, marginal_covariates=None,
        k_max=4, cfg: ProposalConfig | None = None, seed: int = 0,
        standardize_covariates: bool = True) -> Fit:
    """Standardize (unless already done), fit one chain, return trace + model."""
    data = raw
    if standardize_covariates and raw.standardization is None:
        data, _ = standardize(raw)
    if marginal_covariates is None:
        marginal_covariates = tuple(range(raw.n_covariates))
    spec = ModelSpec(family, tuple(copula_covariates),
                     (tuple(marginal_covariates), tuple(marginal_covariates)),
                     k_max)
    model = Model(data, spec)
    trace = run_chain(model, cfg, seed=seed)
    trace.dataset_hash = raw.content_hash()
    return Fit(trace, model, raw)


def _map(fn, items, jobs: int):
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

@dataclass
class StudySettings:
    n: int = 450
    k_max: int = 4
    root_seed: int = 0
    cfg: ProposalConfig = field(default_factory=ProposalConfig)
    jobs: int = 1


def _imse_replicate(args):
    scenario, rep, st, scale = args
    sc = ScenarioSpec(scenario, n=st.n, seed=derive_seed(st.root_seed, rep))
    raw = generate(sc)
    f = fit(raw, Family.CLAYTON, range(sc.n_true), k_max=st.k_max, cfg=st.cfg,
            seed=derive_seed(st.root_seed, rep, 1))
    grid = eval_grid(scenario)
    x_std = f.standardization.apply(grid)
    est = posterior_mean_curve(f.trace, x_std, Family.CLAYTON, scale)
    return est, f.trace.acceptance_rates()


def imse_study(scenario: str, replicates: int, settings: StudySettings | None = None,
               scale: str = "theta"):
    """Estimate the calibration in each replicate and summarise the errors.

    Returns ``(ErrorReport, estimates, truth, acceptance_rates)``.
    """
    st = settings or StudySettings()
    out = _map(_imse_replicate,
               [(scenario, r, st, scale) for r in range(replicates)], st.jobs)
    estimates = np.array([o[0] for o in out])
    truth = to_scale(true_calibration(scenario, eval_grid(scenario)),
                     Family.CLAYTON, scale)
    return (error_metrics(estimates, truth, scale), estimates, truth,
            [o[1] for o in out])


FAMILIES = (Family.CLAYTON, Family.FRANK, Family.GUMBEL)


def _copula_replicate(args):
    scenario, rep, st = args
    sc = ScenarioSpec(scenario, n=st.n, seed=derive_seed(st.root_seed, rep))
    raw = generate(sc)
    row = {"scenario": scenario, "replicate": rep}
    for k, fam in enumerate(FAMILIES):
        f = fit(raw, fam, range(sc.n_true), k_max=st.k_max, cfg=st.cfg,
                seed=derive_seed(st.root_seed, rep, k + 1))
        row[f"cvml_{fam.value}"] = cvml_estimate(f.trace, f.model).total
    row["correct_vs_frank"] = int(row["cvml_clayton"] > row["cvml_frank"])
    row["correct_vs_gumbel"] = int(row["cvml_clayton"] > row["cvml_gumbel"])
    return row


def copula_selection_study(scenario: str, replicates: int,
                           settings: StudySettings | None = None):
    """Fit Clayton, Frank and Gumbel to Clayton data; returns ``(rows, percent)``.

    ``percent`` maps each alternative family to the percentage of replicates
    in which Clayton had the larger CVML.
    """
    st = settings or StudySettings()
    rows = _map(_copula_replicate,
                [(scenario, r, st) for r in range(replicates)], st.jobs)
    pct = {"frank": 100.0 * float(np.mean([r["correct_vs_frank"] for r in rows])),
           "gumbel": 100.0 * float(np.mean([r["correct_vs_gumbel"] for r in rows]))}
    return rows, pct


VARIABLE_MODELS = {"m1": (0,), "m2": (0, 1), "m3": (0, 1, 2)}


def _variable_replicate(args):
    rep, st = args
    sc = ScenarioSpec("s2", n=st.n, seed=derive_seed(st.root_seed, rep),
                      extra_covariates=1)
    raw = generate(sc)
    row = {"replicate": rep}
    for k, (name, cols) in enumerate(VARIABLE_MODELS.items()):
        # a candidate model uses its covariate subset in the margins and the copula
        f = fit(raw, Family.CLAYTON, cols, marginal_covariates=cols,
                k_max=st.k_max, cfg=st.cfg,
                seed=derive_seed(st.root_seed, rep, k + 1))
        row[f"cvml_{name}"] = cvml_estimate(f.trace, f.model).total
    row["d21"] = row["cvml_m2"] - row["cvml_m1"]
    row["d23"] = row["cvml_m2"] - row["cvml_m3"]
    return row


def variable_selection_study(replicates: int, settings: StudySettings | None = None):
    """CVML of M1 = {x1}, M2 = {x1, x2}, M3 = {x1, x2, noise} on S2 data.

Each candidate uses its covariates in both marginal regressions and in the
calibration function.

    Returns per-replicate rows with ``d21 = CVML(M2) - CVML(M1)`` and
    ``d23 = CVML(M2) - CVML(M3)``.
    """
    st = settings or StudySettings()
    return _map(_variable_replicate, [(r, st) for r in range(replicates)], st.jobs)
