"""Data containers, likelihood and prior for the conditional copula model.

Each outcome follows a normal linear regression and the pair is coupled by a
copula whose parameter depends on covariates through the additive spline in
:mod:`addcopula.calibration`:

    f(y1, y2 | x) = prod_i phi(z_i) / sigma_i * c(Phi(z1), Phi(z2) | theta(x)),
    z_i = (y_i - x_i' beta_i) / sigma_i.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from .calibration import (
    LAMBDA_PROB,
    PRIOR_VAR,
    CalibrationState,
    KnotGrid,
    SplineComponentState,
    StandardizationMap,
    component_eta,
    zeta_log_prior,
)
from .copulas import Family, logpdf, theta_from_eta

# sigma_i^2 ~ InverseGamma(shape, rate)
SIGMA2_SHAPE = 0.1
SIGMA2_RATE = 0.1
# probability-integral transforms are kept this far from {0, 1}
PIT_EPS = 1e-12
LOG_ZERO = -np.inf

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class Dataset:
    y1: np.ndarray
    y2: np.ndarray
    x: np.ndarray
    names: tuple = ()
    standardization: StandardizationMap | None = None

    def __post_init__(self):
        self.y1 = np.asarray(self.y1, dtype=float).reshape(-1)
        self.y2 = np.asarray(self.y2, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float)
        self.x = x.reshape(-1, 1) if x.ndim == 1 else x
        n = self.y1.shape[0]
        if self.y2.shape[0] != n or self.x.shape[0] != n:
            raise ValueError("y1, y2 and x must have the same number of rows")
        if not self.names:
            self.names = tuple(f"x{j + 1}" for j in range(self.x.shape[1]))
        self.names = tuple(self.names)
        if len(self.names) != self.x.shape[1]:
            raise ValueError("one name per covariate column is required")
        for arr in (self.y1, self.y2, self.x):
            if not np.all(np.isfinite(arr)):
                raise ValueError("dataset contains missing or non-finite values")

    @property
    def n(self) -> int:
        return self.y1.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown covariate {name!r}; have {self.names}") from None

    def content_hash(self) -> str:
        """SHA-256 over the numeric content and column names."""
        h = hashlib.sha256()
        h.update(",".join(self.names).encode())
        for arr in (self.y1, self.y2, self.x):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_dataset(path, d: Dataset, meta: dict | None = None) -> None:
    """Write ``y1,y2,x1..xp`` CSV plus a JSON sidecar with metadata."""
    path = Path(path)
    table = np.column_stack([d.y1, d.y2, d.x])
    header = ",".join(("y1", "y2") + d.names)
    np.savetxt(path, table, delimiter=",", header=header, comments="",
               fmt="%.17g")
    side = {
        "columns": ["y1", "y2", *d.names],
        "n": d.n,
        "standardization": (d.standardization.to_dict()
                            if d.standardization is not None else None),
        "content_hash": d.content_hash(),
    }
    if meta:
        side["meta"] = meta
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header[:2] != ["y1", "y2"] or len(header) < 3:
        raise ValueError(f"{path}: header must start with y1,y2 followed by "
                         "at least one covariate")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    smap = None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("standardization"):
            smap = StandardizationMap.from_dict(meta["standardization"])
    return Dataset(table[:, 0], table[:, 1], table[:, 2:],
                   names=tuple(header[2:]), standardization=smap)


@dataclass
class MarginalRegressionState:
    beta: np.ndarray
    sigma: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.sigma = float(self.sigma)
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def copy(self) -> "MarginalRegressionState":
        return MarginalRegressionState(self.beta.copy(), self.sigma)


@dataclass
class ChainState:
    marginal1: MarginalRegressionState
    marginal2: MarginalRegressionState
    calibration: CalibrationState

    @property
    def marginals(self):
        return (self.marginal1, self.marginal2)

    def copy(self) -> "ChainState":
        return ChainState(self.marginal1.copy(), self.marginal2.copy(),
                          self.calibration.copy())


@dataclass(frozen=True)
class ModelSpec:
    """Which copula family and which columns enter each part of the model.

    Column indices are 0-based positions in ``Dataset.x``.  Every marginal
    design gets an intercept column in front.
    """

    family: Family
    copula_covariates: tuple
    marginal_covariates: tuple = ((), ())
    k_max: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        cc = tuple(int(c) for c in self.copula_covariates)
        if not cc:
            raise ValueError("at least one copula covariate is required")
        if len(set(cc)) != len(cc):
            raise ValueError("copula covariates must be distinct")
        object.__setattr__(self, "copula_covariates", cc)
        mc = tuple(tuple(int(c) for c in cols) for cols in self.marginal_covariates)
        if len(mc) != 2:
            raise ValueError("marginal_covariates needs one entry per outcome")
        object.__setattr__(self, "marginal_covariates", mc)
        k = self.k_max
        if isinstance(k, (int, np.integer)):
            k = (int(k),) * len(cc)
        k = tuple(int(v) for v in k) if k else (4,) * len(cc)
        if len(k) != len(cc) or any(v < 1 for v in k):
            raise ValueError("k_max needs one positive entry per copula covariate")
        object.__setattr__(self, "k_max", k)

    @property
    def p(self) -> int:
        return len(self.copula_covariates)

    def validate(self, d: Dataset) -> None:
        q = d.n_covariates
        for c in self.copula_covariates + sum(self.marginal_covariates, ()):
            if not 0 <= c < q:
                raise ValueError(f"covariate index {c} out of range for {q} columns")
        n_beta = max(len(m) + 1 for m in self.marginal_covariates)
        if d.n < n_beta + 1:
            raise ValueError("need n >= p + 1 observations")

    def to_dict(self, names=None) -> dict:
        out = {
            "family": self.family.value,
            "copula_covariates": list(self.copula_covariates),
            "marginal_covariates": [list(m) for m in self.marginal_covariates],
            "k_max": list(self.k_max),
        }
        if names is not None:
            out["copula_covariate_names"] = [names[c] for c in self.copula_covariates]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], tuple(d["copula_covariates"]),
                   tuple(tuple(m) for m in d["marginal_covariates"]),
                   tuple(d["k_max"]))


def design_matrix(d: Dataset, cols) -> np.ndarray:
    return np.column_stack([np.ones(d.n), d.x[:, list(cols)]])


def knot_grids(d: Dataset, spec: ModelSpec) -> list:
    return [KnotGrid.from_values(d.x[:, c], k)
            for c, k in zip(spec.copula_covariates, spec.k_max)]


def normal_logpdf(x, var):
    return -0.5 * (_LOG_2PI + np.log(var) + np.square(x) / var)


def inverse_gamma_logpdf(x, shape, rate):
    return (shape * np.log(rate) - special.gammaln(shape)
            - (shape + 1.0) * np.log(x) - rate / x)


def pit(z):
    """Standard normal CDF of residuals, kept inside (0, 1) for the copula."""
    return np.clip(special.ndtr(z), PIT_EPS, 1.0 - PIT_EPS)


class Model:
    """A dataset bound to a :class:`ModelSpec`, with cached design matrices."""

    def __init__(self, dataset: Dataset, spec: ModelSpec):
        spec.validate(dataset)
        self.dataset = dataset
        self.spec = spec
        self.family = spec.family
        self.y = (dataset.y1, dataset.y2)
        self.designs = tuple(design_matrix(dataset, cols)
                             for cols in spec.marginal_covariates)
        self.xc = dataset.x[:, list(spec.copula_covariates)]
        self.grids = knot_grids(dataset, spec)

    @property
    def n(self) -> int:
        return self.dataset.n

    def residuals(self, state: ChainState):
        return tuple((y - X @ m.beta) / m.sigma
                     for y, X, m in zip(self.y, self.designs, state.marginals))

    def eta(self, cal: CalibrationState) -> np.ndarray:
        eta = np.full(self.n, float(cal.alpha0))
        for i, comp in enumerate(cal.components):
            eta += component_eta(self.xc[:, i], comp)
        return eta

    def pointwise_marginal(self, state: ChainState) -> np.ndarray:
        out = np.zeros(self.n)
        for z, m in zip(self.residuals(state), state.marginals):
            out += -0.5 * (_LOG_2PI + z * z) - np.log(m.sigma)
        return out

    def pointwise_copula(self, state: ChainState) -> np.ndarray:
        z1, z2 = self.residuals(state)
        theta = theta_from_eta(self.eta(state.calibration), self.family)
        return logpdf(pit(z1), pit(z2), theta, self.family)

    def pointwise_loglik(self, state: ChainState) -> np.ndarray:
        """log f(y1_j, y2_j | x_j, omega) for every observation j."""
        return self.pointwise_marginal(state) + self.pointwise_copula(state)

    def marginal_loglik(self, state: ChainState) -> float:
        return float(self.pointwise_marginal(state).sum())

    def copula_loglik(self, state: ChainState) -> float:
        return float(self.pointwise_copula(state).sum())

    def joint_loglik(self, state: ChainState) -> float:
        return self.marginal_loglik(state) + self.copula_loglik(state)

    def log_prior(self, state: ChainState) -> float:
        return log_prior(state, self.spec, self.grids)

    def log_posterior(self, state: ChainState) -> float:
        lp = self.log_prior(state)
        if lp == LOG_ZERO:
            return LOG_ZERO
        return lp + self.joint_loglik(state)

    def initial_state(self, rng: np.random.Generator) -> ChainState:
        """Exact draw of (beta, sigma) from the no-copula posterior; spline at rest."""
        margs = []
        for y, X in zip(self.y, self.designs):
            a_inv = np.linalg.inv(np.eye(X.shape[1]) + X.T @ X)
            mu = a_inv @ X.T @ y
            shape = SIGMA2_SHAPE + 0.5 * len(y)
            rate = SIGMA2_RATE + 0.5 * float(y @ y - y @ X @ mu)
            sigma2 = rate / rng.gamma(shape)
            beta = rng.multivariate_normal(mu, sigma2 * a_inv)
            margs.append(MarginalRegressionState(beta, np.sqrt(sigma2)))
        cal = CalibrationState(0.0, [SplineComponentState.initial(g)
                                     for g in self.grids])
        return ChainState(margs[0], margs[1], cal)


def component_log_prior(comp: SplineComponentState, grid: KnotGrid) -> float:
    """Prior of one spline component (alpha, psi, gamma, zeta, lambda)."""
    if not np.all(grid.contains(comp.gamma)):
        return LOG_ZERO
    if not 0 <= comp.lam <= comp.k_max:
        return LOG_ZERO
    lp = float(np.sum(normal_logpdf(comp.alpha, PRIOR_VAR)))
    lp += float(np.sum(normal_logpdf(comp.psi, PRIOR_VAR)))
    lp -= comp.k_max * np.log(grid.width)
    lp += float(stats.binom.logpmf(comp.lam, comp.k_max, LAMBDA_PROB))
    return lp + zeta_log_prior(comp.zeta, comp.lam)


def log_prior(state: ChainState, spec: ModelSpec, grids) -> float:
    """Joint log prior density; ``LOG_ZERO`` outside the support.

    The sigma_i^2 term is a density with respect to sigma_i^2.
    """
    lp = 0.0
    for m in state.marginals:
        s2 = m.sigma ** 2
        lp += float(np.sum(normal_logpdf(m.beta, s2)))
        lp += float(inverse_gamma_logpdf(s2, SIGMA2_SHAPE, SIGMA2_RATE))
    cal = state.calibration
    if cal.p != spec.p:
        raise ValueError("calibration state does not match the model spec")
    lp += float(normal_logpdf(cal.alpha0, PRIOR_VAR))
    for comp, grid in zip(cal.components, grids):
        c = component_log_prior(comp, grid)
        if c == LOG_ZERO:
            return LOG_ZERO
        lp += c
    return lp


def marginal_loglik(d: Dataset, s: ChainState, spec: ModelSpec) -> float:
    return Model(d, spec).marginal_loglik(s)


def copula_loglik(d: Dataset, s: ChainState, spec: ModelSpec) -> float:
    return Model(d, spec).copula_loglik(s)


def joint_loglik(d: Dataset, s: ChainState, spec: ModelSpec) -> float:
    return Model(d, spec).joint_loglik(s)


# ---------------------------------------------------------------------------
# Flat parameter layout (trace columns)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParameterLayout:
    """Column order: beta1*, beta2*, sigma1, sigma2, alpha0, then per copula
    covariate alpha1..3, psi1..K, gamma1..K, zeta1..K, lambda."""

    n_beta: tuple
    k_max: tuple
    cov_names: tuple
    names: tuple = field(init=False)

    def __post_init__(self):
        names = [f"beta1_{j}" for j in range(self.n_beta[0])]
        names += [f"beta2_{j}" for j in range(self.n_beta[1])]
        names += ["sigma1", "sigma2", "alpha0"]
        for nm, k in zip(self.cov_names, self.k_max):
            names += [f"{nm}_alpha{j}" for j in (1, 2, 3)]
            for part in ("psi", "gamma", "zeta"):
                names += [f"{nm}_{part}{j}" for j in range(1, k + 1)]
            names.append(f"{nm}_lambda")
        object.__setattr__(self, "names", tuple(names))

    @classmethod
    def for_model(cls, model: Model) -> "ParameterLayout":
        return cls(tuple(X.shape[1] for X in model.designs), model.spec.k_max,
                   tuple(model.dataset.names[c]
                         for c in model.spec.copula_covariates))

    @property
    def size(self) -> int:
        return len(self.names)

    def pack(self, s: ChainState, out=None) -> np.ndarray:
        v = np.empty(self.size) if out is None else out
        i = 0
        for m in s.marginals:
            v[i:i + m.beta.size] = m.beta
            i += m.beta.size
        v[i] = s.marginal1.sigma
        v[i + 1] = s.marginal2.sigma
        v[i + 2] = s.calibration.alpha0
        i += 3
        for comp in s.calibration.components:
            k = comp.k_max
            v[i:i + 3] = comp.alpha
            v[i + 3:i + 3 + k] = comp.psi
            v[i + 3 + k:i + 3 + 2 * k] = comp.gamma
            v[i + 3 + 2 * k:i + 3 + 3 * k] = comp.zeta
            v[i + 3 + 3 * k] = comp.lam
            i += 4 + 3 * k
        return v

    def unpack(self, v) -> ChainState:
        v = np.asarray(v, dtype=float)
        i = 0
        betas = []
        for nb in self.n_beta:
            betas.append(v[i:i + nb].copy())
            i += nb
        m1 = MarginalRegressionState(betas[0], v[i])
        m2 = MarginalRegressionState(betas[1], v[i + 1])
        alpha0 = float(v[i + 2])
        i += 3
        comps = []
        for k in self.k_max:
            comps.append(SplineComponentState(
                v[i:i + 3].copy(), v[i + 3:i + 3 + k].copy(),
                v[i + 3 + k:i + 3 + 2 * k].copy(),
                np.rint(v[i + 3 + 2 * k:i + 3 + 3 * k]).astype(np.int64),
                int(round(v[i + 3 + 3 * k]))))
            i += 4 + 3 * k
        return ChainState(m1, m2, CalibrationState(alpha0, comps))
