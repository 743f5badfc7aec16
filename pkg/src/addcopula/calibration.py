"""Additive cubic-spline calibration function.

    eta(x) = alpha0 + sum_i [ sum_j alpha_j^(i) x_i^j
                              + sum_k zeta_k^(i) psi_k^(i) (x_i - gamma_k^(i))_+^3 ]

Each covariate's range is cut into ``k_max`` equal intervals and interval
``k`` holds at most one knot ``gamma_k``; ``zeta_k`` switches it on.  Inactive
knots keep their (psi, gamma) values so the parameter vector has fixed
dimension.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .copulas import Family, frank_tau, link_inverse

# Prior variance of alpha0, alpha_j and psi_k (N(0, 10) read as a variance).
PRIOR_VAR = 10.0
# Success probability of the Binomial(k_max, 0.5) prior on lambda.
LAMBDA_PROB = 0.5


@dataclass(frozen=True)
class KnotGrid:
    """Equal-length partition of one covariate's range into ``k_max`` pieces."""

    lower: float
    upper: float
    k_max: int

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be a positive integer")
        if not self.upper > self.lower:
            raise ValueError("knot grid needs upper > lower")

    @functools.cached_property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.k_max + 1)

    @functools.cached_property
    def left(self) -> np.ndarray:
        return self.edges[:-1]

    @functools.cached_property
    def right(self) -> np.ndarray:
        return self.edges[1:]

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.k_max

    def contains(self, gamma) -> np.ndarray:
        """Elementwise check that knot ``k`` lies in its own interval ``I_k``."""
        gamma = np.asarray(gamma, dtype=float)
        return (gamma >= self.left) & (gamma <= self.right)

    @classmethod
    def from_values(cls, values, k_max: int) -> "KnotGrid":
        values = np.asarray(values, dtype=float)
        return cls(float(values.min()), float(values.max()), int(k_max))


@dataclass
class SplineComponentState:
    alpha: np.ndarray
    psi: np.ndarray
    gamma: np.ndarray
    zeta: np.ndarray
    lam: int

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(3)
        self.psi = np.asarray(self.psi, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.zeta = np.asarray(self.zeta, dtype=np.int64)
        self.lam = int(self.lam)
        k = self.psi.shape[0]
        if self.gamma.shape != (k,) or self.zeta.shape != (k,):
            raise ValueError("psi, gamma and zeta must all have length k_max")
        if not np.all((self.zeta == 0) | (self.zeta == 1)):
            raise ValueError("zeta must be binary")

    @property
    def k_max(self) -> int:
        return self.psi.shape[0]

    @property
    def n_knots(self) -> int:
        return int(self.zeta.sum())

    def copy(self) -> "SplineComponentState":
        return SplineComponentState(self.alpha.copy(), self.psi.copy(),
                                    self.gamma.copy(), self.zeta.copy(),
                                    self.lam)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "psi": self.psi.tolist(),
                "gamma": self.gamma.tolist(), "zeta": self.zeta.tolist(),
                "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "SplineComponentState":
        return cls(d["alpha"], d["psi"], d["gamma"], d["zeta"], d["lambda"])

    @classmethod
    def initial(cls, grid: KnotGrid) -> "SplineComponentState":
        """Zero coefficients, no active knots, knots at interval midpoints."""
        k = grid.k_max
        return cls(np.zeros(3), np.zeros(k), grid.midpoints, np.zeros(k),
                   k // 2)


@dataclass
class CalibrationState:
    alpha0: float
    components: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.components)

    def copy(self) -> "CalibrationState":
        return CalibrationState(float(self.alpha0),
                                [c.copy() for c in self.components])

    def to_dict(self) -> dict:
        return {"alpha0": float(self.alpha0),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationState":
        return cls(float(d["alpha0"]),
                   [SplineComponentState.from_dict(c) for c in d["components"]])


def component_eta(x, comp: SplineComponentState):
    """Contribution of one covariate (without the global intercept)."""
    x = np.asarray(x, dtype=float)
    a1, a2, a3 = comp.alpha
    out = x * (a1 + x * (a2 + x * a3))
    for k in np.flatnonzero(comp.zeta):
        out = out + comp.psi[k] * np.maximum(x - comp.gamma[k], 0.0) ** 3
    return out


def evaluate_eta(x, s: CalibrationState):
    """Evaluate the calibration function at standardized covariates.

    ``x`` is a length-p vector (returns a float) or an ``(n, p)`` matrix
    (returns a length-n array).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != s.p:
        raise ValueError(
            f"covariate dimension {x2.shape[1]} does not match the {s.p} "
            "spline components")
    eta = np.full(x2.shape[0], float(s.alpha0))
    for i, comp in enumerate(s.components):
        eta += component_eta(x2[:, i], comp)
    return float(eta[0]) if single else eta


def evaluate_theta(x, s: CalibrationState, family: "Family | str"):
    """Copula parameter at a single covariate vector."""
    return link_inverse(evaluate_eta(np.asarray(x, dtype=float).reshape(-1), s),
                        family)


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationMap:
    """Affine map x' = (x - center) / half_range, one entry per covariate."""

    center: tuple
    half_range: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.center))
        h = tuple(float(v) for v in np.atleast_1d(self.half_range))
        if len(c) != len(h):
            raise ValueError("center and half_range lengths differ")
        if any(not v > 0 for v in h):
            raise ValueError("half_range must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_range", h)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - np.array(self.center)) / np.array(
            self.half_range)

    def invert(self, z):
        return np.asarray(z, dtype=float) * np.array(self.half_range) + np.array(
            self.center)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "half_range": list(self.half_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationMap":
        return cls(tuple(d["center"]), tuple(d["half_range"]))

    @classmethod
    def fit(cls, x) -> "StandardizationMap":
        """Midrange / half-range map sending each column's range onto [-1, 1]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = x.min(axis=0)
        hi = x.max(axis=0)
        if np.any(hi <= lo):
            bad = np.flatnonzero(hi <= lo).tolist()
            raise ValueError(f"cannot standardize constant covariate(s) {bad}")
        return cls(tuple(0.5 * (lo + hi)), tuple(0.5 * (hi - lo)))


def standardize(dataset):
    """Return ``(dataset', map)`` with every covariate column scaled to [-1, 1].

    ``dataset`` is any dataclass with an ``x`` matrix and a
    ``standardization`` field (see :class:`addcopula.model.Dataset`).
    """
    smap = StandardizationMap.fit(dataset.x)
    new = dataclasses.replace(dataset, x=smap.apply(dataset.x),
                              standardization=smap)
    return new, smap


# ---------------------------------------------------------------------------
# Priors on spline parameters
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _truncated_poisson_table(lam: float, k_max: int) -> tuple:
    if lam == 0:
        return (0.0,) + (-math.inf,) * k_max
    ms = np.arange(k_max + 1)
    log_terms = ms * np.log(lam) - special.gammaln(ms + 1)
    return tuple((log_terms - special.logsumexp(log_terms)).tolist())


def truncated_poisson_logpmf(m: int, lam: float, k_max: int) -> float:
    """log p(|zeta| = m | lambda), Poisson right-truncated at ``k_max``.

    Uses 0^0 = 1, so lambda = 0 puts all mass on m = 0.
    """
    if m < 0 or m > k_max:
        return -math.inf
    return _truncated_poisson_table(float(lam), int(k_max))[m]


def zeta_log_prior(zeta, lam: float) -> float:
    """log p(zeta | lambda): truncated Poisson count, uniform arrangement."""
    k_max = len(zeta)
    m = int(np.sum(zeta))
    return truncated_poisson_logpmf(m, lam, k_max) - math.log(math.comb(k_max, m))


def sample_truncated_poisson(rng: np.random.Generator, lam: float,
                             k_max: int) -> int:
    logp = np.array([truncated_poisson_logpmf(m, lam, k_max)
                     for m in range(k_max + 1)])
    return int(rng.choice(k_max + 1, p=np.exp(logp) / np.exp(logp).sum()))


def sample_component_prior(rng: np.random.Generator,
                           grid: KnotGrid) -> SplineComponentState:
    k = grid.k_max
    sd = np.sqrt(PRIOR_VAR)
    lam = int(rng.binomial(k, LAMBDA_PROB))
    m = sample_truncated_poisson(rng, lam, k)
    zeta = np.zeros(k, dtype=np.int64)
    zeta[rng.choice(k, size=m, replace=False)] = 1
    return SplineComponentState(
        alpha=rng.normal(0.0, sd, size=3),
        psi=rng.normal(0.0, sd, size=k),
        gamma=rng.uniform(grid.left, grid.right),
        zeta=zeta,
        lam=lam,
    )


def sample_calibration_prior(rng: np.random.Generator,
                             grids) -> CalibrationState:
    alpha0 = float(rng.normal(0.0, np.sqrt(PRIOR_VAR)))
    return CalibrationState(alpha0, [sample_component_prior(rng, g)
                                     for g in grids])


def tau_from_eta(eta, family: "Family | str"):
    """Kendall's tau as a function of eta, stable for any real eta."""
    family = Family.parse(family)
    eta = np.asarray(eta, dtype=float)
    if family is Family.CLAYTON:
        # theta / (theta + 2) with theta = e^eta
        return special.expit(eta - np.log(2.0))
    if family is Family.GUMBEL:
        # 1 - 1/theta with theta = 1 + e^eta
        return special.expit(eta)
    return np.vectorize(frank_tau, otypes=[float])(eta)


def sample_prior_curve(rng: np.random.Generator, grid, k_max: int,
                       family: "Family | str", support=None) -> np.ndarray:
    """One prior draw of a single-covariate calibration curve on the tau scale.

    ``support`` is the covariate range that the knot intervals partition; it
    defaults to the span of ``grid``.
    """
    grid = np.asarray(grid, dtype=float)
    lo, hi = support if support is not None else (grid.min(), grid.max())
    state = sample_calibration_prior(rng, [KnotGrid(float(lo), float(hi), k_max)])
    with np.errstate(over="ignore", invalid="ignore"):
        eta = evaluate_eta(grid[:, None], state)
    return tau_from_eta(eta, family)
