"""Bivariate Clayton, Frank and Gumbel copulas.

Two layers live here.  The checked API (`cdf`, `log_density`, `h_function`,
`inverse_h`, `theta_to_tau`, `tau_to_theta`, `link`, `link_inverse`) takes a
validated :class:`CopulaParameter`.  The array kernels (`logpdf`,
`theta_from_eta`, ...) take raw ``theta`` arrays that may vary per
observation; the sampler calls those directly and skips validation.

Notation: ``h(v | u) = dC(u, v)/du`` is the conditional CDF of ``V`` given
``U = u``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

__all__ = [
    "Family",
    "CopulaParameter",
    "CopulaDomainError",
    "ConvergenceError",
    "cdf",
    "log_density",
    "h_function",
    "inverse_h",
    "sample",
    "theta_to_tau",
    "tau_to_theta",
    "link",
    "link_inverse",
    "logpdf",
    "theta_from_eta",
    "frank_tau",
]

# Frank below this |theta| is evaluated through its first-order expansion.
_FRANK_SMALL = 1e-6
# Clayton/Gumbel links are exponential; eta is clipped here in the hot path so
# theta stays finite (theta <= e^30 ~ 1e13).
_ETA_CLIP = 30.0


class CopulaDomainError(ValueError):
    """Parameter or argument outside a copula's domain."""


class ConvergenceError(RuntimeError):
    """A root finder failed to converge."""


class Family(str, enum.Enum):
    CLAYTON = "clayton"
    FRANK = "frank"
    GUMBEL = "gumbel"

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ValueError(
                f"unknown copula family {name!r}; expected one of "
                f"{[f.value for f in cls]}"
            ) from None


@dataclass(frozen=True)
class CopulaParameter:
    family: Family
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        theta = float(self.theta)
        object.__setattr__(self, "theta", theta)
        if not np.isfinite(theta):
            raise CopulaDomainError(f"theta must be finite, got {theta}")
        if self.family is Family.CLAYTON and not theta > 0:
            raise CopulaDomainError(f"Clayton requires theta > 0, got {theta}")
        if self.family is Family.FRANK and theta == 0:
            raise CopulaDomainError("Frank requires theta != 0")
        if self.family is Family.GUMBEL and not theta >= 1:
            raise CopulaDomainError(f"Gumbel requires theta >= 1, got {theta}")


# ---------------------------------------------------------------------------
# Array kernels (theta may be an array broadcasting against u and v)
# ---------------------------------------------------------------------------

def _clayton_log_gen(u, v, theta):
    """log(u^-theta + v^-theta - 1), stable for tiny and huge theta."""
    a = -theta * np.log(u)
    b = -theta * np.log(v)
    m = np.maximum(a, b)
    d = np.abs(a - b)
    return m + np.log1p(np.expm1(-d) - np.expm1(-m))


def _clayton_logpdf(u, v, theta):
    lg = _clayton_log_gen(u, v, theta)
    return (np.log1p(theta) - (1.0 + theta) * (np.log(u) + np.log(v))
            - (2.0 + 1.0 / theta) * lg)


def _clayton_cdf(u, v, theta):
    return np.exp(-_clayton_log_gen(u, v, theta) / theta)


def _clayton_h(v, u, theta):
    lg = _clayton_log_gen(u, v, theta)
    return np.exp(-(1.0 + theta) * np.log(u) - (1.0 + 1.0 / theta) * lg)


def _frank_log_bracket(u, v, t):
    # D = e^{-tu} + e^{-tv} - e^{-t(u+v)} - e^{-t} = e^{-t min(u,v)} * bracket
    lo = np.minimum(u, v)
    hi = np.maximum(u, v)
    bracket = (np.expm1(-t * (hi - lo)) - np.expm1(-t * hi)
               - np.expm1(-t * (1.0 - lo)))
    return np.log(bracket)


def _frank_pos_logpdf(u, v, t):
    return (np.log(t) + np.log(-np.expm1(-t)) - t * np.abs(u - v)
            - 2.0 * _frank_log_bracket(u, v, t))


def _frank_pos_h(v, u, t):
    lo = np.minimum(u, v)
    return np.exp(-t * u + np.log(-np.expm1(-t * v)) + t * lo
                  - _frank_log_bracket(u, v, t))


def _frank_pos_cdf(u, v, t):
    return -np.log1p(np.expm1(-t * u) * np.expm1(-t * v) / np.expm1(-t)) / t


def _frank_logpdf(u, v, theta):
    u, v, theta = np.broadcast_arrays(u, v, theta)
    t = np.abs(theta)
    small = t < _FRANK_SMALL
    # negative theta: c_{-t}(u, v) = c_t(u, 1 - v)
    vv = np.where(theta < 0, 1.0 - v, v)
    with np.errstate(divide="ignore", invalid="ignore"):
        big = _frank_pos_logpdf(u, vv, np.where(small, 1.0, t))
    return np.where(small, theta * (1.0 - 2.0 * u) * (1.0 - 2.0 * v), big)


def _frank_cdf(u, v, theta):
    u, v, theta = np.broadcast_arrays(u, v, theta)
    t = np.abs(theta)
    small = t < _FRANK_SMALL
    ts = np.where(small, 1.0, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = _frank_pos_cdf(u, v, ts)
        # C_{-t}(u, v) = u - C_t(u, 1 - v)
        neg = u - _frank_pos_cdf(u, 1.0 - v, ts)
    big = np.where(theta < 0, neg, pos)
    lin = u * v * (1.0 + theta * (1.0 - u) * (1.0 - v))
    return np.where(small, lin, big)


def _frank_h(v, u, theta):
    u, v, theta = np.broadcast_arrays(u, v, theta)
    t = np.abs(theta)
    small = t < _FRANK_SMALL
    ts = np.where(small, 1.0, t)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = _frank_pos_h(v, u, ts)
        neg = 1.0 - _frank_pos_h(1.0 - v, u, ts)
    big = np.where(theta < 0, neg, pos)
    lin = v * (1.0 + theta * (1.0 - 2.0 * u) * (1.0 - v))
    return np.where(small, lin, big)


def _gumbel_parts(u, v, theta):
    x = -np.log(u)
    y = -np.log(v)
    lx = np.log(x)
    ly = np.log(y)
    ls = np.logaddexp(theta * lx, theta * ly)  # log(x^t + y^t)
    a = np.exp(ls / theta)
    return x, y, lx, ly, ls, a


def _gumbel_logpdf(u, v, theta):
    x, y, lx, ly, ls, a = _gumbel_parts(u, v, theta)
    return (-a + (theta - 1.0) * (lx + ly) + x + y
            + (2.0 / theta - 2.0) * ls + np.log1p((theta - 1.0) / a))


def _gumbel_cdf(u, v, theta):
    return np.exp(-_gumbel_parts(u, v, theta)[5])


def _gumbel_h(v, u, theta):
    x, _, lx, _, ls, a = _gumbel_parts(u, v, theta)
    return np.exp(-a + (1.0 / theta - 1.0) * ls + (theta - 1.0) * lx + x)


_LOGPDF = {Family.CLAYTON: _clayton_logpdf, Family.FRANK: _frank_logpdf,
           Family.GUMBEL: _gumbel_logpdf}
_CDF = {Family.CLAYTON: _clayton_cdf, Family.FRANK: _frank_cdf,
        Family.GUMBEL: _gumbel_cdf}
_H = {Family.CLAYTON: _clayton_h, Family.FRANK: _frank_h,
      Family.GUMBEL: _gumbel_h}


def logpdf(u, v, theta, family: Family):
    """Log copula density on interior points; no validation.

    Non-finite results (e.g. from a wildly out-of-range theta) come back as
    ``-inf`` so a Metropolis step rejects them.
    """
    with np.errstate(over="ignore", under="ignore", invalid="ignore",
                     divide="ignore"):
        out = _LOGPDF[family](u, v, theta)
    return np.where(np.isnan(out), -np.inf, out)


def theta_from_eta(eta, family: Family):
    """Vectorised inverse link used by the sampler (eta clipped for safety)."""
    eta = np.asarray(eta, dtype=float)
    if family is Family.FRANK:
        return eta
    e = np.exp(np.clip(eta, -_ETA_CLIP, _ETA_CLIP))
    return e if family is Family.CLAYTON else 1.0 + e


# ---------------------------------------------------------------------------
# Checked API
# ---------------------------------------------------------------------------

def _unit(a, name, open_=False):
    a = np.asarray(a, dtype=float)
    if open_:
        bad = ~((a > 0.0) & (a < 1.0))
        what = "the open interval (0, 1)"
    else:
        bad = ~((a >= 0.0) & (a <= 1.0))
        what = "[0, 1]"
    if np.any(bad):
        raise CopulaDomainError(f"{name} must lie in {what}")
    return a


def _scalar_out(x):
    return float(x) if np.ndim(x) == 0 else x


def cdf(u, v, p: CopulaParameter):
    """Copula distribution function C(u, v)."""
    u = _unit(u, "u")
    v = _unit(v, "v")
    u, v = np.broadcast_arrays(u, v)
    inner = (u > 0) & (u < 1) & (v > 0) & (v < 1)
    ui = np.where(inner, u, 0.5)
    vi = np.where(inner, v, 0.5)
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        val = _CDF[p.family](ui, vi, p.theta)
    # Frechet boundary conditions: C(u, 0) = 0, C(u, 1) = u, C(1, v) = v
    edge = np.where((u == 0) | (v == 0), 0.0, np.where(u == 1, v, u))
    return _scalar_out(np.where(inner, np.clip(val, 0.0, 1.0), edge))


def log_density(u, v, p: CopulaParameter):
    """Log of the copula density c(u, v) = d^2 C / du dv on (0, 1)^2."""
    u = _unit(u, "u", open_=True)
    v = _unit(v, "v", open_=True)
    return _scalar_out(logpdf(u, v, p.theta, p.family))


def h_function(v, given_u, p: CopulaParameter):
    """Conditional CDF P(V <= v | U = u)."""
    u = _unit(given_u, "given_u", open_=True)
    v = _unit(v, "v")
    u, v = np.broadcast_arrays(u, v)
    vi = np.clip(v, 1e-300, 1.0 - 1e-16)
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        val = _H[p.family](vi, u, p.theta)
    val = np.where(v == 0, 0.0, np.where(v == 1, 1.0, np.clip(val, 0.0, 1.0)))
    return _scalar_out(val)


def _h_array(v, u, theta, family):
    with np.errstate(over="ignore", under="ignore", divide="ignore",
                     invalid="ignore"):
        return np.clip(_H[family](v, u, theta), 0.0, 1.0)


def _inverse_h_array(q, u, theta, family, tol=1e-10, max_iter=200):
    q, u, theta = np.broadcast_arrays(np.asarray(q, float),
                                      np.asarray(u, float),
                                      np.asarray(theta, float))
    lo = np.zeros(q.shape)
    hi = np.ones(q.shape)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        hv = _h_array(np.clip(mid, 1e-300, 1.0), u, theta, family)
        if np.any(np.isnan(hv)):
            raise ConvergenceError("h-function returned NaN during inversion")
        below = hv < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < 1e-13):
            break
    else:
        v = 0.5 * (lo + hi)
        resid = np.abs(_h_array(v, u, theta, family) - q)
        if np.any((resid > tol) & (hi - lo > 1e-13)):
            raise ConvergenceError(
                f"bisection did not converge in {max_iter} iterations")
    return 0.5 * (lo + hi)


def inverse_h(q, given_u, p: CopulaParameter, tol: float = 1e-10,
              max_iter: int = 200):
    """Solve ``h_function(v, u) = q`` for ``v`` by bracketed bisection."""
    q = _unit(q, "q", open_=True)
    u = _unit(given_u, "given_u", open_=True)
    return _scalar_out(_inverse_h_array(q, u, p.theta, p.family, tol, max_iter))


def sample(n: int, theta, family: Family, rng: np.random.Generator):
    """Draw ``n`` pairs (u, v); ``theta`` may be a scalar or length-n array.

    Uses the conditional method: U, Q iid uniform, V = h^{-1}(Q | U).
    """
    family = Family.parse(family)
    u = rng.uniform(size=n)
    q = rng.uniform(size=n)
    # keep away from the endpoints where h is degenerate
    u = np.clip(u, 1e-15, 1.0 - 1e-15)
    q = np.clip(q, 1e-15, 1.0 - 1e-15)
    v = _inverse_h_array(q, u, theta, family)
    return u, np.clip(v, 1e-15, 1.0 - 1e-15)


# ---------------------------------------------------------------------------
# Kendall's tau and links
# ---------------------------------------------------------------------------

def _debye1(t: float) -> float:
    """First Debye function D1(t) = (1/t) int_0^t s/(e^s - 1) ds for t > 0."""
    if t > 60.0:
        # tail beyond 60 is below 1e-24
        return (np.pi ** 2 / 6.0) / t
    val, _ = integrate.quad(lambda s: s / np.expm1(s) if s > 0 else 1.0,
                            0.0, t, epsabs=1e-10, epsrel=1e-12, limit=200)
    return val / t


def frank_tau(theta: float) -> float:
    """Kendall's tau of the Frank copula (odd in theta)."""
    t = abs(float(theta))
    if t < _FRANK_SMALL:
        return theta / 9.0
    tau = 1.0 - 4.0 / t * (1.0 - _debye1(t))
    return tau if theta > 0 else -tau


def theta_to_tau(p: CopulaParameter) -> float:
    if p.family is Family.CLAYTON:
        return p.theta / (p.theta + 2.0)
    if p.family is Family.GUMBEL:
        return 1.0 - 1.0 / p.theta
    return frank_tau(p.theta)


_FRANK_BRACKET = (1e-6, 100.0)


def tau_to_theta(tau: float, family: "Family | str") -> CopulaParameter:
    family = Family.parse(family)
    tau = float(tau)
    if not -1.0 < tau < 1.0:
        raise CopulaDomainError(f"Kendall's tau must lie in (-1, 1), got {tau}")
    if family is Family.CLAYTON:
        if tau <= 0:
            raise CopulaDomainError("Clayton only reaches tau in (0, 1)")
        return CopulaParameter(family, 2.0 * tau / (1.0 - tau))
    if family is Family.GUMBEL:
        if tau < 0:
            raise CopulaDomainError("Gumbel only reaches tau in [0, 1)")
        return CopulaParameter(family, 1.0 / (1.0 - tau))
    lo, hi = _FRANK_BRACKET
    target = abs(tau)
    if target < frank_tau(lo):
        raise CopulaDomainError(
            "tau too close to 0: Frank theta would fall below 1e-6 "
            "(independence limit is not a Frank parameter)")
    if target > frank_tau(hi):
        raise CopulaDomainError(f"tau {tau} beyond the Frank search range")
    theta = optimize.brentq(lambda t: frank_tau(t) - target, lo, hi,
                            xtol=1e-14, rtol=1e-14, maxiter=200)
    return CopulaParameter(family, theta if tau > 0 else -theta)


def link(p: CopulaParameter) -> float:
    """Map theta onto the real line: log, identity, log(theta - 1)."""
    if p.family is Family.CLAYTON:
        return float(np.log(p.theta))
    if p.family is Family.GUMBEL:
        if p.theta == 1.0:
            raise CopulaDomainError("Gumbel theta = 1 has no finite link value")
        return float(np.log(p.theta - 1.0))
    return p.theta


def link_inverse(eta: float, family: "Family | str") -> CopulaParameter:
    family = Family.parse(family)
    eta = float(eta)
    if family is Family.CLAYTON:
        return CopulaParameter(family, np.exp(eta))
    if family is Family.GUMBEL:
        return CopulaParameter(family, 1.0 + np.exp(eta))
    return CopulaParameter(family, eta)
