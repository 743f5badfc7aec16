"""Metropolis-within-Gibbs sampler for the additive conditional copula model.

One sweep updates, in this order:

    beta_1, beta_2      mixture of Independent Metropolis (proposal = the
                        no-copula conjugate conditional) and Gaussian RWM
    sigma_1, sigma_2    Independent Metropolis with the no-copula
                        inverse-gamma conditional for sigma^2
    alpha0              RWM
    per copula covariate i:
        alpha^(i)       RWM, one coordinate at a time
        zeta^(i)        add/delete one indicator or swap two (prob. 1/2 each)
        psi^(i)         RWM if the knot is active, prior refresh otherwise
        gamma^(i)       IM with the Uniform(I_k) prior as proposal if active,
                        prior refresh otherwise
        lambda^(i)      IM with the Binomial(k_max, 1/2) prior as proposal

Random-walk scales adapt on 100-iteration windows during burn-in only and are
frozen afterwards, so the stored draws come from a fixed kernel.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calibration import (
    LAMBDA_PROB,
    PRIOR_VAR,
    truncated_poisson_logpmf,
    zeta_log_prior,
)
from .copulas import logpdf, theta_from_eta
from .model import (
    SIGMA2_RATE,
    SIGMA2_SHAPE,
    ChainState,
    Model,
    ParameterLayout,
    inverse_gamma_logpdf,
    pit,
)

LIKELIHOODS = ("full", "marginal", "prior")

_SD = np.sqrt(PRIOR_VAR)


@dataclass
class ProposalConfig:
    """Run lengths, proposal scales and tuning targets.

    ``likelihood`` selects the target: ``"full"`` (the model), ``"marginal"``
    (copula factor fixed to 1) or ``"prior"`` (no likelihood at all).  The
    latter two exist for validation runs.
    """

    iterations: int = 10_000
    burn_in: int = 3_000
    thin: int = 1
    beta_im_prob: float = 0.8
    beta_scale: float = 0.05
    alpha_scale: float = 0.1
    psi_scale: float = 0.5
    beta_target: tuple = (0.20, 0.30)
    alpha_target: tuple = (0.20, 0.40)
    psi_target: tuple = (0.20, 0.50)
    adapt_window: int = 100
    adapt_gain: float = 3.0
    likelihood: str = "full"

    def __post_init__(self):
        if not 0.0 <= self.beta_im_prob <= 1.0:
            raise ValueError("beta_im_prob must lie in [0, 1]")
        if min(self.beta_scale, self.alpha_scale, self.psi_scale) <= 0:
            raise ValueError("proposal scales must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        self.beta_target = tuple(self.beta_target)
        self.alpha_target = tuple(self.alpha_target)
        self.psi_target = tuple(self.psi_target)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("beta_target", "alpha_target", "psi_target"):
            d[k] = list(d[k])
        return d


def _mh_accept(rng: np.random.Generator, log_ratio: float) -> bool:
    """Metropolis-Hastings test done in log space; NaN is a rejection."""
    if log_ratio >= 0.0:
        return True
    if not log_ratio > -np.inf:  # -inf or NaN
        return False
    return bool(np.log(rng.uniform()) < log_ratio)


class Sampler:
    """Holds one chain's state plus the cached quantities each move needs.

    Every ``update_*`` method performs one Metropolis-Hastings (or direct)
    move in place and returns whether the proposal was accepted (for blocks
    with several coordinates, the number of acceptances).
    """

    def __init__(self, model: Model, cfg: ProposalConfig | None = None,
                 rng: np.random.Generator | None = None,
                 state: ChainState | None = None):
        self.model = model
        self.cfg = cfg or ProposalConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.use_marginal = self.cfg.likelihood in ("full", "marginal")
        self.use_copula = self.cfg.likelihood == "full"
        self.names = [model.dataset.names[c] for c in model.spec.copula_covariates]

        # conjugate pieces: A = I + X'X, mu = A^{-1} X'y
        self._a, self._a_inv, self._a_chol, self._mu = [], [], [], []
        for y, X in zip(model.y, model.designs):
            a = np.eye(X.shape[1]) + X.T @ X
            a_inv = np.linalg.inv(a)
            self._a.append(a)
            self._a_inv.append(a_inv)
            self._a_chol.append(np.linalg.cholesky(a_inv))
            self._mu.append(a_inv @ X.T @ y)
        self._xpow = [np.stack([x, x * x, x * x * x]) for x in model.xc.T]

        self.scales: dict = {}
        for i in (0, 1):
            self.scales[("beta", i)] = self.cfg.beta_scale
        self.scales[("alpha0",)] = self.cfg.alpha_scale
        for i, g in enumerate(model.grids):
            for j in range(3):
                self.scales[("alpha", i, j)] = self.cfg.alpha_scale
            for k in range(g.k_max):
                self.scales[("psi", i, k)] = self.cfg.psi_scale
        self._window = {key: [0, 0] for key in self.scales}

        blocks = []
        for i in (1, 2):
            blocks += [f"beta{i}_im", f"beta{i}_rwm"]
        blocks += ["sigma1", "sigma2", "alpha0"]
        for nm in self.names:
            blocks += [f"{nm}_{b}" for b in ("alpha", "zeta", "psi", "gamma",
                                             "lambda")]
        self.counts = {b: [0, 0] for b in blocks}

        self.set_state(state if state is not None else model.initial_state(self.rng))

    # -- cache management --------------------------------------------------

    def set_state(self, state: ChainState) -> None:
        m = self.model
        self.state = state
        self.z = list(m.residuals(state))
        self.u = [pit(z) for z in self.z]
        self.comp_eta = [self._component(i) for i in range(m.spec.p)]
        self.eta = state.calibration.alpha0 + sum(self.comp_eta)
        self.cop_ll = self._copula(self.u[0], self.u[1], self.eta)

    def _component(self, i: int) -> np.ndarray:
        comp = self.state.calibration.components[i]
        xp = self._xpow[i]
        out = comp.alpha @ xp
        for k in np.flatnonzero(comp.zeta):
            out = out + comp.psi[k] * self._basis(i, comp.gamma[k])
        return out

    def _basis(self, i: int, gamma: float) -> np.ndarray:
        return np.maximum(self._xpow[i][0] - gamma, 0.0) ** 3

    def _copula(self, u1, u2, eta) -> float:
        if not self.use_copula:
            return 0.0
        theta = theta_from_eta(eta, self.model.family)
        return float(np.sum(logpdf(u1, u2, theta, self.model.family)))

    def _count(self, block: str, accepted: bool) -> None:
        c = self.counts[block]
        c[0] += accepted
        c[1] += 1

    def _tally(self, key, accepted: bool) -> None:
        w = self._window[key]
        w[0] += accepted
        w[1] += 1

    def log_posterior(self) -> float:
        """Log target density of the current state under ``cfg.likelihood``."""
        m = self.model
        lp = m.log_prior(self.state)
        if self.use_marginal:
            lp += m.marginal_loglik(self.state)
        if self.use_copula:
            lp += m.copula_loglik(self.state)
        return lp

    # -- beta --------------------------------------------------------------

    def _marginal_terms(self, i: int, beta, sigma):
        """Residuals and log-likelihood + beta-prior for outcome ``i``."""
        y, X = self.model.y[i], self.model.designs[i]
        z = (y - X @ beta) / sigma
        ll = -0.5 * float(z @ z) - len(y) * np.log(sigma) if self.use_marginal else 0.0
        s2 = sigma * sigma
        lprior = -0.5 * float(beta @ beta) / s2 - 0.5 * len(beta) * np.log(s2)
        return z, ll, lprior

    def _beta_proposal_logpdf(self, i: int, beta, sigma) -> float:
        # N(mu, sigma^2 A^{-1}) up to a constant shared by both directions
        d = beta - self._mu[i]
        return -0.5 * float(d @ self._a[i] @ d) / (sigma * sigma)

    def _beta_log_ratio(self, i: int, beta_new, independent: bool):
        marg = self.state.marginals[i]
        z_old, ll_old, pr_old = self._marginal_terms(i, marg.beta, marg.sigma)
        z_new, ll_new, pr_new = self._marginal_terms(i, beta_new, marg.sigma)
        u_new = pit(z_new)
        pair = [self.u[0], self.u[1]]
        pair[i] = u_new
        cop_new = self._copula(pair[0], pair[1], self.eta)
        log_r = (ll_new - ll_old) + (pr_new - pr_old) + (cop_new - self.cop_ll)
        if independent:
            log_r += (self._beta_proposal_logpdf(i, marg.beta, marg.sigma)
                      - self._beta_proposal_logpdf(i, beta_new, marg.sigma))
        return log_r, z_new, u_new, cop_new

    def beta_im_log_ratio(self, i: int, beta_new) -> float:
        """Full IM log acceptance ratio for proposing ``beta_new`` for outcome i."""
        return self._beta_log_ratio(i, np.asarray(beta_new, float), True)[0]

    def propose_beta_im(self, i: int) -> np.ndarray:
        sigma = self.state.marginals[i].sigma
        eps = self.rng.standard_normal(self._mu[i].shape[0])
        return self._mu[i] + sigma * (self._a_chol[i] @ eps)

    def update_beta(self, i: int) -> bool:
        marg = self.state.marginals[i]
        independent = self.rng.uniform() < self.cfg.beta_im_prob
        if independent:
            beta_new = self.propose_beta_im(i)
        else:
            scale = self.scales[("beta", i)]
            beta_new = marg.beta + scale * self.rng.standard_normal(marg.beta.shape[0])
        log_r, z_new, u_new, cop_new = self._beta_log_ratio(i, beta_new, independent)
        acc = _mh_accept(self.rng, log_r)
        if acc:
            marg.beta = beta_new
            self.z[i], self.u[i], self.cop_ll = z_new, u_new, cop_new
        self._count(f"beta{i + 1}_{'im' if independent else 'rwm'}", acc)
        if not independent:
            self._tally(("beta", i), acc)
        return acc

    # -- sigma -------------------------------------------------------------

    def sigma_proposal(self, i: int):
        """Shape and rate of the no-copula inverse-gamma conditional of sigma_i^2."""
        marg = self.state.marginals[i]
        y, X = self.model.y[i], self.model.designs[i]
        r = y - X @ marg.beta
        shape = SIGMA2_SHAPE + 0.5 * (len(marg.beta) + len(y))
        rate = SIGMA2_RATE + 0.5 * (float(marg.beta @ marg.beta) + float(r @ r))
        return shape, rate

    def sigma_im_log_ratio(self, i: int, sigma_new: float):
        """Full IM log ratio for sigma_i -> sigma_new, computed on sigma^2."""
        return self._sigma_log_ratio(i, float(sigma_new))[0]

    def _sigma_log_ratio(self, i: int, sigma_new: float):
        marg = self.state.marginals[i]
        shape, rate = self.sigma_proposal(i)
        s2_old, s2_new = marg.sigma ** 2, sigma_new ** 2
        z_old, ll_old, pr_old = self._marginal_terms(i, marg.beta, marg.sigma)
        z_new, ll_new, pr_new = self._marginal_terms(i, marg.beta, sigma_new)
        pr_old += inverse_gamma_logpdf(s2_old, SIGMA2_SHAPE, SIGMA2_RATE)
        pr_new += inverse_gamma_logpdf(s2_new, SIGMA2_SHAPE, SIGMA2_RATE)
        u_new = pit(z_new)
        pair = [self.u[0], self.u[1]]
        pair[i] = u_new
        cop_new = self._copula(pair[0], pair[1], self.eta)
        log_r = ((ll_new - ll_old) + (pr_new - pr_old) + (cop_new - self.cop_ll)
                 + inverse_gamma_logpdf(s2_old, shape, rate)
                 - inverse_gamma_logpdf(s2_new, shape, rate))
        return float(log_r), z_new, u_new, cop_new

    def update_sigma(self, i: int) -> bool:
        shape, rate = self.sigma_proposal(i)
        sigma_new = float(np.sqrt(rate / self.rng.gamma(shape)))
        log_r, z_new, u_new, cop_new = self._sigma_log_ratio(i, sigma_new)
        acc = _mh_accept(self.rng, log_r)
        if acc:
            self.state.marginals[i].sigma = sigma_new
            self.z[i], self.u[i], self.cop_ll = z_new, u_new, cop_new
        self._count(f"sigma{i + 1}", acc)
        return acc

    # -- spline blocks -------------------------------------------------------

    def _try_eta(self, delta_eta, log_prior_ratio: float) -> bool:
        """Propose eta + delta_eta; accept and update caches on success."""
        if log_prior_ratio == -np.inf:
            return False
        new_eta = self.eta + delta_eta
        cop_new = self._copula(self.u[0], self.u[1], new_eta)
        if _mh_accept(self.rng, log_prior_ratio + cop_new - self.cop_ll):
            self.eta = new_eta
            self.cop_ll = cop_new
            return True
        return False

    @staticmethod
    def _normal_prior_ratio(new: float, old: float) -> float:
        return -0.5 * (new * new - old * old) / PRIOR_VAR

    def update_alpha0(self) -> bool:
        cal = self.state.calibration
        key = ("alpha0",)
        step = self.scales[key] * self.rng.standard_normal()
        new = cal.alpha0 + step
        acc = self._try_eta(step, self._normal_prior_ratio(new, cal.alpha0))
        if acc:
            cal.alpha0 = new
        self._count("alpha0", acc)
        self._tally(key, acc)
        return acc

    def update_alpha(self, i: int) -> int:
        comp = self.state.calibration.components[i]
        n_acc = 0
        for j in range(3):
            key = ("alpha", i, j)
            step = self.scales[key] * self.rng.standard_normal()
            new = comp.alpha[j] + step
            dv = step * self._xpow[i][j]
            acc = self._try_eta(dv, self._normal_prior_ratio(new, comp.alpha[j]))
            if acc:
                comp.alpha[j] = new
                self.comp_eta[i] = self.comp_eta[i] + dv
            n_acc += acc
            self._count(f"{self.names[i]}_alpha", acc)
            self._tally(key, acc)
        return n_acc

    def update_zeta(self, i: int) -> bool:
        comp = self.state.calibration.components[i]
        kmax = comp.k_max
        new = comp.zeta.copy()
        if kmax < 2 or self.rng.uniform() < 0.5:
            k = int(self.rng.integers(kmax))
            new[k] = 1 - new[k]
        else:
            k, l = self.rng.choice(kmax, size=2, replace=False)
            new[k], new[l] = new[l], new[k]
        changed = np.flatnonzero(new != comp.zeta)
        if changed.size == 0:
            self._count(f"{self.names[i]}_zeta", True)
            return True
        dv = np.zeros(self.model.n)
        for k in changed:
            sign = 1.0 if new[k] else -1.0
            dv += sign * comp.psi[k] * self._basis(i, comp.gamma[k])
        log_prior_ratio = (zeta_log_prior(new, comp.lam)
                           - zeta_log_prior(comp.zeta, comp.lam))
        acc = self._try_eta(dv, log_prior_ratio)
        if acc:
            comp.zeta = new
            self.comp_eta[i] = self.comp_eta[i] + dv
        self._count(f"{self.names[i]}_zeta", acc)
        return acc

    def update_psi(self, i: int) -> int:
        comp = self.state.calibration.components[i]
        n_acc = 0
        for k in range(comp.k_max):
            if not comp.zeta[k]:
                comp.psi[k] = _SD * self.rng.standard_normal()
                continue
            key = ("psi", i, k)
            step = self.scales[key] * self.rng.standard_normal()
            new = comp.psi[k] + step
            dv = step * self._basis(i, comp.gamma[k])
            acc = self._try_eta(dv, self._normal_prior_ratio(new, comp.psi[k]))
            if acc:
                comp.psi[k] = new
                self.comp_eta[i] = self.comp_eta[i] + dv
            n_acc += acc
            self._count(f"{self.names[i]}_psi", acc)
            self._tally(key, acc)
        return n_acc

    def gamma_log_ratio(self, i: int, k: int, gamma_new: float) -> float:
        """IM log ratio for moving active knot k; prior and proposal cancel."""
        comp = self.state.calibration.components[i]
        dv = comp.psi[k] * (self._basis(i, gamma_new) - self._basis(i, comp.gamma[k]))
        return self._copula(self.u[0], self.u[1], self.eta + dv) - self.cop_ll

    def update_gamma(self, i: int) -> int:
        comp = self.state.calibration.components[i]
        grid = self.model.grids[i]
        left, right = grid.left, grid.right
        n_acc = 0
        for k in range(comp.k_max):
            new = float(self.rng.uniform(left[k], right[k]))
            if not comp.zeta[k]:
                comp.gamma[k] = new
                continue
            dv = comp.psi[k] * (self._basis(i, new) - self._basis(i, comp.gamma[k]))
            acc = self._try_eta(dv, 0.0)
            if acc:
                comp.gamma[k] = new
                self.comp_eta[i] = self.comp_eta[i] + dv
            n_acc += acc
            self._count(f"{self.names[i]}_gamma", acc)
        return n_acc

    def lambda_log_ratio(self, i: int, lam_new: int) -> float:
        comp = self.state.calibration.components[i]
        m = comp.n_knots
        return (truncated_poisson_logpmf(m, lam_new, comp.k_max)
                - truncated_poisson_logpmf(m, comp.lam, comp.k_max))

    def update_lambda(self, i: int) -> bool:
        comp = self.state.calibration.components[i]
        lam_new = int(self.rng.binomial(comp.k_max, LAMBDA_PROB))
        acc = _mh_accept(self.rng, self.lambda_log_ratio(i, lam_new))
        if acc:
            comp.lam = lam_new
        self._count(f"{self.names[i]}_lambda", acc)
        return acc

    # -- driver --------------------------------------------------------------

    def sweep(self) -> None:
        for i in (0, 1):
            self.update_beta(i)
        for i in (0, 1):
            self.update_sigma(i)
        self.update_alpha0()
        for i in range(self.model.spec.p):
            self.update_alpha(i)
            self.update_zeta(i)
            self.update_psi(i)
            self.update_gamma(i)
            self.update_lambda(i)

    def adapt(self) -> None:
        """Nudge each RWM scale toward the middle of its target band."""
        cfg = self.cfg
        mids = {"beta": np.mean(cfg.beta_target), "alpha0": np.mean(cfg.alpha_target),
                "alpha": np.mean(cfg.alpha_target), "psi": np.mean(cfg.psi_target)}
        for key, w in self._window.items():
            acc, att = w
            if att:
                step = cfg.adapt_gain * (acc / att - mids[key[0]])
                self.scales[key] *= float(np.exp(np.clip(step, -np.log(2), np.log(2))))
            w[0] = w[1] = 0

    def reset_counts(self) -> dict:
        old = {k: list(v) for k, v in self.counts.items()}
        for v in self.counts.values():
            v[0] = v[1] = 0
        return old


@dataclass
class Trace:
    """Post-burn-in draws (one row per stored sweep) and run diagnostics."""

    draws: np.ndarray
    layout: ParameterLayout
    acceptance: dict
    seed: int
    spec: dict = field(default_factory=dict)
    burn_in_acceptance: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    dataset_hash: str = ""
    standardization: dict | None = None
    seconds: float = 0.0

    def __len__(self) -> int:
        return self.draws.shape[0]

    def state(self, m: int) -> ChainState:
        return self.layout.unpack(self.draws[m])

    def states(self):
        for m in range(len(self)):
            yield self.state(m)

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.layout.names.index(name)]

    def acceptance_rates(self) -> dict:
        return {k: (a / n if n else None) for k, (a, n) in self.acceptance.items()}

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "spec": self.spec,
            "config": self.config,
            "dataset_hash": self.dataset_hash,
            "standardization": self.standardization,
            "layout": {"n_beta": list(self.layout.n_beta),
                       "k_max": list(self.layout.k_max),
                       "cov_names": list(self.layout.cov_names)},
            "n_draws": len(self),
            "acceptance_counts": self.acceptance,
            "acceptance_rates": self.acceptance_rates(),
            "burn_in_acceptance_counts": self.burn_in_acceptance,
            "final_scales": self.scales,
        }


def _scale_key(key) -> str:
    return "_".join(str(k) for k in key)


class InitializationError(RuntimeError):
    """The chain's starting point has zero posterior density."""


def run_chain(model: Model, cfg: ProposalConfig | None = None,
              seed: int = 0, state: ChainState | None = None) -> Trace:
    """Run one chain; deterministic given ``seed``."""
    cfg = cfg or ProposalConfig()
    rng = np.random.default_rng(seed)
    sampler = Sampler(model, cfg, rng, state)
    lp = sampler.log_posterior()
    if not np.isfinite(lp):
        raise InitializationError(f"initial log-posterior is not finite ({lp})")
    layout = ParameterLayout.for_model(model)
    n_keep = (cfg.iterations - cfg.burn_in) // cfg.thin
    draws = np.empty((n_keep, layout.size))
    started = time.perf_counter()
    burn_counts = {}
    row = 0
    for t in range(cfg.iterations):
        sampler.sweep()
        if t < cfg.burn_in:
            if (t + 1) % cfg.adapt_window == 0:
                sampler.adapt()
            if t + 1 == cfg.burn_in:
                burn_counts = sampler.reset_counts()
            continue
        if (t - cfg.burn_in + 1) % cfg.thin == 0 and row < n_keep:
            layout.pack(sampler.state, draws[row])
            row += 1
    if cfg.burn_in == 0:
        burn_counts = {k: [0, 0] for k in sampler.counts}
    return Trace(
        draws=draws,
        layout=layout,
        acceptance={k: list(v) for k, v in sampler.counts.items()},
        seed=int(seed),
        spec=model.spec.to_dict(model.dataset.names),
        burn_in_acceptance=burn_counts,
        scales={_scale_key(k): v for k, v in sampler.scales.items()},
        config=cfg.to_dict(),
        dataset_hash="",
        standardization=(model.dataset.standardization.to_dict()
                         if model.dataset.standardization is not None else None),
        seconds=time.perf_counter() - started,
    )


def timing_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".timing.json")


def write_trace(trace: Trace, path, extra: dict | None = None) -> Path:
    """Write draws as CSV and the manifest as ``<stem>.json``; return the latter.

    Wall-clock time goes to a separate ``<stem>.timing.json`` so that the CSV
    and manifest of a rerun are byte-identical.
    """
    path = Path(path)
    np.savetxt(path, trace.draws, delimiter=",", header=",".join(trace.layout.names),
               comments="", fmt="%.17g")
    manifest = trace.manifest()
    if extra:
        manifest.update(extra)
    mpath = path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    timing_path(path).write_text(json.dumps({"seconds": trace.seconds}) + "\n")
    return mpath


def read_trace(path) -> Trace:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    lay = manifest["layout"]
    layout = ParameterLayout(tuple(lay["n_beta"]), tuple(lay["k_max"]),
                             tuple(lay["cov_names"]))
    with open(path) as fh:
        header = tuple(fh.readline().strip().split(","))
    if header != layout.names:
        raise ValueError(f"{path}: trace columns do not match its manifest")
    draws = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trace(
        draws=draws,
        layout=layout,
        acceptance=manifest["acceptance_counts"],
        seed=manifest["seed"],
        spec=manifest["spec"],
        burn_in_acceptance=manifest.get("burn_in_acceptance_counts", {}),
        scales=manifest.get("final_scales", {}),
        config=manifest.get("config", {}),
        dataset_hash=manifest.get("dataset_hash", ""),
        standardization=manifest.get("standardization"),
        seconds=(json.loads(timing_path(path).read_text())["seconds"]
                 if timing_path(path).exists() else 0.0),
    )
