"""Acceptance suite: one test per criterion, each at its stated tolerance.

Criteria 5-7 run the desk-scale simulation studies (10-20 replicates of
10,000-iteration chains) and take most of the runtime.
"""
import itertools
import math

import numpy as np
from scipy import integrate, special, stats

from addcopula.calibration import sample_prior_curve, truncated_poisson_logpmf
from addcopula.cli import main
from addcopula.copulas import (
    CopulaParameter,
    cdf,
    h_function,
    log_density,
    sample,
    tau_to_theta,
    theta_to_tau,
)
from addcopula.cvml import log_cpo
from addcopula.mcmc import ProposalConfig, Sampler, run_chain
from addcopula.model import Model, ModelSpec
from addcopula.simulation import (
    ScenarioSpec,
    StudySettings,
    copula_selection_study,
    generate,
    imse_study,
    variable_selection_study,
)
from addcopula.calibration import standardize

ROOT_SEED = 20240917
STUDY = StudySettings(n=450, k_max=4, root_seed=ROOT_SEED,
                      cfg=ProposalConfig(iterations=10_000, burn_in=3_000))


def batch_se(x, batches=50):
    """Monte Carlo standard error of a chain average by batch means."""
    x = np.asarray(x, dtype=float)
    m = len(x) // batches
    means = x[: m * batches].reshape(batches, m).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(batches)


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_copula_math(criteria):
    cases = [("clayton", 0.5), ("clayton", 2.0), ("clayton", 6.0),
             ("frank", -5.0), ("frank", 1.0), ("frank", 8.0),
             ("gumbel", 1.2), ("gumbel", 2.0), ("gumbel", 4.0)]
    worst = {"integral": 0.0, "h": 0.0, "tau": 0.0, "sample": 0.0}
    rng = np.random.default_rng(ROOT_SEED)
    for fam, th in cases:
        p = CopulaParameter(fam, th)
        total, _ = integrate.dblquad(lambda v, u: math.exp(log_density(u, v, p)),
                                     1e-9, 1 - 1e-9, 1e-9, 1 - 1e-9, epsabs=1e-6)
        worst["integral"] = max(worst["integral"], abs(total - 1))
        eps = 1e-6
        for u, v in itertools.product((0.1, 0.5, 0.9), (0.15, 0.5, 0.85)):
            fd = (cdf(u + eps, v, p) - cdf(u - eps, v, p)) / (2 * eps)
            worst["h"] = max(worst["h"], abs(h_function(v, u, p) - fd))
        back = tau_to_theta(theta_to_tau(p), fam).theta
        tol = 1e-6 if fam == "frank" else 1e-8
        worst["tau"] = max(worst["tau"], abs(back - th) / tol)
        u, v = sample(50_000, th, fam, rng)
        worst["sample"] = max(worst["sample"],
                              abs(stats.kendalltau(u, v)[0] - theta_to_tau(p)))
    ok = (worst["integral"] <= 1e-3 and worst["h"] <= 1e-5
          and worst["tau"] <= 1.0 and worst["sample"] <= 0.02)
    criteria.record(1, ok, "max |int-1|={integral:.1e}, max |h-FD|={h:.1e}, "
                    "tau round trip / tol={tau:.2f}, max |tau_hat-tau|={sample:.4f}"
                    .format(**worst))
    assert ok


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_conjugate_oracle(criteria):
    raw = generate(ScenarioSpec("s2", n=450, seed=ROOT_SEED))
    data, _ = standardize(raw)
    model = Model(data, ModelSpec("clayton", (0, 1), ((0, 1), (0, 1)), 4))
    cfg = ProposalConfig(iterations=6000, burn_in=1000, likelihood="marginal")
    trace = run_chain(model, cfg, seed=ROOT_SEED)
    details, ok = [], True
    for i, (y, X) in enumerate(zip(model.y, model.designs), start=1):
        a_mat = np.eye(X.shape[1]) + X.T @ X
        a_inv = np.linalg.inv(a_mat)
        mu = a_inv @ X.T @ y
        shape = 0.1 + 0.5 * len(y)
        rate = 0.1 + 0.5 * float(y @ y - mu @ a_mat @ mu)
        # beta is multivariate t; sigma^2 is inverse gamma
        beta_sd = np.sqrt(rate / (shape - 1) * np.diag(a_inv))
        sig_mean = math.sqrt(rate) * math.exp(special.gammaln(shape - 0.5)
                                              - special.gammaln(shape))
        sig_sd = math.sqrt(rate / (shape - 1) - sig_mean ** 2)
        zs = []
        for j in range(X.shape[1]):
            draws = trace.column(f"beta{i}_{j}")
            zs.append(abs(draws.mean() - mu[j]) / beta_sd[j])
            ok &= abs(draws.std() / beta_sd[j] - 1) < 0.1
        draws = trace.column(f"sigma{i}")
        zs.append(abs(draws.mean() - sig_mean) / sig_sd)
        ok &= abs(draws.std() / sig_sd - 1) < 0.1
        rates = trace.acceptance_rates()
        im, sg = rates[f"beta{i}_im"], rates[f"sigma{i}"]
        ok &= max(zs) < 3 and im == 1.0 and sg == 1.0
        details.append(f"outcome {i}: max |mean-exact|/sd={max(zs):.3f}, "
                       f"beta IM acc={im:.3f}, sigma IM acc={sg:.3f}")
    criteria.record(2, ok, "; ".join(details))
    assert ok


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_prior_recovery(criteria):
    raw = generate(ScenarioSpec("s1", n=60, seed=ROOT_SEED))
    data, _ = standardize(raw)
    model = Model(data, ModelSpec("clayton", (0,), ((0,), (0,)), 4))
    cfg = ProposalConfig(iterations=60_000, burn_in=2_000, likelihood="prior")
    trace = run_chain(model, cfg, seed=ROOT_SEED)
    grid = model.grids[0]
    worst_z = 0.0
    checks = []

    def moment(values, target):
        nonlocal worst_z
        z = abs(np.mean(values) - target) / batch_se(values)
        worst_z = max(worst_z, z)
        checks.append(z)

    for name in ["alpha0", "x1_alpha1", "x1_alpha2", "x1_alpha3"] + \
            [f"x1_psi{k}" for k in range(1, 5)]:
        v = trace.column(name)
        moment(v, 0.0)
        moment(v ** 2, 10.0)
    for k in range(4):
        v = trace.column(f"x1_gamma{k + 1}") - grid.midpoints[k]
        moment(v, 0.0)
        moment(v ** 2, grid.width ** 2 / 12)
    lam = trace.column("x1_lambda").astype(int)
    binom = stats.binom.pmf(np.arange(5), 4, 0.5)
    for m in range(5):
        moment(lam == m, binom[m])
    n_knots = sum(trace.column(f"x1_zeta{k}") for k in range(1, 5)).astype(int)
    mix = sum(binom[lv] * np.exp([truncated_poisson_logpmf(j, lv, 4) for j in range(5)])
              for lv in range(5))
    for m in range(5):
        moment(n_knots == m, mix[m])
    # moments hold within ~4 Monte Carlo SEs (about 50 simultaneous checks)
    ok_moments = worst_z < 4.5

    # |zeta| at fixed lambda: ζ moves only, compared with the exact truncated Poisson
    worst_tv = 0.0
    for lam_fixed in (1, 2, 3):
        s = Sampler(model, cfg, np.random.default_rng(ROOT_SEED + lam_fixed))
        comp = s.state.calibration.components[0]
        comp.lam = lam_fixed
        counts = np.zeros(5)
        for _ in range(200_000):
            s.update_zeta(0)
            counts[comp.n_knots] += 1
        exact = np.exp([truncated_poisson_logpmf(j, lam_fixed, 4) for j in range(5)])
        worst_tv = max(worst_tv, 0.5 * np.abs(counts / counts.sum() - exact).sum())
    ok = ok_moments and worst_tv < 0.01
    criteria.record(3, ok, f"{len(checks)} moment checks, max |z|={worst_z:.2f}; "
                    f"max TV(|zeta| | lambda)={worst_tv:.4f}")
    assert ok


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_prior_curves_and_standardization(criteria):
    rng = np.random.default_rng(ROOT_SEED)
    g = np.linspace(28.0, 42.0, 50)
    std = (g - 35.0) / 7.0
    raw_curves = np.array([sample_prior_curve(rng, g, 4, "frank", support=(28, 42))
                           for _ in range(500)])
    std_curves = np.array([sample_prior_curve(rng, std, 4, "frank", support=(-1, 1))
                           for _ in range(500)])
    raw_frac = np.mean(np.abs(raw_curves).mean(axis=1) > 0.9)
    std_frac = np.mean(np.abs(std_curves).mean(axis=1) > 0.9)
    ok = raw_frac > 0.5 and std_frac <= 0.5 * raw_frac
    criteria.record(4, ok, f"share of curves with mean|tau|>0.9: raw {raw_frac:.3f}, "
                    f"standardized {std_frac:.3f}")
    assert ok


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_imse_desk_scale(criteria):
    r1 = imse_study("s1", 10, STUDY)[0]
    r2 = imse_study("s2", 10, STUDY)[0]
    ident = max(abs(r.imse - r.ibias2 - r.ivar) for r in (r1, r2))
    ok = 0.2 <= r1.imse <= 1.0 and ident <= 1e-10 and r2.imse > r1.imse
    criteria.record(5, ok, f"S1 IBias2={r1.ibias2:.3f} IVAR={r1.ivar:.3f} "
                    f"IMSE={r1.imse:.3f}; S2 IBias2={r2.ibias2:.3f} IVAR={r2.ivar:.3f} "
                    f"IMSE={r2.imse:.3f}; identity err={ident:.1e}")
    assert ok


# -- 6 ---------------------------------------------------------------------------------

def test_criterion_6_copula_selection(criteria):
    _, p1 = copula_selection_study("s1", 20, STUDY)
    _, p2 = copula_selection_study("s2", 20, STUDY)
    ok = min(p1.values()) >= 80 and min(p2.values()) >= 75
    criteria.record(6, ok, f"Clayton correct vs Frank/Gumbel: S1 {p1['frank']:.0f}%/"
                    f"{p1['gumbel']:.0f}%, S2 {p2['frank']:.0f}%/{p2['gumbel']:.0f}%")
    assert ok


# -- 7 ---------------------------------------------------------------------------------

def test_criterion_7_variable_selection(criteria):
    rows = variable_selection_study(20, STUDY)
    d21 = np.array([r["d21"] for r in rows])
    d23 = np.array([r["d23"] for r in rows])
    wins = np.mean((d21 > 0) & (d23 > 0))
    m21, m23 = np.median(d21), np.median(d23)
    ok = wins >= 0.8 and m21 > m23 > 0
    criteria.record(7, ok, f"M2 best in {100 * wins:.0f}% of replicates; "
                    f"median d21={m21:.2f}, median d23={m23:.2f}")
    assert ok


# -- 8 ---------------------------------------------------------------------------------

def test_criterion_8_cvml_grid_oracle(criteria):
    y = np.array([-0.8, 0.1, 0.6, 2.3])
    grid = np.linspace(-6.0, 6.0, 2001)

    def posterior(obs):
        logp = stats.norm.logpdf(grid, 0, 2) + stats.norm.logpdf(
            obs[:, None], grid, 1).sum(axis=0)
        w = np.exp(logp - logp.max())
        return w / integrate.trapezoid(w, grid)

    exact = np.array([
        math.log(integrate.trapezoid(posterior(np.delete(y, j))
                                     * stats.norm.pdf(y[j], grid, 1), grid))
        for j in range(len(y))])
    cdf_grid = np.cumsum(posterior(y))
    cdf_grid /= cdf_grid[-1]
    mu = np.interp(np.random.default_rng(ROOT_SEED).uniform(size=50_000), cdf_grid, grid)
    est = log_cpo(stats.norm.logpdf(y[None, :], mu[:, None], 1))
    err = float(np.max(np.abs(est - exact)))
    ok = err < 0.02
    criteria.record(8, ok, f"max per-observation |estimate - brute force| = {err:.4f}")
    assert ok


# -- 9 ---------------------------------------------------------------------------------

def _snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.is_file() and "timing" not in p.name}


def test_criterion_9_reproducibility(criteria, tmp_path):
    fast = ["--iters", "400", "--burnin", "100"]
    d = tmp_path
    cmds = [
        ["simulate", "--scenario", "s2", "--n", "80", "--seed", "3", "--out", d / "data.csv"],
        ["fit", "--data", d / "data.csv", "--copula", "frank", "--seed", "5", *fast,
         "--grid-points", "11", "--out", d / "trace.csv"],
        ["cvml", "--trace", d / "trace.csv", "--data", d / "data.csv",
         "--out", d / "cvml.json"],
        ["compare", d / "cvml.json", "--out", d / "rank.csv"],
        ["study", "--kind", "copula-select", "--scenario", "s1", "--replicates", "2",
         "--n", "60", *fast, "--seed", "9", "--outdir", d / "study"],
    ]
    for c in cmds:
        assert main([str(a) for a in c]) == 0
    before = {**_snapshot(d), **{"study/" + k: v for k, v in _snapshot(d / "study").items()}}
    manifests = [("simulate", d / "data.json"), ("fit", d / "trace.json"),
                 ("cvml", d / "cvml.json"), ("compare", d / "rank.json"),
                 ("study", d / "study" / "manifest.json")]
    codes = [main([cmd, "--config", str(m)]) for cmd, m in manifests]
    after = {**_snapshot(d), **{"study/" + k: v for k, v in _snapshot(d / "study").items()}}
    changed = sorted(k for k in before if before[k] != after.get(k))
    ok = all(c == 0 for c in codes) and not changed and before.keys() == after.keys()
    criteria.record(9, ok, f"{len(before)} output files compared after rerunning "
                    f"{len(manifests)} commands from their manifests; changed: "
                    f"{changed or 'none'}")
    assert ok
