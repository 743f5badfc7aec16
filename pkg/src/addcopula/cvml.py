"""Cross-validated marginal likelihood (CVML) from one posterior sample.

For observation j the leave-one-out predictive density satisfies

    p(y_j | D_{-j}) = 1 / E_post[ 1 / p(y_j | omega) ],

so with posterior draws omega^(1..M)

    log p(y_j | D_{-j}) ~= log M - logsumexp_m( -log p(y_j | omega^(m)) ).

CVML is the sum over j; larger is better.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .model import Model


class DatasetMismatchError(ValueError):
    """Reports or traces that were computed on different data."""


@dataclass
class CvmlReport:
    total: float
    per_observation: list
    model: dict
    draw_count: int
    dataset_hash: str = ""
    flagged: list = field(default_factory=list)
    excluded: bool = False
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d.update(extra)
        d["total"] = _finite_or_str(d["total"])
        d["per_observation"] = [_finite_or_str(v) for v in d["per_observation"]]
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "CvmlReport":
        raw = json.loads(Path(path).read_text())
        d = {f.name: raw[f.name] for f in fields(cls) if f.name in raw}
        d["total"] = float(d["total"])
        d["per_observation"] = [float(v) for v in d["per_observation"]]
        return cls(**d)

    @property
    def n_copula_covariates(self) -> int:
        return len(self.model.get("copula_covariates", ()))

    @property
    def family(self) -> str:
        return str(self.model.get("family", ""))


def _finite_or_str(v):
    return v if math.isfinite(v) else repr(float(v))


def log_cpo(loglik: np.ndarray) -> np.ndarray:
    """Log conditional predictive ordinates from an ``(M, n)`` log-likelihood matrix."""
    loglik = np.asarray(loglik, dtype=float)
    if loglik.ndim != 2 or loglik.shape[0] == 0:
        raise ValueError("need a non-empty (draws, observations) matrix")
    m = loglik.shape[0]
    with np.errstate(invalid="ignore"):
        return math.log(m) - logsumexp(-loglik, axis=0)


def pointwise_loglik_matrix(trace, model: Model) -> np.ndarray:
    out = np.empty((len(trace), model.n))
    for m, state in enumerate(trace.states()):
        out[m] = model.pointwise_loglik(state)
    return out


def cvml_from_loglik(loglik, model_info: dict | None = None,
                     dataset_hash: str = "", exclude_flagged: bool = False,
                     label: str = "") -> CvmlReport:
    per_obs = log_cpo(loglik)
    bad = ~np.isfinite(per_obs)
    flagged = np.flatnonzero(bad).tolist()
    kept = (per_obs[~bad] if exclude_flagged else per_obs).tolist()
    # fsum gives an order-independent, exactly rounded total
    total = math.fsum(kept) if all(math.isfinite(v) for v in kept) else -math.inf
    return CvmlReport(total=total, per_observation=per_obs.tolist(),
                      model=dict(model_info or {}),
                      draw_count=int(np.shape(loglik)[0]),
                      dataset_hash=dataset_hash, flagged=flagged,
                      excluded=bool(exclude_flagged and flagged), label=label)


def cvml_estimate(trace, model: Model, exclude_flagged: bool = False,
                  label: str = "") -> CvmlReport:
    """CVML of a fitted model; ``model`` must wrap the data the chain saw."""
    if len(trace) == 0:
        raise ValueError("trace has no draws")
    info = dict(trace.spec) if trace.spec else model.spec.to_dict(model.dataset.names)
    return cvml_from_loglik(pointwise_loglik_matrix(trace, model), info,
                            trace.dataset_hash, exclude_flagged, label)


def compare_models(reports) -> list:
    """Rank reports best-first by total CVML.

    Ties go to fewer copula covariates, then to the family name.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to compare")
    hashes = {r.dataset_hash for r in reports}
    if len(hashes) > 1:
        raise DatasetMismatchError(
            "reports were computed on different datasets: "
            + ", ".join(sorted(h[:12] or "<none>" for h in hashes)))
    return sorted(reports, key=lambda r: (-r.total, r.n_copula_covariates,
                                          r.family))


def format_ranking(ranked) -> str:
    lines = [f"{'rank':>4}  {'model':<28} {'family':<8} {'CVML':>14}"]
    for i, r in enumerate(ranked, 1):
        covs = ",".join(r.model.get("copula_covariate_names",
                                    map(str, r.model.get("copula_covariates", []))))
        name = r.label or covs
        lines.append(f"{i:>4}  {name:<28} {r.family:<8} {r.total:>14.4f}")
    return "\n".join(lines)
