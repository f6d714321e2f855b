"""Mixture estimation from observed z-scores.

A normal-mixture EM with Dirichlet pseudo-counts on the component weights,
a plug-in estimate of the signal fraction from p-values, and the
composite-null locFDR built from a fitted mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .model import MarginalMixture, NormalComponent

__all__ = [
    "EmConfig",
    "EstimationError",
    "FittedMixture",
    "fit_mixture",
    "storey_pi",
    "composite_locfdr",
    "clamp_zscores",
    "fisher_combine",
    "CLAMP_Z",
]

log = logging.getLogger(__name__)

CLAMP_Z = 6.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmConfig:
    """Settings for :func:`fit_mixture`.

    Component 0 is the designated null.  ``dirichlet_prior`` holds one
    pseudo-count per component, added to the expected counts in the weight
    update; the default puts a single pseudo-count on the null and none
    elsewhere.
    """

    n_components: int = 2
    dirichlet_prior: tuple | None = None
    pin_null: bool = True
    max_iter: int = 2000
    tol: float = 1e-12
    n_restarts: int = 5
    seed: int | None = 0
    min_sd: float = 1e-3

    def __post_init__(self):
        if self.n_components < 2:
            raise ValueError("need at least two components")
        if self.dirichlet_prior is not None:
            prior = tuple(float(c) for c in self.dirichlet_prior)
            if len(prior) != self.n_components:
                raise ValueError("dirichlet_prior needs one entry per component")
            if min(prior) < 0:
                raise ValueError("pseudo-counts must be nonnegative")
            object.__setattr__(self, "dirichlet_prior", prior)

    @property
    def pseudo_counts(self) -> np.ndarray:
        if self.dirichlet_prior is None:
            c = np.zeros(self.n_components)
            c[0] = 1.0
            return c
        return np.asarray(self.dirichlet_prior)


@dataclass(frozen=True)
class FittedMixture:
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    null_assignment: tuple[int, ...]
    loglik: float = float("nan")
    loglik_trace: tuple = field(default=(), repr=False)
    n_iter: int = 0

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def alt_assignment(self) -> tuple[int, ...]:
        return tuple(j for j in range(self.n_components) if j not in self.null_assignment)

    @property
    def pi_hat(self) -> float:
        return float(sum(self.weights[j] for j in self.alt_assignment))

    def _sub(self, idx):
        w = self.weights[list(idx)]
        # a sub-mixture with no mass still needs valid weights; pi_hat keeps it out of the law
        w = w / w.sum() if w.sum() > 0 else np.full(len(w), 1.0 / len(w))
        return tuple(NormalComponent(float(wj), float(self.means[j]), float(self.sds[j]))
                     for wj, j in zip(w, idx))

    def to_mixture(self) -> MarginalMixture:
        """Two-group law with renormalised null and alternative sub-mixtures."""
        if not self.alt_assignment:
            raise EstimationError("no alternative components")
        pi = min(max(self.pi_hat, 0.0), 1.0)
        return MarginalMixture(pi, self._sub(self.null_assignment), self._sub(self.alt_assignment))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(), "means": self.means.tolist(), "sds": self.sds.tolist(),
            "null_assignment": list(self.null_assignment), "pi_hat": self.pi_hat,
            "loglik": self.loglik, "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedMixture":
        return cls(np.asarray(d["weights"], float), np.asarray(d["means"], float),
                   np.asarray(d["sds"], float), tuple(int(j) for j in d["null_assignment"]),
                   float(d.get("loglik", "nan")), (), int(d.get("n_iter", 0)))


def _penalized_loglik(z, w, m, s, c):
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.log(w)
        u = (z[None, :] - m[:, None]) / s[:, None]
        lp = (logw - np.log(s) - _HALF_LOG_2PI)[:, None] - 0.5 * u * u
    ll = float(logsumexp(lp, axis=0).sum())
    pen = float(np.sum(np.where(c > 0, c * logw, 0.0)))
    return ll + pen, lp


def _em_map(z, lp, m, s, c, free):
    """One EM update; ``lp`` holds the weighted log densities at the current point."""
    n = len(z)
    resp = np.exp(lp - logsumexp(lp, axis=0))
    nk = resp.sum(axis=1)
    w = (nk + c) / (n + c.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        m_new = resp @ z / nk
        s_new = np.sqrt(np.einsum("kn,kn->k", resp, (z[None, :] - m_new[:, None]) ** 2) / nk)
    upd = free & (nk > 0)
    return w, np.where(upd, m_new, m), np.where(upd, s_new, s)


def _valid(w, s, free, min_sd):
    return bool(np.all(w >= 0) and np.all(np.isfinite(s)) and np.all(s[free] >= min_sd))


def _em_once(z, init, cfg: EmConfig):
    """EM with SQUAREM extrapolation.

    An extrapolated point is kept only if it does not lower the penalised
    objective below the plain double EM step, so the objective trace stays
    monotone.
    """
    w, m, s = (np.array(a, dtype=float) for a in init)
    c = cfg.pseudo_counts
    k = len(w)
    free = np.arange(k) >= (1 if cfg.pin_null else 0)
    obj, lp = _penalized_loglik(z, w, m, s, c)
    trace = [obj]
    n_eval = 0
    while n_eval < cfg.max_iter:
        th0 = np.r_[w, m, s]
        w1, m1, s1 = _em_map(z, lp, m, s, c, free)
        if not _valid(w1, s1, free, cfg.min_sd):
            return None
        _, lp1 = _penalized_loglik(z, w1, m1, s1, c)
        w2, m2, s2 = _em_map(z, lp1, m1, s1, c, free)
        if not _valid(w2, s2, free, cfg.min_sd):
            return None
        obj2, lp2 = _penalized_loglik(z, w2, m2, s2, c)
        n_eval += 2
        best = (w2, m2, s2, obj2, lp2)
        r = np.r_[w1, m1, s1] - th0
        v = np.r_[w2, m2, s2] - np.r_[w1, m1, s1] - r
        nv = np.linalg.norm(v)
        if nv > 0:
            step = min(-1.0, -np.linalg.norm(r) / nv)
            th = th0 - 2.0 * step * r + step * step * v
            we, me, se = th[:k], th[k:2 * k], th[2 * k:]
            if _valid(we, se, free, cfg.min_sd) and np.all(we > 0):
                _, lpe = _penalized_loglik(z, we, me, se, c)
                w3, m3, s3 = _em_map(z, lpe, me, se, c, free)
                n_eval += 1
                if _valid(w3, s3, free, cfg.min_sd):
                    obj3, lp3 = _penalized_loglik(z, w3, m3, s3, c)
                    if obj3 >= obj2:
                        best = (w3, m3, s3, obj3, lp3)
        w, m, s, new_obj, lp = best
        # EM with conjugate pseudo-counts never decreases the penalised objective
        if new_obj < obj - 1e-8 * max(1.0, abs(obj)):
            raise AssertionError(f"penalized log-likelihood decreased at step {len(trace)}: {obj} -> {new_obj}")
        trace.append(new_obj)
        done = abs(new_obj - obj) <= cfg.tol * max(1.0, abs(obj))
        obj = new_obj
        if done:
            break
    return w, m, s, obj, tuple(trace), n_eval


def _initial(z, cfg: EmConfig, rng, restart: int):
    k = cfg.n_components
    sd = float(np.std(z))
    if cfg.pin_null:
        # one free component starts in the lower tail, where one-sided alternatives sit
        qs = np.linspace(0.05, 0.95, k - 1) if k > 2 else np.array([0.05])
        means = np.r_[0.0, np.quantile(z, qs)]
        sds = np.r_[1.0, np.full(k - 1, sd)]
    else:
        means = np.quantile(z, (np.arange(k) + 0.5) / k)
        means[np.argmin(np.abs(means))] = 0.0
        means = np.r_[0.0, np.delete(means, np.argmin(np.abs(means)))]
        sds = np.full(k, sd)
    if restart > 0:
        jitter = rng.normal(0.0, 0.25 * sd, k)
        if cfg.pin_null:
            jitter[0] = 0.0
        means = means + jitter
        sds = sds * np.exp(rng.normal(0.0, 0.1, k) * (np.arange(k) >= int(cfg.pin_null)))
    return np.full(k, 1.0 / k), means, sds


def fit_mixture(z, config: EmConfig | None = None) -> FittedMixture:
    """Penalised maximum-likelihood normal mixture.

    Component 0 starts at (and with ``pin_null`` stays at) N(0, 1) and is
    always assigned to the null; any other component is assigned to the
    null when its fitted mean is nonnegative.

    Raises
    ------
    EstimationError
        If every restart collapses a component to zero width.
    """
    cfg = config or EmConfig()
    z = np.asarray(z, dtype=float).ravel()
    if len(z) < 10 * cfg.n_components:
        raise ValueError(f"need at least {10 * cfg.n_components} observations, got {len(z)}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z-scores must be finite")
    rng = np.random.default_rng(cfg.seed)
    best = None
    for r in range(max(1, cfg.n_restarts)):
        out = _em_once(z, _initial(z, cfg, rng, r), cfg)
        if out is None:
            log.info("EM restart %d degenerated", r)
            continue
        if best is None or out[3] > best[3]:
            best = out
    if best is None:
        raise EstimationError("all EM restarts degenerated (component sd collapsed)")
    w, m, s, obj, trace, n_iter = best
    null = tuple([0] + [j for j in range(1, len(w)) if m[j] >= 0])
    return FittedMixture(w, m, s, null, obj, trace, n_iter)


def storey_pi(pvalues, lam: float = 0.5) -> float:
    """Signal fraction ``1 - #{p > lam} / ((1 - lam) K)``, clamped to [0, 1]."""
    p = np.asarray(pvalues, dtype=float)
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    pi0 = np.count_nonzero(p > lam, axis=-1) / ((1.0 - lam) * p.shape[-1])
    out = np.clip(1.0 - pi0, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def composite_locfdr(fit: FittedMixture, z):
    """Marginal locFDR under the fitted null and alternative sub-mixtures."""
    if not fit.alt_assignment:
        raise EstimationError("no alternative components")
    from .locfdr import marginal_locfdr

    return marginal_locfdr(fit.to_mixture(), z)


def clamp_zscores(pvalues, rng, threshold: float = CLAMP_Z):
    """Convert one-sided p-values to z-scores, replacing the far tails.

    p-values whose z-score would exceed ``threshold`` in absolute value
    (including exact 0 and 1) are replaced by draws from
    ``N(-threshold, 1)`` or ``N(threshold, 1)``.

    Returns
    -------
    z : ndarray
    clamped : ndarray of bool
    """
    p = np.asarray(pvalues, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    lo = stats.norm.cdf(-threshold)
    with np.errstate(divide="ignore"):
        z = stats.norm.ppf(p)
    low = p < lo
    high = p > 1.0 - lo
    z = np.where(low, rng.normal(-threshold, 1.0, p.shape), z)
    z = np.where(high, rng.normal(threshold, 1.0, p.shape), z)
    return z, low | high


def fisher_combine(z_discovery, z_validation):
    """Fisher combination of two left-tail z-scores: chi-square(4) tail of
    ``-2 log Phi(zd) - 2 log Phi(zv)``."""
    stat = -2.0 * (stats.norm.logcdf(z_discovery) + stats.norm.logcdf(z_validation))
    return stats.chi2.sf(stat, 4)
