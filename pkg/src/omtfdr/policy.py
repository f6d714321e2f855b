"""Optimal multiple-testing decision rules and baseline procedures.

FDR and pFDR control: a step-down rule on the sorted locFDRs driven by a
scalar multiplier ``mu``, which is calibrated by Monte Carlo so that the
linearised error constraint binds.  mFDR control: a single fixed cutoff
``t_alpha`` on the locFDRs.  Baselines: Benjamini-Hochberg (plain,
oracle/adaptive) and the running-mean step-up rule on marginal locFDRs.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .locfdr import LocFdrVector, locfdr_batch, marginal_locfdr
from .model import Independent, TwoGroupModel, sample_batch

__all__ = [
    "Criterion",
    "CriterionCoefficients",
    "StepDownTrace",
    "CalibrationDiagnostics",
    "CalibratedPolicy",
    "CalibrationError",
    "CalibrationSet",
    "coefficients",
    "step_down_decide",
    "step_down_decide_naive",
    "constraint_value",
    "posterior_fdp",
    "calibrate_mu",
    "mfdr_policy",
    "mfdr_threshold_quadrature",
    "decide",
    "decide_batch",
    "bh",
    "est_mfdr_stepup",
]

log = logging.getLogger(__name__)


class Criterion(str, enum.Enum):
    FDR = "fdr"
    PFDR = "pfdr"
    MFDR = "mfdr"

    @classmethod
    def parse(cls, value) -> "Criterion":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown criterion {value!r}; expected fdr, pfdr or mfdr") from None

    @property
    def label(self) -> str:
        return {"fdr": "FDR", "pfdr": "pFDR", "mfdr": "mFDR"}[self.value]


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CriterionCoefficients:
    a: np.ndarray
    b: np.ndarray
    c_err: float


@dataclass(frozen=True)
class StepDownTrace:
    r: np.ndarray
    m: np.ndarray
    d_sorted: np.ndarray
    d: np.ndarray


def _sorted_values(t) -> np.ndarray:
    if isinstance(t, LocFdrVector):
        return t.sorted
    return np.asarray(t, dtype=float)


def coefficients(t_sorted, criterion, alpha: float) -> CriterionCoefficients:
    """Linearised objective and constraint coefficients.

    ``a_k = 1 - T_(k)``; ``b_1 = T_(1)`` (FDR) or ``T_(1) - alpha`` (pFDR);
    ``b_k = (T_(k) - mean(T_(1..k-1))) / k`` for ``k >= 2``.
    """
    criterion = Criterion.parse(criterion)
    if criterion is Criterion.MFDR:
        raise ValueError("mFDR control uses a single-step rule, not step-down coefficients")
    t = np.asarray(t_sorted, dtype=float)
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("expected a non-empty 1-d vector of sorted locFDRs")
    if np.any(np.diff(t) < 0):
        raise ValueError("locFDR values must be sorted in nondecreasing order")
    k = len(t)
    cs = np.cumsum(t)
    b = np.empty(k)
    b[0] = t[0] - alpha if criterion is Criterion.PFDR else t[0]
    b[1:] = (t[1:] - cs[:-1] / np.arange(1, k)) / np.arange(2, k + 1)
    c_err = alpha if criterion is Criterion.FDR else 0.0
    return CriterionCoefficients(1.0 - t, b, c_err)


def _pull_back(t: LocFdrVector, d_sorted: np.ndarray) -> np.ndarray:
    d = np.zeros(len(t), dtype=np.int8)
    d[t.sort_perm] = d_sorted
    return d


def step_down_decide(t: LocFdrVector, mu: float, alpha: float, criterion) -> StepDownTrace:
    """O(K) step-down decision for a given multiplier ``mu``.

    ``m_K = max(0, R_K)``, ``m_k = max(0, m_{k+1} + R_k)``; the k-th
    smallest locFDR is rejected iff all of ``m_1..m_k`` are positive.
    """
    criterion = Criterion.parse(criterion)
    if criterion is Criterion.MFDR:
        raise ValueError("step-down rule applies to FDR and pFDR only")
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    ts = np.ascontiguousarray(t.sorted)
    r, m = _kernels.stepdown_trace(ts, float(mu), float(alpha), criterion is Criterion.PFDR)
    d_sorted = np.logical_and.accumulate(m > 0).astype(np.int8)
    return StepDownTrace(r, m, d_sorted, _pull_back(t, d_sorted))


def step_down_decide_naive(t: LocFdrVector, mu: float, alpha: float, criterion) -> StepDownTrace:
    """Literal O(K^2) form: ``D_i = D_{i-1} and any_l (R_i + ... + R_l > 0)``."""
    co = coefficients(t.sorted, criterion, alpha)
    r = co.a - mu * co.b
    k = len(r)
    upper = np.triu(np.broadcast_to(r, (k, k)))
    partial = np.cumsum(upper, axis=1)          # row i: sums R_i..R_l for l >= i
    hit = np.triu(partial > 0).any(axis=1)
    d_sorted = np.logical_and.accumulate(hit).astype(np.int8)
    m = np.maximum(0.0, np.where(np.triu(np.ones((k, k), bool)), partial, -np.inf).max(axis=1))
    return StepDownTrace(r, m, d_sorted, _pull_back(t, d_sorted))


def constraint_value(t, d_sorted, criterion, alpha: float) -> float:
    """Single-sample constraint integrand ``sum_k D_k b_k``."""
    d_sorted = np.asarray(d_sorted)
    if np.any(np.diff(d_sorted.astype(int)) > 0):
        raise ValueError("sorted decisions must be nonincreasing")
    co = coefficients(_sorted_values(t), criterion, alpha)
    return float(np.dot(d_sorted, co.b))


def posterior_fdp(t: LocFdrVector, d) -> float:
    """Posterior expected FDP ``sum_{D_i=1} T_i / R`` with 0/0 = 0."""
    d = np.asarray(d).astype(bool)
    r = d.sum()
    return float(t.t[d].sum() / r) if r else 0.0


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationDiagnostics:
    g_hat: float
    g_se: float
    n_cal: int
    bracket_width: float
    seed: int | None = None
    fallback_grid: bool = False
    evaluations: list = field(default_factory=list)
    note: str = ""


@dataclass
class CalibratedPolicy:
    """A criterion, a level and the calibrated scalar that defines the rule.

    ``scalar`` is the multiplier ``mu`` for FDR/pFDR and the locFDR cutoff
    ``t_alpha`` for mFDR.
    """

    criterion: Criterion
    alpha: float
    scalar: float
    diagnostics: CalibrationDiagnostics | None = None

    def __post_init__(self):
        self.criterion = Criterion.parse(self.criterion)
        if self.scalar < 0:
            raise ValueError("policy scalar must be nonnegative")

    def to_dict(self) -> dict:
        out = {"criterion": self.criterion.value, "alpha": self.alpha, "scalar": self.scalar}
        if self.diagnostics is not None:
            diag = asdict(self.diagnostics)
            diag["evaluations"] = [[float(m), float(g)] for m, g in diag["evaluations"]]
            out["diagnostics"] = diag
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CalibratedPolicy":
        diag = d.get("diagnostics")
        return cls(Criterion.parse(d["criterion"]), float(d["alpha"]), float(d["scalar"]),
                   CalibrationDiagnostics(**diag) if diag else None)


def _seed_of(rng):
    if rng is None or isinstance(rng, (int, np.integer)):
        return None if rng is None else int(rng)
    return None


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


Statistic = Callable[[np.ndarray], np.ndarray]


def _full_statistic(model: TwoGroupModel) -> Statistic:
    return lambda z: locfdr_batch(model, z)


class CalibrationSet:
    """Sorted locFDR rows of ``n_cal`` model draws.

    The same draws are reused for every trial ``mu`` (common random
    numbers), which makes the estimated constraint a deterministic step
    function of ``mu``.
    """

    def __init__(self, t_sorted: np.ndarray):
        self.t_sorted = np.ascontiguousarray(t_sorted, dtype=float)

    @property
    def n(self) -> int:
        return self.t_sorted.shape[0]

    @classmethod
    def draw(cls, model: TwoGroupModel, n_cal: int, rng, statistic: Statistic | None = None,
             chunk: int = 1000) -> "CalibrationSet":
        rng = _as_rng(rng)
        statistic = statistic or _full_statistic(model)
        out = np.empty((n_cal, model.k))
        for lo in range(0, n_cal, chunk):
            n = min(chunk, n_cal - lo)
            _, z = sample_batch(model, rng, n)
            out[lo:lo + n] = np.sort(statistic(z), axis=1)
        return cls(out)

    def constraint_samples(self, mu: float, alpha: float, criterion: Criterion) -> np.ndarray:
        pfdr = criterion is Criterion.PFDR
        counts, fdp = _kernels.stepdown_counts(self.t_sorted, float(mu), float(alpha), pfdr)
        return fdp - alpha * (counts > 0) if pfdr else fdp

    def pooled_sorted(self) -> np.ndarray:
        return np.sort(self.t_sorted, axis=None)


def calibrate_mu(model: TwoGroupModel, alpha: float, criterion, n_cal: int = 10_000, rng=None,
                 tol: float = 1e-4, statistic: Statistic | None = None,
                 calibration_set: CalibrationSet | None = None,
                 mu_limit: float = 2.0 ** 40) -> CalibratedPolicy:
    """Find ``mu*`` with estimated constraint ``G(mu*) <= c_err``.

    ``G(mu)`` is the Monte-Carlo mean of :func:`constraint_value` over a
    fixed set of draws.  The bracket ``[0, mu_max]`` is found by doubling
    ``mu_max`` from 1; bisection then stops at width ``tol`` and returns
    the upper (constraint-satisfying) end.

    Parameters
    ----------
    statistic
        Maps an ``(n, K)`` array of statistics to locFDR-like scores.
        Defaults to the exact locFDR of ``model``.
    calibration_set
        Precomputed draws; ``n_cal``, ``rng`` and ``statistic`` are then
        ignored.
    """
    criterion = Criterion.parse(criterion)
    if criterion is Criterion.MFDR:
        raise ValueError("use mfdr_policy for mFDR control")
    if tol <= 0:
        raise ValueError("tol must be positive")
    seed = _seed_of(rng)
    cset = calibration_set or CalibrationSet.draw(model, n_cal, rng, statistic)
    c_err = alpha if criterion is Criterion.FDR else 0.0
    cache: dict[float, tuple[float, float]] = {}

    def g(mu):
        if mu not in cache:
            vals = cset.constraint_samples(mu, alpha, criterion)
            cache[mu] = (float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0)
        return cache[mu][0]

    def finish(mu, width, fallback=False, note=""):
        g_mu = g(mu)
        diag = CalibrationDiagnostics(g_mu, cache[mu][1], cset.n, width, seed, fallback,
                                      sorted((m, v[0]) for m, v in cache.items()), note)
        return CalibratedPolicy(criterion, alpha, float(mu), diag)

    if g(0.0) <= c_err:
        return finish(0.0, 0.0, note="constraint slack at mu=0")
    hi = 1.0
    while g(hi) > c_err:
        if hi >= mu_limit:
            raise CalibrationError(
                f"failed to bracket mu: G(mu_max={hi:g}) = {g(hi):.6g} > {c_err:g}")
        hi *= 2.0
    lo = hi / 2.0 if hi > 1.0 else 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) <= c_err:
            hi = mid
        else:
            lo = mid

    if not _is_monotone(cache):
        mu = _grid_search(g, c_err, 2.0 * hi, tol)
        log.warning("constraint estimate not monotone in mu; fell back to grid search")
        return finish(mu, tol, fallback=True, note="grid search fallback")
    return finish(hi, hi - lo)


def _is_monotone(cache: dict) -> bool:
    pts = sorted(cache.items())
    for (m0, (g0, se0)), (m1, (g1, se1)) in zip(pts, pts[1:]):
        if g1 > g0 + 3.0 * max(se0, se1, 1e-15):
            return False
    return True


def _grid_search(g, c_err: float, mu_upper: float, tol: float, n_grid: int = 400) -> float:
    grid = np.unique(np.concatenate([[0.0], np.geomspace(max(tol, 1e-6), mu_upper, n_grid)]))
    ok = np.array([g(float(m)) <= c_err for m in grid])
    # smallest grid point from which the constraint holds all the way up
    bad = np.flatnonzero(~ok)
    return float(grid[bad[-1] + 1]) if len(bad) else 0.0


# --------------------------------------------------------------------------
# mFDR


def _root_from_sorted(u: np.ndarray, weights: np.ndarray | None, alpha: float):
    """Largest ``t`` among ``u`` with ``sum (u_i - alpha) w_i 1{u_i <= t} <= 0``."""
    terms = (u - alpha) if weights is None else (u - alpha) * weights
    cum = np.cumsum(terms)
    # ties share one cutoff: only evaluate at the last copy of each value
    last = np.r_[u[1:] != u[:-1], True]
    ok = np.flatnonzero((cum <= 0) & last)
    if len(ok) == 0:
        return 0.0, "degenerate: no cutoff satisfies the constraint; reject none"
    j = ok[-1]
    if j == len(u) - 1:
        return 1.0, "constraint slack: reject all"
    return float(u[j]), ""


def mfdr_threshold_quadrature(mixture, alpha: float, n_grid: int = 400_001) -> tuple[float, str]:
    """``t_alpha`` for iid statistics by quadrature over the marginal law.

    Solves ``E[(T(Z) - alpha) 1{T(Z) <= t}] = 0`` for the largest ``t``.
    """
    comps = mixture.null_components + mixture.alt_components
    lo = min(c.mean - 14 * c.sd for c in comps)
    hi = max(c.mean + 14 * c.sd for c in comps)
    z = np.linspace(lo, hi, n_grid)
    w = np.exp(mixture.log_density(z, "mixed")) * (z[1] - z[0])
    w[[0, -1]] *= 0.5
    t = np.asarray(marginal_locfdr(mixture, z))
    order = np.argsort(t, kind="stable")
    return _root_from_sorted(t[order], w[order], alpha)


def _mu_from_threshold(t_alpha: float, alpha: float) -> float:
    # t = (1 + mu alpha) / (1 + mu)
    if t_alpha >= 1.0:
        return 0.0
    if t_alpha <= alpha:
        return float("inf")
    return (1.0 - t_alpha) / (t_alpha - alpha)


def mfdr_policy(model: TwoGroupModel, alpha: float, n_cal: int = 10_000, rng=None, tol: float = 1e-4,
                statistic: Statistic | None = None, marginal: bool = False,
                calibration_set: CalibrationSet | None = None) -> CalibratedPolicy:
    """Single-step mFDR rule: reject ``T_i <= t_alpha``.

    For independent models scored by the marginal locFDR (or with
    ``marginal=True`` for any model, whose marginals are then used) the
    cutoff is computed by quadrature; otherwise by pooling the scores of
    ``n_cal`` Monte-Carlo draws and solving ``E V - alpha E R = 0`` on the
    empirical law.
    """
    seed = _seed_of(rng)
    if calibration_set is None and statistic is None and (marginal or isinstance(model.dependence, Independent)):
        t_alpha, note = mfdr_threshold_quadrature(model.mixture, alpha)
        diag = CalibrationDiagnostics(0.0, 0.0, 0, 0.0, seed, False, [], note or "quadrature")
    else:
        cset = calibration_set or CalibrationSet.draw(model, n_cal, rng, statistic)
        u = cset.pooled_sorted()
        t_alpha, note = _root_from_sorted(u, None, alpha)
        sel = u <= t_alpha if t_alpha > 0 else np.zeros(len(u), bool)
        per_draw = (u[sel] - alpha).sum() / cset.n
        diag = CalibrationDiagnostics(float(per_draw), 0.0, cset.n, 0.0, seed, False, [], note or "monte carlo")
    diag.evaluations = [(_mu_from_threshold(t_alpha, alpha), t_alpha)]
    return CalibratedPolicy(Criterion.MFDR, alpha, float(t_alpha), diag)


# --------------------------------------------------------------------------
# applying policies


def _threshold_rule(t: np.ndarray, cutoff: float) -> np.ndarray:
    if cutoff <= 0.0:
        return np.zeros(t.shape, dtype=np.int8)
    return (t <= cutoff).astype(np.int8)


def decide(policy: CalibratedPolicy, t: LocFdrVector) -> np.ndarray:
    """0/1 decisions in the original hypothesis order."""
    if policy.criterion is Criterion.MFDR:
        return _threshold_rule(t.t, policy.scalar)
    return step_down_decide(t, policy.scalar, policy.alpha, policy.criterion).d


def decide_batch(policy: CalibratedPolicy, t: np.ndarray) -> np.ndarray:
    """Row-wise :func:`decide` for an ``(n, K)`` array of locFDRs."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    if policy.criterion is Criterion.MFDR:
        return _threshold_rule(t, policy.scalar)
    perm = np.argsort(t, axis=1, kind="stable")
    ts = np.ascontiguousarray(np.take_along_axis(t, perm, axis=1))
    counts, _ = _kernels.stepdown_counts(ts, float(policy.scalar), float(policy.alpha),
                                         policy.criterion is Criterion.PFDR)
    return _reject_leading(perm, counts)


def _reject_leading(perm: np.ndarray, counts: np.ndarray) -> np.ndarray:
    d_sorted = (np.arange(perm.shape[1]) < counts[:, None]).astype(np.int8)
    d = np.empty_like(d_sorted)
    np.put_along_axis(d, perm, d_sorted, axis=1)
    return d


def bh(pvalues, alpha: float, pi0_adjust: float | None = None) -> np.ndarray:
    """Benjamini-Hochberg step-up.

    With ``pi0_adjust`` (the null fraction ``1 - pi``) the i-th smallest
    p-value is compared with ``i alpha / (K pi0)``.  Accepts a vector or an
    ``(n, K)`` array (row-wise).
    """
    p = np.asarray(pvalues, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    k = p.shape[1]
    pi0 = 1.0 if pi0_adjust is None else float(pi0_adjust)
    if not pi0 > 0:
        raise ValueError("pi0_adjust must be positive")
    perm = np.argsort(p, axis=1, kind="stable")
    ps = np.take_along_axis(p, perm, axis=1)
    thr = np.arange(1, k + 1) * alpha / (k * pi0)
    below = ps <= thr
    counts = np.where(below.any(axis=1), k - np.argmax(below[:, ::-1], axis=1), 0)
    d = _reject_leading(perm, counts)
    return d[0] if single else d


def est_mfdr_stepup(t_marg, alpha: float) -> np.ndarray:
    """Reject the ``k`` smallest locFDRs, ``k = max{i : mean(T_(1..i)) <= alpha}``."""
    t = np.asarray(t_marg, dtype=float)
    single = t.ndim == 1
    t = np.atleast_2d(t)
    perm = np.argsort(t, axis=1, kind="stable")
    ts = np.take_along_axis(t, perm, axis=1)
    ok = np.cumsum(ts - alpha, axis=1) <= 0
    k = t.shape[1]
    counts = np.where(ok.any(axis=1), k - np.argmax(ok[:, ::-1], axis=1), 0)
    d = _reject_leading(perm, counts)
    return d[0] if single else d
