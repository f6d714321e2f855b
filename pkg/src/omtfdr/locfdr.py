"""Exact local false discovery rates ``T_i(z) = Pr(h_i = 0 | z)``.

Engines:

* :func:`locfdr_independent` -- per-coordinate marginal posterior, O(K).
* :func:`locfdr_block` -- block-diagonal Gaussian dependence; enumerates
  the ``2**s`` state configurations of each block once.
* :func:`locfdr_equicorrelated` -- equi-correlated Gaussian statistics via
  the count-indexed sums ``S(L, k)``; O(K^2) per numerator, O(K^3) total.
* :func:`locfdr_bruteforce` -- enumeration of all ``2**K`` configurations
  against the full joint density.  Test oracle only.

All sums are taken in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .model import (Blocks, Equicorrelated, Independent, MarginalMixture, NormalComponent, TwoGroupModel,
                    _block_groups)

__all__ = [
    "LocFdrVector",
    "OpCounter",
    "EquicorrParams",
    "EquicorrWorkspace",
    "BlockTooLargeError",
    "marginal_locfdr",
    "locfdr_independent",
    "locfdr_block",
    "locfdr_equicorrelated",
    "locfdr_bruteforce",
    "locfdr",
    "locfdr_batch",
    "DEFAULT_MAX_BLOCK_SIZE",
    "BRUTEFORCE_MAX_K",
]

DEFAULT_MAX_BLOCK_SIZE = 20
BRUTEFORCE_MAX_K = 20
_LOG_2PI = np.log(2.0 * np.pi)


class BlockTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class LocFdrVector:
    """locFDR values with the ascending sort permutation (ties by index)."""

    t: np.ndarray
    sort_perm: np.ndarray

    @classmethod
    def from_values(cls, t) -> "LocFdrVector":
        t = np.asarray(t, dtype=float)
        if t.ndim != 1:
            raise ValueError("locFDR vector must be one-dimensional")
        if np.any(np.isnan(t)) or np.any(t < 0) or np.any(t > 1):
            raise ValueError("locFDR values must lie in [0, 1]")
        return cls(t, np.argsort(t, kind="stable"))

    @property
    def sorted(self) -> np.ndarray:
        return self.t[self.sort_perm]

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class OpCounter:
    """Work counters for the dependent engines."""

    density_evaluations: int = 0
    cell_updates: int = 0


def _log_prior(n_alt, n_total, pi):
    with np.errstate(divide="ignore", invalid="ignore"):
        la = np.log(pi) if pi > 0 else -np.inf
        ln = np.log1p(-pi) if pi < 1 else -np.inf
        n_alt = np.asarray(n_alt, dtype=float)
        n_null = n_total - n_alt
        return np.where(n_alt > 0, n_alt * la, 0.0) + np.where(n_null > 0, n_null * ln, 0.0)


def marginal_locfdr(mixture: MarginalMixture, z):
    """Posterior null probability of a single statistic under ``mixture``."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        l0 = (np.log1p(-mixture.pi) if mixture.pi < 1 else -np.inf) + mixture.log_density(z, "null")
        l1 = (np.log(mixture.pi) if mixture.pi > 0 else -np.inf) + mixture.log_density(z, "alt")
    if np.any(np.isneginf(l0) & np.isneginf(l1)):
        raise ValueError("undefined posterior: both weighted densities vanish")
    with np.errstate(invalid="ignore"):
        t = expit(l0 - l1)
    return float(t) if t.ndim == 0 else t


def locfdr_independent(model: TwoGroupModel, z) -> LocFdrVector:
    z = _check_z(model, z)
    return LocFdrVector.from_values(marginal_locfdr(model.mixture, z))


# --------------------------------------------------------------------------
# block dependence


def _block_locfdr_2d(dep: Blocks, pi: float, z: np.ndarray, max_block_size: int,
                     counter: OpCounter | None) -> np.ndarray:
    too_big = [s for s in dep.block_sizes if s > max_block_size]
    if too_big:
        raise BlockTooLargeError(
            f"block exceeds enumeration limit: size {max(too_big)} > max_block_size {max_block_size}")
    n = z.shape[0]
    out = np.empty(z.shape)
    for members in _block_groups(dep).values():
        s = dep.block_sizes[members[0]]
        idx = np.stack([dep.block_indices(l) for l in members])     # (nb, s)
        if s == 1:
            # a singleton block is an independent coordinate
            out[:, idx[:, 0]] = marginal_locfdr(_singleton_mixture(dep, members[0], pi), z[:, idx[:, 0]])
            if counter is not None:
                counter.density_evaluations += n * len(members) * 2
            continue
        configs = (np.arange(2 ** s)[:, None] >> np.arange(s)) & 1    # (C, s)
        log_w = _log_prior(configs.sum(axis=1), s, pi)
        # per configuration: inverse Cholesky factor, log-determinant, mean
        facs = []
        for c, hc in enumerate(configs):
            chol = np.linalg.cholesky(dep.covariance(hc, members[0]))
            facs.append((np.linalg.inv(chol), 2.0 * np.log(np.diag(chol)).sum(), dep.mean(hc, members[0])))
        rows = max(1, int(2e7 // (len(members) * len(configs) * s)))
        for lo in range(0, n, rows):
            zb = z[lo:lo + rows][:, idx]                              # (r, nb, s)
            lj = np.empty(zb.shape[:2] + (len(configs),))
            for c, (linv, logdet, mean) in enumerate(facs):
                y = (zb - mean) @ linv.T
                lj[..., c] = log_w[c] - 0.5 * (np.einsum("...i,...i->...", y, y) + logdet + s * _LOG_2PI)
            if counter is not None:
                counter.density_evaluations += lj.shape[0] * lj.shape[1] * len(configs)
            log_total = logsumexp(lj, axis=-1)
            tb = np.empty(zb.shape)
            for j in range(s):
                tb[..., j] = np.exp(logsumexp(lj[..., configs[:, j] == 0], axis=-1) - log_total)
            out[lo:lo + rows][:, idx] = tb
    return np.clip(out, 0.0, 1.0)


def _singleton_mixture(dep: Blocks, l: int, pi: float) -> MarginalMixture:
    parts = []
    for hc in ((0,), (1,)):
        sd = float(np.sqrt(dep.covariance(np.array(hc), l)[0, 0]))
        parts.append((NormalComponent(1.0, float(dep.mean(np.array(hc), l)[0]), sd),))
    return MarginalMixture(pi, parts[0], parts[1])


def locfdr_block(model: TwoGroupModel, z, max_block_size: int = DEFAULT_MAX_BLOCK_SIZE,
                 counter: OpCounter | None = None) -> LocFdrVector:
    """locFDRs under block dependence.

    Each block is handled on its own: the ``2**s`` configuration densities
    ``g(z_l | h_l)`` are evaluated once and reused for every coordinate of
    the block.  ``counter.density_evaluations`` grows by exactly ``2**s``
    per block.
    """
    if not isinstance(model.dependence, Blocks):
        raise TypeError("locfdr_block requires a Blocks dependence")
    z = _check_z(model, z)
    t = _block_locfdr_2d(model.dependence, model.pi, z[None, :], max_block_size, counter)[0]
    return LocFdrVector.from_values(t)


# --------------------------------------------------------------------------
# equi-correlation


@dataclass(frozen=True)
class EquicorrParams:
    a: float
    b: float
    delta: float
    s_z: float
    s_k_table: np.ndarray

    @classmethod
    def build(cls, dep: Equicorrelated, z: np.ndarray) -> "EquicorrParams":
        k = len(z)
        a, b = dep.precision_entries(k)
        counts = np.arange(k + 1, dtype=float)
        return cls(a, b, dep.delta, float(z.sum()), a * counts + b * counts * (counts - 1))


@dataclass
class EquicorrWorkspace:
    """Scratch tables for one equi-correlated evaluation.

    ``log_s_table[L, k]`` holds ``log S(L, k)``; ``log_s_excl[i, k]`` holds
    ``log S^(i)(K, k)``, the sum that skips coordinate ``i``.
    """

    log_s_table: np.ndarray
    log_s_excl: np.ndarray


def _equicorr_tables(params: EquicorrParams, z: np.ndarray,
                     counter: OpCounter | None) -> EquicorrWorkspace:
    k = len(z)
    step = params.delta * (params.b * params.s_z + (params.a - params.b) * z)
    table = np.full((k + 1, k + 1), -np.inf)
    table[:, 0] = 0.0
    # all K "skip one coordinate" families advance together, one row each
    excl = np.full((k, k + 1), -np.inf)
    excl[:, 0] = 0.0
    cells = 0
    for L in range(1, k + 1):
        prev = table[L - 1]
        table[L] = prev
        table[L, 1:L + 1] = np.logaddexp(prev[1:L + 1], prev[0:L] + step[L - 1])
        skipped = excl[L - 1, 1:L + 1].copy()
        excl[:, 1:L + 1] = np.logaddexp(excl[:, 1:L + 1], excl[:, 0:L] + step[L - 1])
        excl[L - 1, 1:L + 1] = skipped
        cells += L * (k + 1)
    if counter is not None:
        counter.cell_updates += cells
    return EquicorrWorkspace(table, excl)


def locfdr_equicorrelated(model: TwoGroupModel, z, counter: OpCounter | None = None,
                          workspace_out: list | None = None) -> LocFdrVector:
    """locFDRs when all statistics share variance and pairwise correlation.

    The configuration sums depend on ``h`` only through ``k = 1'h`` and
    ``h'z``, which the ``S(L, k)`` recursion accumulates coordinate by
    coordinate.  The Bernoulli prior weight and the quadratic term
    ``-delta^2 s_k / 2`` are attached per ``k`` at the end.
    """
    dep = model.dependence
    if not isinstance(dep, Equicorrelated):
        raise TypeError("locfdr_equicorrelated requires an Equicorrelated dependence")
    z = _check_z(model, z)
    k = len(z)
    params = EquicorrParams.build(dep, z)
    ws = _equicorr_tables(params, z, counter)
    counts = np.arange(k + 1)
    per_k = _log_prior(counts, k, model.pi) - 0.5 * params.delta ** 2 * params.s_k_table
    log_den = logsumexp(per_k + ws.log_s_table[k])
    log_num = logsumexp(per_k[None, :k] + ws.log_s_excl[:, :k], axis=1)
    if workspace_out is not None:
        workspace_out.append(ws)
    return LocFdrVector.from_values(np.clip(np.exp(log_num - log_den), 0.0, 1.0))


# --------------------------------------------------------------------------
# brute force oracle


def _configs(k: int, lo: int, hi: int) -> np.ndarray:
    return ((np.arange(lo, hi)[:, None] >> np.arange(k)) & 1).astype(np.int8)


def _gaussian_covs(model: TwoGroupModel, h: np.ndarray):
    dep = model.dependence
    if isinstance(dep, Equicorrelated):
        return dep.delta * h, None
    if dep.covariance_fn is None:
        base = np.zeros((model.k, model.k))
        for l in range(len(dep.block_sizes)):
            idx = dep.block_indices(l)
            base[np.ix_(idx, idx)] = dep.rho[l]
        np.fill_diagonal(base, 0.0)
        covs = np.broadcast_to(base, (len(h), model.k, model.k)).copy()
        diag = np.where(h == 1, dep.alt_var, dep.null_var)
        covs[:, np.arange(model.k), np.arange(model.k)] = diag
        return dep.delta * h, covs
    means, covs = [], []
    for row in h:
        m, c = model.conditional_gaussian(row)
        means.append(m)
        covs.append(c)
    return np.array(means), np.array(covs)


def locfdr_bruteforce(model: TwoGroupModel, z) -> LocFdrVector:
    """Sum ``Pr(h) g(z | h)`` over all ``2**K`` state vectors."""
    z = _check_z(model, z)
    k = len(z)
    if k > BRUTEFORCE_MAX_K:
        raise ValueError(f"brute force limited to K <= {BRUTEFORCE_MAX_K}, got {k}")
    dep = model.dependence
    if isinstance(dep, Independent):
        lg0 = model.mixture.log_density(z, "null")
        lg1 = model.mixture.log_density(z, "alt")
    elif isinstance(dep, Equicorrelated):
        chol = np.linalg.cholesky(dep.covariance(k))
        linv = np.linalg.inv(chol)
        logdet_eq = 2.0 * np.log(np.diag(chol)).sum()

    log_total = -np.inf
    log_null = np.full(k, -np.inf)
    chunk = 4096
    for lo in range(0, 2 ** k, chunk):
        h = _configs(k, lo, min(2 ** k, lo + chunk))
        if isinstance(dep, Independent):
            ll = np.where(h == 1, lg1, lg0).sum(axis=1)
        else:
            means, covs = _gaussian_covs(model, h)
            r = z - means
            if covs is None:
                y = r @ linv.T
                ll = -0.5 * (np.einsum("ij,ij->i", y, y) + logdet_eq + k * _LOG_2PI)
            else:
                sign, logdet = np.linalg.slogdet(covs)
                if np.any(sign <= 0):
                    raise ValueError("covariance not positive definite")
                sol = np.linalg.solve(covs, r[..., None])[..., 0]
                ll = -0.5 * (np.einsum("ij,ij->i", r, sol) + logdet + k * _LOG_2PI)
        lj = ll + _log_prior(h.sum(axis=1), k, model.pi)
        log_total = np.logaddexp(log_total, logsumexp(lj))
        masked = np.where(h == 0, lj[:, None], -np.inf)
        log_null = np.logaddexp(log_null, logsumexp(masked, axis=0))
    return LocFdrVector.from_values(np.clip(np.exp(log_null - log_total), 0.0, 1.0))


# --------------------------------------------------------------------------
# dispatch


def _check_z(model: TwoGroupModel, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or len(z) != model.k:
        raise ValueError(f"expected a z vector of length K={model.k}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z contains non-finite values")
    return z


def locfdr(model: TwoGroupModel, z, max_block_size: int = DEFAULT_MAX_BLOCK_SIZE,
           counter: OpCounter | None = None) -> LocFdrVector:
    """Pick the exact engine matching the model's dependence structure."""
    dep = model.dependence
    if isinstance(dep, Independent):
        return locfdr_independent(model, z)
    if isinstance(dep, Blocks):
        return locfdr_block(model, z, max_block_size, counter)
    if isinstance(dep, Equicorrelated):
        return locfdr_equicorrelated(model, z, counter)
    raise TypeError(f"unsupported dependence {dep!r}")


def locfdr_batch(model: TwoGroupModel, z: np.ndarray, marginal: bool = False,
                 max_block_size: int = DEFAULT_MAX_BLOCK_SIZE) -> np.ndarray:
    """locFDRs for each row of an ``(n, K)`` array.

    With ``marginal=True`` every coordinate is scored by its marginal
    locFDR, ignoring the dependence.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    dep = model.dependence
    if marginal or isinstance(dep, Independent):
        return np.asarray(marginal_locfdr(model.mixture, z))
    if isinstance(dep, Blocks):
        return _block_locfdr_2d(dep, model.pi, z, max_block_size, None)
    return np.stack([locfdr_equicorrelated(model, row).t for row in z])
