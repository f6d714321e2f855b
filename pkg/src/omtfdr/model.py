"""The general two-group model: prior, component densities, dependence.

Hypothesis states ``h_i`` are iid Bernoulli(pi); the statistics ``z`` are
drawn from ``g(z | h)``.  Three dependence structures are supported:
independent coordinates with normal-mixture marginals, block-diagonal
Gaussian dependence and equi-correlated Gaussian dependence.

Densities are combined in log space internally; the public functions
return linear-space values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

__all__ = [
    "NormalComponent",
    "MarginalMixture",
    "Independent",
    "Blocks",
    "Equicorrelated",
    "TwoGroupModel",
    "Sample",
    "marginal_density",
    "log_marginal_density",
    "sample",
    "sample_batch",
    "sample_z",
    "child_stream",
    "ModelError",
]

_WEIGHT_TOL = 1e-12


class ModelError(ValueError):
    """Raised for an invalid model specification."""


@dataclass(frozen=True)
class NormalComponent:
    weight: float
    mean: float
    sd: float

    def __post_init__(self):
        if not (0.0 <= self.weight <= 1.0):
            raise ModelError(f"component weight must lie in [0, 1], got {self.weight}")
        if not (self.sd > 0.0 and np.isfinite(self.sd)):
            raise ModelError(f"component sd must be positive, got {self.sd}")
        if not np.isfinite(self.mean):
            raise ModelError(f"component mean must be finite, got {self.mean}")


def _as_components(comps) -> tuple[NormalComponent, ...]:
    out = []
    for c in comps:
        if isinstance(c, NormalComponent):
            out.append(c)
        elif isinstance(c, dict):
            out.append(NormalComponent(float(c.get("weight", 1.0)), float(c["mean"]), float(c["sd"])))
        else:
            out.append(NormalComponent(*map(float, c)))
    return tuple(out)


_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def _log_components(comps: Sequence[NormalComponent], z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if len(comps) == 1 and comps[0].weight == 1.0:
        c = comps[0]
        u = (z - c.mean) / c.sd
        return -0.5 * u * u - (np.log(c.sd) + _HALF_LOG_2PI)
    with np.errstate(divide="ignore"):
        terms = [np.log(c.weight) + norm.logpdf(z, c.mean, c.sd) for c in comps]
    return logsumexp(np.stack(terms), axis=0)


@dataclass(frozen=True)
class MarginalMixture:
    """Two-group marginal law ``(1 - pi) g(z|h=0) + pi g(z|h=1)``.

    Each state density is itself a finite mixture of normals whose
    weights sum to one.
    """

    pi: float
    null_components: tuple[NormalComponent, ...]
    alt_components: tuple[NormalComponent, ...]

    def __post_init__(self):
        object.__setattr__(self, "null_components", _as_components(self.null_components))
        object.__setattr__(self, "alt_components", _as_components(self.alt_components))
        if not (0.0 <= self.pi <= 1.0):
            raise ModelError(f"pi must lie in [0, 1], got {self.pi}")
        for name, comps in (("null", self.null_components), ("alt", self.alt_components)):
            if len(comps) == 0:
                raise ModelError(f"{name} component list is empty")
            total = sum(c.weight for c in comps)
            if abs(total - 1.0) > _WEIGHT_TOL:
                raise ModelError(f"{name} component weights sum to {total!r}, expected 1")

    @classmethod
    def normal(cls, pi: float, alt_mean: float, alt_sd: float = 1.0,
               null_mean: float = 0.0, null_sd: float = 1.0) -> "MarginalMixture":
        return cls(pi, (NormalComponent(1.0, null_mean, null_sd),),
                   (NormalComponent(1.0, alt_mean, alt_sd),))

    def log_density(self, z, state: str = "mixed") -> np.ndarray:
        if state == "null":
            return _log_components(self.null_components, z)
        if state == "alt":
            return _log_components(self.alt_components, z)
        if state == "mixed":
            with np.errstate(divide="ignore"):
                l0 = np.log1p(-self.pi) + _log_components(self.null_components, z)
                l1 = np.log(self.pi) + _log_components(self.alt_components, z)
            return np.logaddexp(l0, l1)
        raise ValueError(f"unknown state {state!r}; expected 'null', 'alt' or 'mixed'")

    def null_cdf(self, z) -> np.ndarray:
        """Left-tail null CDF, i.e. the one-sided p-value for small ``z``."""
        z = np.asarray(z, dtype=float)
        return sum(c.weight * norm.cdf(z, c.mean, c.sd) for c in self.null_components)

    def to_dict(self) -> dict:
        comp = lambda cs: [{"weight": c.weight, "mean": c.mean, "sd": c.sd} for c in cs]
        return {"pi": self.pi, "null": comp(self.null_components), "alt": comp(self.alt_components)}


def log_marginal_density(mixture: MarginalMixture, z, state: str = "mixed") -> np.ndarray:
    return mixture.log_density(z, state)


def marginal_density(mixture: MarginalMixture, z, state: str = "mixed"):
    """Density of ``z`` under the null, the alternative, or the pi-mixture.

    Returns a float for scalar ``z`` and an array otherwise.
    """
    out = np.exp(mixture.log_density(z, state))
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# dependence structures


@dataclass(frozen=True)
class Independent:
    kind = "independent"

    def validate(self, k: int) -> None:
        pass


@dataclass(frozen=True)
class Blocks:
    """Block-diagonal Gaussian dependence.

    Within block ``l`` the statistics are multivariate normal with mean
    ``delta * h_l`` and a covariance that may depend on ``h_l``.  The
    default builder puts ``null_var`` / ``alt_var`` on the diagonal
    according to each coordinate's state and ``rho[l]`` (a covariance,
    not a correlation) off the diagonal.  A custom ``covariance_fn(h_block,
    block_index)`` replaces the default builder.
    """

    block_sizes: tuple[int, ...]
    rho: tuple[float, ...]
    delta: float
    null_var: float = 1.0
    alt_var: float = 1.0
    covariance_fn: Callable[[np.ndarray, int], np.ndarray] | None = field(default=None, compare=False)

    kind = "blocks"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.block_sizes)
        rho = self.rho
        if np.ndim(rho) == 0:
            rho = (float(rho),) * len(sizes)
        rho = tuple(float(r) for r in rho)
        object.__setattr__(self, "block_sizes", sizes)
        object.__setattr__(self, "rho", rho)
        if len(rho) != len(sizes):
            raise ModelError(f"got {len(rho)} rho values for {len(sizes)} blocks")
        if any(s < 1 for s in sizes):
            raise ModelError("block sizes must be >= 1")
        if not (self.null_var > 0 and self.alt_var > 0):
            raise ModelError("block variances must be positive")

    @classmethod
    def uniform(cls, k: int, block_size: int, rho, delta: float, **kw) -> "Blocks":
        if k % block_size:
            raise ModelError(f"K={k} is not a multiple of block size {block_size}")
        return cls((block_size,) * (k // block_size), rho, delta, **kw)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.block_sizes)[:-1]]).astype(int)

    def block_indices(self, l: int) -> np.ndarray:
        start = int(self.starts[l])
        return np.arange(start, start + self.block_sizes[l])

    def covariance(self, h_block, l: int) -> np.ndarray:
        h_block = np.asarray(h_block)
        if self.covariance_fn is not None:
            return np.asarray(self.covariance_fn(h_block, l), dtype=float)
        s = h_block.shape[-1]
        cov = np.full((s, s), self.rho[l])
        np.fill_diagonal(cov, np.where(h_block == 1, self.alt_var, self.null_var))
        return cov

    def mean(self, h_block, l: int) -> np.ndarray:
        return self.delta * np.asarray(h_block, dtype=float)

    def group_key(self, l: int):
        """Blocks sharing a key have identical conditional laws."""
        if self.covariance_fn is not None:
            return ("fn", l)
        return (self.block_sizes[l], self.rho[l])

    def validate(self, k: int) -> None:
        if sum(self.block_sizes) != k:
            raise ModelError(f"block sizes sum to {sum(self.block_sizes)}, expected K={k}")
        if self.covariance_fn is None:
            # Raising a diagonal entry preserves positive definiteness, so the
            # all-min-variance configuration is the binding one.
            v = min(self.null_var, self.alt_var)
            for s, r in set(zip(self.block_sizes, self.rho)):
                if not (v - r > 0 and v + (s - 1) * r > 0):
                    raise ModelError(
                        f"block covariance not positive definite (size {s}, rho {r}, var {v})")
            return
        n_checks = sum(2 ** s for s in self.block_sizes)
        if n_checks > 200_000:
            return
        for l, s in enumerate(self.block_sizes):
            for code in range(2 ** s):
                hb = (code >> np.arange(s)) & 1
                try:
                    np.linalg.cholesky(self.covariance(hb, l))
                except np.linalg.LinAlgError:
                    raise ModelError(f"covariance of block {l} not positive definite for h={hb.tolist()}") from None


@dataclass(frozen=True)
class Equicorrelated:
    """Gaussian statistics with common variance ``sigma2``, common pairwise
    correlation ``rho`` and mean shift ``delta`` on non-null coordinates."""

    rho: float
    sigma2: float
    delta: float

    kind = "equicorrelated"

    def validate(self, k: int) -> None:
        if not self.sigma2 > 0:
            raise ModelError(f"sigma2 must be positive, got {self.sigma2}")
        lower = -1.0 / (k - 1) if k > 1 else -1.0
        if not (lower < self.rho < 1.0):
            raise ModelError(
                f"rho={self.rho} outside the positive-definite range ({lower:.6g}, 1) for K={k}")

    def covariance(self, k: int) -> np.ndarray:
        cov = np.full((k, k), self.rho * self.sigma2)
        np.fill_diagonal(cov, self.sigma2)
        return cov

    def precision_entries(self, k: int) -> tuple[float, float]:
        """Diagonal and off-diagonal entries of the inverse covariance."""
        rho, s2 = self.rho, self.sigma2
        denom = s2 * (rho * (k - 1) + 1.0) * (rho - 1.0)
        return (-1.0 - rho * (k - 2)) / denom, rho / denom


DependenceSpec = Union[Independent, Blocks, Equicorrelated]


@dataclass(frozen=True)
class TwoGroupModel:
    """K hypotheses with iid Bernoulli(pi) states and ``Z | h ~ g(z | h)``.

    ``mixture`` always describes the marginal law of a single coordinate;
    for the Gaussian dependence structures it is derived from the
    dependence parameters by the factory constructors.
    """

    k: int
    mixture: MarginalMixture
    dependence: DependenceSpec = field(default_factory=Independent)

    def __post_init__(self):
        if int(self.k) < 1:
            raise ModelError(f"K must be >= 1, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        self.dependence.validate(self.k)

    @property
    def pi(self) -> float:
        return self.mixture.pi

    @classmethod
    def iid(cls, k: int, pi: float, alt_mean: float, alt_sd: float = 1.0,
            null_mean: float = 0.0, null_sd: float = 1.0) -> "TwoGroupModel":
        return cls(k, MarginalMixture.normal(pi, alt_mean, alt_sd, null_mean, null_sd), Independent())

    @classmethod
    def blocks(cls, k: int, pi: float, block_size: int, rho, delta: float,
               null_var: float = 1.0, alt_var: float = 1.0) -> "TwoGroupModel":
        dep = Blocks.uniform(k, block_size, rho, delta, null_var=null_var, alt_var=alt_var)
        mix = MarginalMixture.normal(pi, delta, np.sqrt(alt_var), 0.0, np.sqrt(null_var))
        return cls(k, mix, dep)

    @classmethod
    def equicorrelated(cls, k: int, pi: float, rho: float, sigma2: float, delta: float) -> "TwoGroupModel":
        sd = float(np.sqrt(sigma2))
        return cls(k, MarginalMixture.normal(pi, delta, sd, 0.0, sd), Equicorrelated(rho, sigma2, delta))

    def marginal_model(self) -> "TwoGroupModel":
        """The same marginals with the dependence dropped."""
        return TwoGroupModel(self.k, self.mixture, Independent())

    def conditional_gaussian(self, h) -> tuple[np.ndarray, np.ndarray]:
        """Mean vector and full K x K covariance of ``z | h``."""
        h = np.asarray(h)
        dep = self.dependence
        if isinstance(dep, Equicorrelated):
            return dep.delta * h.astype(float), dep.covariance(self.k)
        if isinstance(dep, Blocks):
            mean = np.empty(self.k)
            cov = np.zeros((self.k, self.k))
            for l in range(len(dep.block_sizes)):
                idx = dep.block_indices(l)
                mean[idx] = dep.mean(h[idx], l)
                cov[np.ix_(idx, idx)] = dep.covariance(h[idx], l)
            return mean, cov
        raise TypeError("independent models have no joint Gaussian form in general")


@dataclass(frozen=True)
class Sample:
    h: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.z.shape:
            raise ValueError("h and z must have the same length")


# --------------------------------------------------------------------------
# random streams and sampling


def child_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under ``seed``.

    Replication ``r`` of an experiment uses ``child_stream(seed, 1, r)``, so
    any replication can be regenerated on its own.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def _draw_components(comps, shape, rng):
    weights = np.array([c.weight for c in comps])
    means = np.array([c.mean for c in comps])
    sds = np.array([c.sd for c in comps])
    if len(comps) == 1:
        return np.full(shape, means[0]), np.full(shape, sds[0])
    idx = np.searchsorted(np.cumsum(weights)[:-1], rng.random(shape), side="right")
    return means[idx], sds[idx]


def sample_z(model: TwoGroupModel, h, rng: np.random.Generator) -> np.ndarray:
    """Draw statistics given hypothesis states ``h`` (shape ``(K,)`` or ``(n, K)``)."""
    h = np.asarray(h)
    single = h.ndim == 1
    h2 = np.atleast_2d(h).astype(np.int8)
    n, k = h2.shape
    if k != model.k:
        raise ValueError(f"h has {k} columns, model has K={model.k}")
    dep = model.dependence
    if isinstance(dep, Independent):
        mix = model.mixture
        m0, s0 = _draw_components(mix.null_components, h2.shape, rng)
        m1, s1 = _draw_components(mix.alt_components, h2.shape, rng)
        eps = rng.standard_normal(h2.shape)
        z = np.where(h2 == 1, m1 + s1 * eps, m0 + s0 * eps)
    elif isinstance(dep, Equicorrelated):
        eps = rng.standard_normal(h2.shape)
        ebar = eps.mean(axis=1, keepdims=True)
        sd = np.sqrt(dep.sigma2)
        noise = sd * (np.sqrt(1.0 - dep.rho) * (eps - ebar) + np.sqrt(1.0 + (k - 1) * dep.rho) * ebar)
        z = dep.delta * h2 + noise
    elif isinstance(dep, Blocks):
        eps = rng.standard_normal(h2.shape)
        z = np.empty(h2.shape)
        for key, members in _block_groups(dep).items():
            s = dep.block_sizes[members[0]]
            idx = np.stack([dep.block_indices(l) for l in members])   # (nb, s)
            hb = h2[:, idx]                                            # (n, nb, s)
            codes = hb.astype(np.int64) @ (1 << np.arange(s))
            eb = eps[:, idx]
            out = np.empty(eb.shape)
            for code in np.unique(codes):
                sel = codes == code
                hc = (code >> np.arange(s)) & 1
                chol = np.linalg.cholesky(dep.covariance(hc, members[0]))
                out[sel] = eb[sel] @ chol.T + dep.mean(hc, members[0])
            z[:, idx] = out
    else:
        raise TypeError(f"unsupported dependence {dep!r}")
    return z[0] if single else z


def _block_groups(dep: Blocks) -> dict:
    groups: dict = {}
    for l in range(len(dep.block_sizes)):
        groups.setdefault(dep.group_key(l), []).append(l)
    return groups


def sample_batch(model: TwoGroupModel, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent draws of ``(h, z)`` as ``(n, K)`` arrays."""
    h = (rng.random((n, model.k)) < model.pi).astype(np.int8)
    return h, sample_z(model, h, rng)


def sample(model: TwoGroupModel, rng: np.random.Generator) -> Sample:
    h, z = sample_batch(model, rng, 1)
    return Sample(h[0], z[0])
