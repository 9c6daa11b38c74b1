"""Low-rank-plus-diagonal Gaussians and composite priors over a parameter layout.

The covariance of a :class:`LowRankGaussian` is

    Sigma = scale * (0.5 * diag(diag_var) + 0.5 * D D^T / (L - 1))

and every density evaluation goes through the Woodbury identity and the
matrix determinant lemma on the ``L x L`` capacity matrix, so the cost is
``O(d L)`` per call once the capacity Cholesky factor is cached.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg

from .model import DimensionError, ParamLayout

LOG_2PI = np.log(2.0 * np.pi)


def _low_rank_normalizer(rank: int) -> float:
    # rank 1 would divide by zero; treat a single deviation as its own sample covariance
    return float(max(rank - 1, 1))


@dataclass(frozen=True, eq=False)
class LowRankGaussian:
    mean: np.ndarray
    diag_var: np.ndarray
    deviations: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        diag_var = np.ascontiguousarray(self.diag_var, dtype=np.float64)
        dev = np.asarray(self.deviations, dtype=np.float64)
        if dev.ndim == 1:
            dev = dev.reshape(-1, 0) if dev.size == 0 else dev[:, None]
        d = mean.shape[0]
        if mean.ndim != 1 or diag_var.shape != (d,):
            raise DimensionError("diag_var length", d, diag_var.shape)
        if dev.shape[0] != d:
            raise DimensionError("deviation rows", d, dev.shape)
        if not np.all(diag_var > 0):
            raise ValueError("diag_var must be strictly positive")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        for name, a in (("mean", mean), ("diag_var", diag_var), ("deviations", dev)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "diag_var", diag_var)
        object.__setattr__(self, "deviations", np.asfortranarray(dev))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.deviations.shape[1]

    @classmethod
    def isotropic(cls, mean, variance: float) -> "LowRankGaussian":
        """Rank-0 Gaussian with covariance ``variance * I`` around ``mean``."""
        mean = np.asarray(mean, dtype=np.float64)
        return cls(mean, np.full(mean.shape[0], 2.0 * variance), np.zeros((mean.shape[0], 0)))

    # Woodbury pieces: Sigma = A + B B^T
    @cached_property
    def _a_diag(self) -> np.ndarray:
        return 0.5 * self.scale * self.diag_var

    @cached_property
    def _b(self) -> np.ndarray:
        return np.sqrt(0.5 * self.scale / _low_rank_normalizer(self.rank)) * self.deviations

    @cached_property
    def _capacity_chol(self) -> np.ndarray:
        b = self._b
        cap = np.eye(self.rank) + (b / self._a_diag[:, None]).T @ b
        return linalg.cholesky(cap, lower=True)

    @cached_property
    def _logdet(self) -> float:
        ld = np.sum(np.log(self._a_diag))
        if self.rank:
            ld += 2.0 * np.sum(np.log(np.diag(self._capacity_chol)))
        return float(ld)

    def covariance(self) -> np.ndarray:
        """Dense covariance; only meant for small ``d`` (tests, diagnostics)."""
        return np.diag(self._a_diag) + self._b @ self._b.T

    def _check(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionError("parameter vector length", self.dim, w.shape)
        if not np.all(np.isfinite(w)):
            raise ValueError("parameter vector contains non-finite values")
        return w

    def precision_matvec(self, r: np.ndarray) -> np.ndarray:
        """``Sigma^{-1} r`` via Woodbury."""
        ainv_r = r / self._a_diag
        if not self.rank:
            return ainv_r
        t = self._b.T @ ainv_r
        t = linalg.cho_solve((self._capacity_chol, True), t)
        return ainv_r - (self._b @ t) / self._a_diag

    def log_density(self, w) -> float:
        r = self._check(w) - self.mean
        quad = float(r @ self.precision_matvec(r))
        return -0.5 * (self.dim * LOG_2PI + self._logdet + quad)

    def grad_log_density(self, w) -> np.ndarray:
        r = self._check(w) - self.mean
        return -self.precision_matvec(r)

    def log_density_and_grad(self, w):
        r = self._check(w) - self.mean
        p = self.precision_matvec(r)
        return -0.5 * (self.dim * LOG_2PI + self._logdet + float(r @ p)), -p

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z1 = rng.standard_normal(self.dim)
        z2 = rng.standard_normal(self.rank)
        return self.mean + np.sqrt(self._a_diag) * z1 + self._b @ z2

    def max_precision(self) -> float:
        """Upper bound on the largest eigenvalue of ``Sigma^{-1}``."""
        return float(1.0 / self._a_diag.min())

    def rescale(self, lam: float) -> "LowRankGaussian":
        return rescale(self, lam)

    def truncate(self, rank: int) -> "LowRankGaussian":
        """Keep the ``rank`` deviation columns with the largest norms."""
        if not 0 <= rank <= self.rank:
            raise ValueError(f"rank must be in [0, {self.rank}], got {rank}")
        norms = np.linalg.norm(self.deviations, axis=0)
        # stable sort on -norm breaks ties by column index
        keep = np.sort(np.argsort(-norms, kind="stable")[:rank])
        return LowRankGaussian(self.mean, self.diag_var, self.deviations[:, keep], self.scale)

    def restrict(self, indices) -> "LowRankGaussian":
        """Marginal over a subset of coordinates (exact for this family)."""
        idx = np.asarray(indices)
        return LowRankGaussian(self.mean[idx], self.diag_var[idx], self.deviations[idx], self.scale)


def rescale(prior: LowRankGaussian, lam: float) -> LowRankGaussian:
    """Same Gaussian with its (whole) covariance multiplied by ``lam`` instead of ``prior.scale``."""
    if not lam > 0:
        raise ValueError(f"scale must be positive, got {lam}")
    return LowRankGaussian(prior.mean, prior.diag_var, prior.deviations, lam)


def log_density(prior: LowRankGaussian, w) -> float:
    return prior.log_density(w)


def grad_log_density(prior: LowRankGaussian, w) -> np.ndarray:
    return prior.grad_log_density(w)


def sample(prior: LowRankGaussian, rng: np.random.Generator) -> np.ndarray:
    return prior.sample(rng)


@dataclass(frozen=True)
class IsotropicGaussian:
    """Zero-mean Gaussian with covariance ``variance * I``."""

    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")

    def log_density_and_grad(self, w):
        w = np.asarray(w, dtype=np.float64)
        d = w.shape[0]
        ld = -0.5 * (d * (LOG_2PI + np.log(self.variance)) + float(w @ w) / self.variance)
        return ld, -w / self.variance

    def sample(self, rng, dim):
        return np.sqrt(self.variance) * rng.standard_normal(dim)


@dataclass(frozen=True, eq=False)
class CompositePrior:
    """Independent prior components over the groups of a :class:`ParamLayout`.

    ``learned`` is an optional ``(LowRankGaussian, group)`` pair; every other
    group is covered by an entry of ``isotropic``.
    """

    layout: ParamLayout
    learned: tuple[LowRankGaussian, str] | None = None
    isotropic: Sequence[tuple[str, IsotropicGaussian]] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "isotropic", tuple(self.isotropic))
        covered: list[str] = []
        groups = [g for g, _ in self.isotropic]
        if self.learned is not None:
            gauss, g = self.learned
            if gauss.dim != self.layout.group_dim(g):
                raise DimensionError(f"learned prior dimension for group {g!r}",
                                     self.layout.group_dim(g), gauss.dim)
            groups.append(g)
        for g in groups:
            if g not in self.layout.groups:
                raise ValueError(f"unknown group {g!r}")
            covered += list(self.layout.groups[g])
        names = [b.name for b in self.layout.blocks]
        if sorted(covered) != sorted(names):
            extra = sorted(set(names) - set(covered))
            dup = sorted({c for c in covered if covered.count(c) > 1})
            raise ValueError(f"prior must cover each block exactly once "
                             f"(uncovered: {extra}, duplicated: {dup})")
        slices = []
        if self.learned is not None:
            slices.append((self.layout.group_indices(self.learned[1]), self.learned[0]))
        for g, iso in self.isotropic:
            slices.append((self.layout.group_indices(g), iso))
        object.__setattr__(self, "_parts", tuple(slices))

    def log_density_and_grad(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.layout.total_dim,):
            raise DimensionError("parameter vector length", self.layout.total_dim, w.shape)
        total = 0.0
        grad = np.empty_like(w)
        for idx, comp in self._parts:
            lp, g = comp.log_density_and_grad(w[idx])
            total += lp
            grad[idx] = g
        return total, grad

    def log_density(self, w) -> float:
        return self.log_density_and_grad(w)[0]

    def max_precision(self) -> float:
        out = 0.0
        for _, comp in self._parts:
            p = comp.max_precision() if isinstance(comp, LowRankGaussian) else 1.0 / comp.variance
            out = max(out, p)
        return out

    def diag_scale(self) -> np.ndarray:
        """Per-coordinate variance of the diagonal part of each component.

        Used as a diagonal preconditioner: it whitens the prior so that its
        precision has eigenvalues at most one.
        """
        out = np.empty(self.layout.total_dim)
        for idx, comp in self._parts:
            out[idx] = comp._a_diag if isinstance(comp, LowRankGaussian) else comp.variance
        return out

    def mean(self) -> np.ndarray:
        m = np.zeros(self.layout.total_dim)
        if self.learned is not None:
            m[self.layout.group_indices(self.learned[1])] = self.learned[0].mean
        return m

    def sample(self, rng):
        out = np.empty(self.layout.total_dim)
        for idx, comp in self._parts:
            out[idx] = comp.sample(rng) if isinstance(comp, LowRankGaussian) else comp.sample(rng, len(idx))
        return out


def composite_log_density_and_grad(prior: CompositePrior, w):
    return prior.log_density_and_grad(w)
