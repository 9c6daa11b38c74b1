"""Loss-surface diagnostics around a learned prior.

Top singular directions of the prior's deviation matrix, filter-normalized
perturbation scans and the rank / scale ablation drivers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import FEATURE_EXTRACTOR, HEAD, MlpModel, ParamLayout, cross_entropy_from_logits
from .prior import LowRankGaussian, rescale


@dataclass
class DirectionSet:
    directions: list[np.ndarray]
    origin: str  # "top_singular" or "random"
    k: int
    seed: int | None = None
    singular_values: np.ndarray | None = None


@dataclass
class ScanResult:
    grid: np.ndarray
    losses: np.ndarray  # (n_directions, len(grid))


def top_singular_directions(prior: LowRankGaussian, k: int) -> DirectionSet:
    """Leading left singular vectors of the deviation matrix.

    Computed from the eigendecomposition of the ``L x L`` Gram matrix.
    """
    if not 0 <= k <= prior.rank:
        raise ValueError(f"k={k} exceeds the prior rank {prior.rank}")
    d = prior.deviations
    evals, evecs = np.linalg.eigh(d.T @ d)
    order = np.argsort(evals)[::-1][:k]
    s = np.sqrt(np.maximum(evals[order], 0.0))
    if k and s[-1] <= 0:
        raise ValueError("requested directions span a null space of the deviation matrix")
    u = (d @ evecs[:, order]) / s
    return DirectionSet([u[:, i].copy() for i in range(k)], "top_singular", k, None, s)


def random_directions(dim: int, k: int, seed: int) -> DirectionSet:
    rng = np.random.default_rng(seed)
    dirs = [v / np.linalg.norm(v) for v in rng.standard_normal((k, dim))]
    return DirectionSet(dirs, "random", k, seed)


def _filters(layout: ParamLayout):
    for b in layout.blocks:
        if len(b.shape) == 2:
            rows, cols = b.shape
            for r in range(rows):
                yield slice(b.offset + r * cols, b.offset + (r + 1) * cols)
        else:
            yield b.slice


def filter_normalize(direction, reference, layout: ParamLayout) -> np.ndarray:
    """Rescale each filter of ``direction`` to the norm of the same filter in ``reference``.

    Filters are rows of weight matrices; each bias block counts as one filter.
    """
    d = np.asarray(direction, dtype=np.float64)
    w = np.asarray(reference, dtype=np.float64)
    out = d.copy()
    for sl in _filters(layout):
        nd = np.linalg.norm(d[sl])
        if nd > 0:
            out[sl] = d[sl] * (np.linalg.norm(w[sl]) / nd)
    return out


def embed(direction, layout: ParamLayout, group: str = FEATURE_EXTRACTOR) -> np.ndarray:
    """Lift a direction over one group to the full parameter space (zeros elsewhere)."""
    out = np.zeros(layout.total_dim)
    out[layout.group_indices(group)] = direction
    return out


def perturbation_scan(model: MlpModel | None, base, directions: DirectionSet, grid, testset=None,
                      frozen_head: bool = True, loss_fn: Callable | None = None,
                      layout: ParamLayout | None = None, normalize: bool = True) -> ScanResult:
    """Test loss at ``base + t * filter_normalize(direction)`` for every direction and ``t``.

    ``testset`` is ``(inputs, labels)`` scored by mean cross-entropy unless a
    ``loss_fn(w)`` is given.  Directions over the feature-extractor group only
    are embedded into the full space first.
    """
    base = np.asarray(base, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    if layout is None and model is not None:
        layout = model.layout
    if loss_fn is None:
        x, y = testset

        def loss_fn(w):
            return cross_entropy_from_logits(model.forward(w, x), y)[0]

    base_loss = loss_fn(base)
    losses = np.empty((len(directions.directions), grid.size))
    for i, d in enumerate(directions.directions):
        d = np.asarray(d, dtype=np.float64)
        if layout is not None and d.size != base.size:
            d = embed(d, layout)
        if layout is not None and frozen_head and HEAD in layout.groups:
            d = d.copy()
            d[layout.group_indices(HEAD)] = 0.0
        if normalize and layout is not None:
            d = filter_normalize(d, base, layout)
        for j, t in enumerate(grid):
            losses[i, j] = base_loss if t == 0 else loss_fn(base + t * d)
    return ScanResult(grid, losses)


def _summarize(values):
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _grid_table(keys, priors, run, seeds, pool):
    # flat job list in key-major order; any executor's map keeps that order
    job_priors = [p for p in priors for _ in seeds]
    job_seeds = [s for _ in priors for s in seeds]
    mapper = pool.map if pool is not None else map
    results = list(mapper(run, job_priors, job_seeds))
    table = []
    for i, k in enumerate(keys):
        errs = results[i * len(seeds):(i + 1) * len(seeds)]
        mean, se = _summarize(errs)
        table.append({"key": k, "mean_error": mean, "se": se, "errors": list(errs)})
    return table


def rank_ablation(prior: LowRankGaussian, ranks: Sequence[int],
                  run: Callable[[LowRankGaussian, int], float], seeds: Sequence[int],
                  pool=None) -> list[dict]:
    """Downstream error for the prior truncated to each rank.

    ``run(prior, seed)`` performs one downstream inference and returns its
    test error; with a process pool it must be picklable.  Rows are ordered
    as ``ranks``.
    """
    for r in ranks:
        if not 0 <= r <= prior.rank:
            raise ValueError(f"rank {r} outside [0, {prior.rank}]")
    rows = _grid_table(list(ranks), [prior.truncate(r) for r in ranks], run, list(seeds), pool)
    for row in rows:
        row["rank"] = row.pop("key")
    return rows


def lambda_sweep(prior: LowRankGaussian, lambdas: Sequence[float],
                 run: Callable[[LowRankGaussian, int], float], seeds: Sequence[int],
                 pool=None) -> list[dict]:
    """Downstream error for each covariance scale, sorted by scale."""
    lambdas = sorted(float(x) for x in lambdas)
    if any(x <= 0 for x in lambdas):
        raise ValueError("scales must be positive")
    rows = _grid_table(lambdas, [rescale(prior, lam) for lam in lambdas], run, list(seeds), pool)
    for row in rows:
        row["lambda"] = row.pop("key")
    return rows
