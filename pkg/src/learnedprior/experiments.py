"""Multi-seed transfer experiments on the synthetic task.

A :class:`SeedRun` holds everything that depends only on the seed (data,
pre-trained weights and the SWAG prior); the helpers below run downstream
methods on it, choosing prior hyperparameters on the validation split.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bma import EvalReport, bma_predict, evaluate
from .config import DEFAULT_HEAD_VAR_GRID, ExperimentConfig
from .data import Dataset, make_transfer_pair
from .model import FEATURE_EXTRACTOR, MlpModel
from .pipeline import (DownstreamSpec, ensemble_params, fit_head, fit_swag_prior, pretrain,
                       run_downstream)
from .prior import LowRankGaussian

# variance grid for the isotropic baselines, the same 8 log-spaced values used for the head
ISO_VAR_GRID = DEFAULT_HEAD_VAR_GRID


@dataclass
class SeedRun:
    seed: int
    cfg: ExperimentConfig
    source: Dataset
    train: Dataset
    val: Dataset
    test: Dataset
    shifted: Dataset
    model: MlpModel
    pretrained: np.ndarray
    learned: LowRankGaussian


def seed_config(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with the data seeds and training seed tied to ``seed``."""
    task = replace(cfg.synthetic, source_seed=seed, target_seed=100 + seed)
    return replace(cfg.with_seed(seed), synthetic=task)


def prepare(cfg: ExperimentConfig, seed: int) -> SeedRun:
    """Generate data, pre-train on the source task and fit the SWAG prior."""
    cfg = seed_config(cfg, seed)
    src, tr, va, te, sh = make_transfer_pair(cfg.synthetic)
    dims = [src.dim, *cfg.model.hidden, src.n_classes]
    model = MlpModel(dims, cfg.model.activation)
    w, _ = pretrain(model, src, cfg.pretrain, seed)
    pt = cfg.pretrain
    learned, _ = fit_swag_prior(model, w, src, pt.loss_kind(), cfg.swag.spec(), seed,
                                pt.weight_var, (pt.aug_noise, pt.aug_scale))
    return SeedRun(seed, cfg, src, tr, va, te, sh, model, w, learned)


def spec_for(run: SeedRun, method: str, **kw) -> DownstreamSpec:
    inf, pr = run.cfg.inference, run.cfg.prior
    base = dict(lam=pr.lam, head_var=pr.head_var, fe_var=pr.fe_var, jitter=inf.jitter,
                precondition=inf.precondition, precond_cap=inf.precond_cap)
    base.update(kw)
    return DownstreamSpec(method, inf.run_config(method), **base)


def fit(run: SeedRun, spec: DownstreamSpec, prior: LowRankGaussian | None = None):
    return run_downstream(run.model, run.train, run.learned if prior is None else prior,
                          spec, run.seed)


def score(run: SeedRun, params, ds: Dataset | None = None) -> EvalReport:
    ds = run.test if ds is None else ds
    return evaluate(bma_predict(run.model, params, ds.features, ds.labels), run.cfg.eval.n_bins)


def method_grid(run: SeedRun, method: str):
    """Hyperparameter grid searched for ``method``: the scale for learned priors,
    the feature-extractor variance for isotropic ones."""
    if method.endswith("learned"):
        return [("lam", x) for x in sorted(run.cfg.prior.lam_grid)]
    return [("fe_var", x) for x in ISO_VAR_GRID]


@dataclass
class Selected:
    method: str
    key: str
    value: float
    val: EvalReport
    test: EvalReport
    params: list


def select(run: SeedRun, method: str, grid=None) -> Selected:
    """Fit every grid point and keep the one with the lowest validation error.

    Ties go to the earlier grid point.
    """
    best = None
    for key, value in (grid or method_grid(run, method)):
        params = fit(run, spec_for(run, method, **{key: value}))
        val = score(run, params, run.val)
        if best is None or val.error < best.val.error:
            best = Selected(method, key, value, val, None, params)
    best.test = score(run, best.params)
    return best


def linear_probe_accuracy(run: SeedRun) -> float:
    """Target-test accuracy of a head fitted on frozen pre-trained features."""
    fe = run.model.layout.group_indices(FEATURE_EXTRACTOR)
    w = fit_head(run.model, run.pretrained[fe], run.train, run.seed)
    return 1.0 - score(run, [w]).error


def deep_ensemble(run: SeedRun, k: int, fe_var: float | None = None) -> EvalReport:
    """``k`` SGD transfer runs from the pre-trained mean with different seeds."""
    spec = spec_for(run, "map_transfer", **({} if fe_var is None else {"fe_var": fe_var}))
    seeds = np.random.SeedSequence([run.seed, 31]).generate_state(k)
    return score(run, ensemble_params(run.model, run.train, run.learned, spec, seeds))


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
