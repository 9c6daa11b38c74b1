"""End-to-end transfer pipeline: pre-train, fit a SWAG prior, run downstream inference.

These are the building blocks behind the command-line tool and the
experiment scripts; each function is a pure function of its arguments and
seeds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bma import EvalReport, bma_predict, evaluate
from .data import Dataset
from .model import FEATURE_EXTRACTOR, HEAD, LossKind, MlpModel, ParamLayout
from .prior import CompositePrior, IsotropicGaussian, LowRankGaussian
from .samplers import (PosteriorTarget, SampleSet, SamplerConfig, chain_rng, run_chains,
                       run_map, run_map_with_trace)
from .swag import SwagConfig, SwagState, finalize

METHODS = ("bnn_learned", "bnn_iso_mean", "bnn_iso_zero",
           "map_learned", "map_iso_mean", "map_transfer", "map_iso_zero")


@dataclass(frozen=True)
class PretrainSpec:
    loss: str = "cross_entropy"
    temperature: float = 0.5
    steps: int = 2000
    step_size: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_var: float = 1.0
    aug_noise: float = 0.1
    aug_scale: tuple[float, float] = (0.8, 1.2)
    embed_dim: int = 16

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "info_nce"):
            raise ValueError("loss must be 'cross_entropy' or 'info_nce'")
        if self.steps < 0 or self.batch_size < 1 or self.embed_dim < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and embed_dim >= 1 required")
        if not self.step_size > 0 or not 0 <= self.momentum < 1 or not self.weight_var > 0:
            raise ValueError("step_size > 0, momentum in [0, 1) and weight_var > 0 required")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        lo, hi = self.aug_scale
        if not 0 < lo <= hi:
            raise ValueError("aug_scale must satisfy 0 < low <= high")

    def loss_kind(self) -> LossKind:
        if self.loss == "info_nce":
            return LossKind.info_nce(self.temperature)
        return LossKind(self.loss)


@dataclass(frozen=True)
class FitPriorSpec:
    swag: SwagConfig = field(default_factory=lambda: SwagConfig(50, 10, 20))
    step_size: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32


@dataclass(frozen=True)
class DownstreamSpec:
    method: str = "bnn_learned"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    lam: float = 1.0
    head_var: float = 1.0
    fe_var: float = 1.0
    jitter: float = 1e-3
    step_safety: float = 1.0
    precondition: bool = True
    precond_cap: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")



def source_model(dims, activation, n_out) -> MlpModel:
    """Model whose head has ``n_out`` outputs on top of hidden layers ``dims``."""
    return MlpModel(list(dims) + [n_out], activation)


def pretrain(model: MlpModel, source: Dataset, spec: PretrainSpec, seed: int,
             init: np.ndarray | None = None):
    """MAP training on the source task under a zero-mean isotropic prior.

    Returns ``(params, trace)`` where ``trace`` holds the energy estimate per step.
    """
    loss = spec.loss_kind()
    init = model.init_params(np.random.default_rng(seed)) if init is None else init
    if spec.steps == 0:
        return np.array(init, dtype=np.float64), np.zeros(0)
    prior = CompositePrior(model.layout, None, [(FEATURE_EXTRACTOR, IsotropicGaussian(spec.weight_var)),
                                                (HEAD, IsotropicGaussian(spec.weight_var))])
    target = PosteriorTarget(model, loss, source.features, source.labels, prior,
                             (spec.aug_noise, spec.aug_scale))
    cfg = SamplerConfig("sgd_map", spec.step_size, spec.momentum, 0.0, spec.steps,
                        min(spec.batch_size, len(source)), schedule="constant")
    # the likelihood term is a sum over N examples, so scale the step size down by N
    cfg = cfg.with_(step_size=spec.step_size / len(source))
    return run_map_with_trace(target, cfg, init, seed)


def fit_swag_prior(model: MlpModel, params, source: Dataset, loss: LossKind, spec: FitPriorSpec,
                   seed: int, weight_var: float = 1.0,
                   augment=(0.1, (0.8, 1.2))) -> tuple[LowRankGaussian, np.ndarray]:
    """SWAG over the feature extractor, started from pre-trained ``params``.

    Runs ``total_snapshots`` cosine cycles of SGD with momentum, one cycle per
    ``snapshot_interval`` steps, and records a snapshot at the end of each
    cycle, where the step size is smallest.  Returns the SWAG Gaussian
    restricted to the feature-extractor group and the full snapshot mean.
    """
    swag = spec.swag
    prior = CompositePrior(model.layout, None, [(FEATURE_EXTRACTOR, IsotropicGaussian(weight_var)),
                                                (HEAD, IsotropicGaussian(weight_var))])
    target = PosteriorTarget(model, loss, source.features, source.labels, prior, augment)
    n_steps = swag.total_snapshots * swag.snapshot_interval
    cfg = SamplerConfig("sgd_map", spec.step_size / len(source), spec.momentum, 0.0, n_steps,
                        min(spec.batch_size, len(source)), cycle_count=swag.total_snapshots,
                        schedule="cyclical")
    state = SwagState(model.dim, swag.max_rank)

    def collect(t, w):
        if t % swag.snapshot_interval == 0:
            state.update(w)

    run_map(target, cfg, params, seed, callback=collect)
    full = finalize(state, swag)
    return full.restrict(model.layout.group_indices(FEATURE_EXTRACTOR)), full.mean


def make_prior(method: str, layout, learned: LowRankGaussian | None, lam: float,
               head_var: float, fe_var: float) -> CompositePrior:
    head = (HEAD, IsotropicGaussian(head_var))
    if method in ("bnn_learned", "map_learned"):
        return CompositePrior(layout, (learned.rescale(lam), FEATURE_EXTRACTOR), [head])
    if method in ("bnn_iso_mean", "map_iso_mean"):
        return CompositePrior(layout, (LowRankGaussian.isotropic(learned.mean, fe_var),
                                       FEATURE_EXTRACTOR), [head])
    # zero-mean isotropic over everything; map_transfer differs only in its init
    return CompositePrior(layout, None, [(FEATURE_EXTRACTOR, IsotropicGaussian(fe_var)), head])


def initializer(method: str, model: MlpModel, learned_mean, jitter: float):
    """``rng -> params``: learned mean plus jitter, or a fresh random init."""
    fe = model.layout.group_indices(FEATURE_EXTRACTOR)

    def init(rng):
        if method in ("bnn_iso_zero", "map_iso_zero"):
            return model.init_params(rng)
        w = jitter * rng.standard_normal(model.dim)
        w[fe] += learned_mean
        return w

    return init


def stable_step(cfg: SamplerConfig, prior: CompositePrior, safety: float,
                precond=None) -> SamplerConfig:
    """Cap the step size so the stiffest prior direction stays stable."""
    bound = prior.max_precision() if precond is None else 1.0
    if safety > 0 and bound * cfg.step_size > safety:
        return cfg.with_(step_size=safety / bound)
    return cfg


def run_downstream(model: MlpModel, train: Dataset, learned: LowRankGaussian | None,
                   spec: DownstreamSpec, seed: int, loss: LossKind = LossKind()) -> list[np.ndarray]:
    """Posterior samples (Bayesian methods) or a single MAP estimate."""
    prior = make_prior(spec.method, model.layout, learned, spec.lam, spec.head_var, spec.fe_var)
    # whitened prior curvature <= 1; likelihood curvature ~ N * P * h <= precond_cap * h
    precond = np.minimum(prior.diag_scale(), spec.precond_cap / len(train)) \
        if spec.precondition else None
    cfg = stable_step(spec.sampler, prior, spec.step_safety, precond)
    cfg = cfg.with_(batch_size=min(cfg.batch_size, len(train)))
    target = PosteriorTarget(model, loss, train.features, train.labels, prior)
    mean = None if learned is None else learned.mean
    init = initializer(spec.method, model, mean, spec.jitter)
    if spec.method.startswith("bnn"):
        return [w for _, _, w in run_chains(target, cfg, init, seed, precond=precond).samples]
    return [run_map(target, cfg, init(chain_rng(seed, 10_000)), seed, precond=precond)]


def fit_head(model: MlpModel, fe_params, train: Dataset, seed: int = 0, head_var: float = 1.0,
             steps: int = 2000, step_size: float = 0.5) -> np.ndarray:
    """MAP fit of the head on frozen features; returns the full parameter vector.

    This is the linear probe: the feature extractor is fixed at ``fe_params``
    and only the last layer is trained, full batch, under an isotropic prior.
    """
    fe = model.layout.group_indices(FEATURE_EXTRACTOR)
    head = model.layout.group_indices(HEAD)
    w = np.zeros(model.dim)
    w[fe] = fe_params
    feats = model.features(w, train.features)
    probe = MlpModel([feats.shape[1], model.layer_dims[-1]])
    prior = CompositePrior(probe.layout, None, [(HEAD, IsotropicGaussian(head_var))])
    target = PosteriorTarget(probe, LossKind(), feats, train.labels, prior)
    cfg = SamplerConfig("sgd_map", step_size / len(train), 0.9, 0.0, steps, len(train),
                        schedule="constant")
    w[head] = run_map(target, cfg, np.zeros(probe.dim), seed)
    return w


def ensemble_params(model: MlpModel, train: Dataset, learned: LowRankGaussian | None,
                    spec: DownstreamSpec, seeds, loss: LossKind = LossKind()) -> list[np.ndarray]:
    """One MAP run per member seed, all started from the pre-trained mean."""
    if not spec.method.startswith("map"):
        raise ValueError("ensemble members are MAP runs")
    return [run_downstream(model, train, learned, spec, int(s), loss)[0] for s in seeds]


def group_layout(layout: ParamLayout, group: str = FEATURE_EXTRACTOR) -> ParamLayout:
    """The blocks of one group, re-based to start at offset 0."""
    names = layout.groups[group]
    return ParamLayout.from_shapes([(n, layout.block(n).shape) for n in names], {group: names})


def evaluate_params(model: MlpModel, params: list[np.ndarray], ds: Dataset,
                    n_bins: int = 15) -> EvalReport:
    return evaluate(bma_predict(model, params, ds.features, ds.labels), n_bins)


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
