"""Bayesian model averaging and calibration metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import MlpModel, softmax

NLL_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        labels = np.asarray(self.labels).astype(int)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise ValueError(f"probs {probs.shape} and labels {labels.shape} do not match")
        if np.any(probs < 0) or np.any(probs > 1) or \
                not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("probability rows must lie on the simplex")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)


@dataclass
class ReliabilityBin:
    mid: float
    confidence: float
    accuracy: float
    count: int


@dataclass
class EvalReport:
    error: float
    nll: float
    ece: float
    reliability_bins: list[ReliabilityBin] = field(default_factory=list)
    nll_clamped: bool = False
    mean_per_class_accuracy: float | None = None

    @property
    def n(self) -> int:
        return sum(b.count for b in self.reliability_bins)


def _as_param_list(samples):
    if hasattr(samples, "samples"):
        return [w for _, _, w in samples.samples]
    arr = np.asarray(samples, dtype=np.float64)
    return list(arr) if arr.ndim == 2 else [arr]


def bma_probs(model: MlpModel, samples, inputs) -> np.ndarray:
    params = _as_param_list(samples)
    if not params:
        raise ValueError("cannot average over an empty sample set")
    acc = np.zeros((np.asarray(inputs).shape[0], model.layer_dims[-1]))
    for w in params:
        acc += softmax(model.forward(w, inputs))
    return acc / len(params)


def bma_predict(model: MlpModel, samples, inputs, labels) -> PredictionSet:
    """Average softmax probabilities over posterior samples.

    ``samples`` may be a :class:`~learnedprior.samplers.SampleSet`, a list of
    parameter vectors or a single vector.
    """
    return PredictionSet(bma_probs(model, samples, inputs), labels)


def evaluate(preds: PredictionSet, n_bins: int = 15, per_class: bool = False) -> EvalReport:
    probs, labels = preds.probs, preds.labels
    n = probs.shape[0]
    if n < 1 or n_bins < 1:
        raise ValueError("need at least one prediction and one bin")
    pred = np.argmax(probs, axis=1)  # first maximum on ties
    correct = pred == labels
    p_true = probs[np.arange(n), labels]
    clamped = bool(np.any(p_true < NLL_FLOOR))
    nll = float(-np.mean(np.log(np.maximum(p_true, NLL_FLOOR))))
    conf = probs[np.arange(n), pred]
    # equal-width bins on (0, 1]; confidence 1.0 lands in the last bin
    which = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    bins = []
    ece = 0.0
    for b in range(n_bins):
        m = which == b
        cnt = int(m.sum())
        mid = (b + 0.5) / n_bins
        if cnt:
            c, a = float(conf[m].mean()), float(correct[m].mean())
            ece += cnt / n * abs(a - c)
        else:
            c = a = 0.0
        bins.append(ReliabilityBin(mid, c, a, cnt))
    mpca = None
    if per_class:
        classes = np.unique(labels)
        mpca = float(np.mean([correct[labels == k].mean() for k in classes]))
    return EvalReport(float(1.0 - correct.mean()), nll, float(ece), bins, clamped, mpca)
