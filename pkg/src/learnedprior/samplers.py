"""MAP optimization and stochastic-gradient MCMC (SGLD, SGHMC).

All samplers work on an energy ``U(w) = N * mean_nll(batch) - log p(w)``; the
likelihood term of a minibatch is scaled by ``N / batch_size``.  Temperature
only multiplies the variance of the injected noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace, field
from typing import Callable, Sequence

import numpy as np

from .model import LossKind, MlpModel, augment_pair, loss_and_grad
from .prior import CompositePrior

ENERGY_LIMIT = 1e12
KINDS = ("sgd_map", "sgld", "sghmc")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"divergence at step {step}: {detail}")
        self.step = step
        self.detail = detail


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "sghmc"
    step_size: float = 1e-3
    momentum: float = 0.9
    temperature: float = 1.0
    n_steps: int = 1000
    batch_size: int = 32
    n_chains: int = 5
    samples_per_chain: int = 2
    cycle_count: int = 1
    sample_phase_fraction: float = 0.25
    schedule: str = "cyclical"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.temperature >= 0:
            raise ValueError("temperature must be non-negative")
        if self.n_steps < 0 or self.batch_size < 1 or self.n_chains < 1:
            raise ValueError("n_steps >= 0, batch_size >= 1 and n_chains >= 1 required")
        if self.samples_per_chain < 1 or self.cycle_count < 1:
            raise ValueError("samples_per_chain and cycle_count must be at least 1")
        if not 0 < self.sample_phase_fraction <= 1:
            raise ValueError("sample_phase_fraction must lie in (0, 1]")
        if self.schedule not in ("cyclical", "constant"):
            raise ValueError("schedule must be 'cyclical' or 'constant'")

    @property
    def total_samples(self) -> int:
        return self.n_chains * self.samples_per_chain

    def with_(self, **kw) -> "SamplerConfig":
        return replace(self, **kw)


@dataclass
class SampleSet:
    samples: list[tuple[int, int, np.ndarray]]
    config: SamplerConfig | None = None
    traces: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def params(self) -> np.ndarray:
        return np.stack([w for _, _, w in self.samples])


# --- single steps -----------------------------------------------------------

def _check_grad(g, step):
    if not np.all(np.isfinite(g)):
        raise DivergenceError(step, f"non-finite gradient (norm {np.linalg.norm(g)})")


def _momentum_step(w, velocity, grad_u, eta, decay):
    v = decay * velocity - eta * grad_u
    return w + v, v


def step_sgd(w, velocity, grad_u, eta, momentum, step: int = 0):
    _check_grad(grad_u, step)
    return _momentum_step(w, velocity, grad_u, eta, momentum)


def step_sgld(w, grad_u, eta, temperature, rng, step: int = 0):
    _check_grad(grad_u, step)
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    w = w - 0.5 * eta * grad_u
    if temperature > 0:
        w = w + math.sqrt(eta * temperature) * rng.standard_normal(w.shape)
    return w


def _sghmc_step(w, velocity, grad_u, eta, decay, friction, temperature, rng):
    v = decay * velocity - eta * grad_u
    if temperature > 0:
        v = v + math.sqrt(2.0 * friction * eta * temperature) * rng.standard_normal(w.shape)
    return w + v, v


def step_sghmc(w, velocity, grad_u, eta, friction_alpha, temperature, rng, step: int = 0):
    if not 0 < friction_alpha <= 1:
        raise ValueError("friction_alpha must lie in (0, 1]")
    _check_grad(grad_u, step)
    return _sghmc_step(w, velocity, grad_u, eta, 1.0 - friction_alpha, friction_alpha,
                       temperature, rng)


def cyclical_step_size(t: int, n_steps: int, eta0: float, cycles: int) -> float:
    """Cosine cyclical step size; ``t`` is 1-based."""
    if cycles < 1:
        raise ValueError("cycle count must be at least 1")
    k = math.ceil(n_steps / cycles)
    return 0.5 * eta0 * (math.cos(math.pi * ((t - 1) % k) / k) + 1.0)


def sample_steps(n_steps: int, cycles: int, n_samples: int, phase_fraction: float) -> list[int]:
    """1-based steps at which a chain records samples.

    Samples go to the last ``min(cycles, n_samples)`` cycles (later cycles
    take any remainder) and are spread evenly over the final
    ``phase_fraction`` of each cycle, the last one on the cycle's final step.
    """
    if n_steps < 1:
        raise ValueError("need at least one step to collect samples")
    k = math.ceil(n_steps / cycles)
    n_cycles = math.ceil(n_steps / k)
    used = min(n_cycles, n_samples)
    per = [n_samples // used] * used
    for i in range(n_samples % used):
        per[used - 1 - i] += 1
    steps = []
    for c, cnt in zip(range(n_cycles - used, n_cycles), per):
        start, end = c * k + 1, min((c + 1) * k, n_steps)
        window = max(1, math.ceil(phase_fraction * (end - start + 1)))
        if cnt > window:
            raise ValueError(f"cannot place {cnt} samples in a window of {window} steps")
        steps += sorted(end - (j * window) // cnt for j in range(cnt))
    return steps


# --- targets ------------------------------------------------------------------

class PosteriorTarget:
    """Negative log posterior of a model on a dataset under a composite prior.

    For InfoNCE targets ``labels`` is ignored and every minibatch is turned
    into two augmented views with :func:`augment_pair`.
    """

    def __init__(self, model: MlpModel, loss: LossKind, inputs, labels,
                 prior: CompositePrior | None,
                 augment: tuple[float, tuple[float, float]] = (0.1, (0.8, 1.2))):
        self.model = model
        self.loss = loss
        self.inputs = np.asarray(inputs, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels)
        self.prior = prior
        self.augment = augment
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ValueError("dataset must be a non-empty 2-d array")

    @property
    def n_data(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.model.dim

    def _batch(self, idx, rng):
        x = self.inputs[idx]
        if self.loss.kind == "info_nce":
            noise, scale = self.augment
            return augment_pair(x, rng, noise, scale)
        return x, self.labels[idx]

    def energy_and_grad(self, w, idx=None, rng=None):
        """Unbiased minibatch estimate of ``U`` and its gradient."""
        if idx is None:
            idx = np.arange(self.n_data)
        nll, g = loss_and_grad(self.model, w, self._batch(idx, rng), self.loss)
        u, gu = self.n_data * nll, self.n_data * g
        if self.prior is not None:
            lp, glp = self.prior.log_density_and_grad(w)
            u, gu = u - lp, gu - glp
        return u, gu

    def curvature_bound(self) -> float:
        """Cheap bound on the prior's stiffest direction, used to cap step sizes."""
        return self.prior.max_precision() if self.prior is not None else 0.0


class _Batches:
    """Epoch-wise shuffled disjoint minibatches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self._queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self._queue:
            if self.bs == self.n:
                self._queue = [np.arange(self.n)]
            else:
                perm = self.rng.permutation(self.n)
                self._queue = [perm[i:i + self.bs] for i in range(0, self.n, self.bs)][::-1]
        return self._queue.pop()


def chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(chain_id)]))


def _iterate(target, cfg: SamplerConfig, init, rng, record: Sequence[int] = (),
             callback: Callable | None = None, precond=None):
    w = np.array(init, dtype=np.float64)
    if precond is not None:
        precond = np.asarray(precond, dtype=np.float64)
        if precond.shape != w.shape or not np.all(precond > 0):
            raise ValueError("preconditioner must be a positive vector matching the parameters")
        root = np.sqrt(precond)
    v = np.zeros_like(w)
    batches = _Batches(target.n_data, cfg.batch_size, rng)
    want = set(record)
    samples = []
    trace = np.empty(cfg.n_steps)
    friction = 1.0 - cfg.momentum
    for t in range(1, cfg.n_steps + 1):
        eta = cyclical_step_size(t, cfg.n_steps, cfg.step_size, cfg.cycle_count) \
            if cfg.schedule == "cyclical" else cfg.step_size
        idx = batches.next()
        u, g = target.energy_and_grad(w, idx, rng)
        if not np.isfinite(u) or abs(u) > ENERGY_LIMIT:
            raise DivergenceError(t, f"energy estimate {u:.3e}")
        _check_grad(g, t)
        trace[t - 1] = u
        if precond is not None:
            w, v = _preconditioned_step(cfg, w, v, g, eta, precond, root, friction, rng)
        elif cfg.kind == "sgd_map":
            w, v = _momentum_step(w, v, g, eta, cfg.momentum)
        elif cfg.kind == "sgld":
            w = step_sgld(w, g, eta, cfg.temperature, rng, t)
        else:
            w, v = _sghmc_step(w, v, g, eta, cfg.momentum, friction, cfg.temperature, rng)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(t, "non-finite parameters")
        if t in want:
            samples.append((t, w.copy()))
        if callback is not None:
            callback(t, w)
    return w, samples, trace


def _preconditioned_step(cfg, w, v, g, eta, precond, root, friction, rng):
    # constant diagonal preconditioner P: drift uses P g, noise has covariance proportional to P
    pg = precond * g
    if cfg.kind == "sgd_map":
        v = cfg.momentum * v - eta * pg
        return w + v, v
    if cfg.kind == "sgld":
        w = w - 0.5 * eta * pg
        if cfg.temperature > 0:
            w = w + math.sqrt(eta * cfg.temperature) * root * rng.standard_normal(w.shape)
        return w, v
    v = cfg.momentum * v - eta * pg
    if cfg.temperature > 0:
        v = v + math.sqrt(2.0 * friction * eta * cfg.temperature) * root * rng.standard_normal(w.shape)
    return w + v, v


def run_chain(target, cfg: SamplerConfig, init, chain_seed: int, chain_id: int = 0,
              precond=None):
    """Run one chain; returns ``([(step, w), ...], energy_trace)``.

    ``precond`` is an optional positive vector used as a constant diagonal
    preconditioner (drift ``P * grad``, noise covariance scaled by ``P``).
    """
    steps = sample_steps(cfg.n_steps, cfg.cycle_count, cfg.samples_per_chain,
                         cfg.sample_phase_fraction)
    _, samples, trace = _iterate(target, cfg, init, chain_rng(chain_seed, chain_id), steps,
                                 precond=precond)
    return samples, trace


def run_chains(target, cfg: SamplerConfig, init, seed: int, pool=None, precond=None) -> SampleSet:
    """Run ``cfg.n_chains`` independent chains.

    ``init`` is either a starting vector or a callable ``rng -> vector``; the
    callable gets a generator derived from ``(seed, chain_id)`` that is
    separate from the one driving the chain.
    """
    def one(c):
        w0 = init(chain_rng(seed, 10_000 + c)) if callable(init) else init
        return run_chain(target, cfg, w0, seed, c, precond)

    results = list(pool.map(one, range(cfg.n_chains))) if pool is not None \
        else [one(c) for c in range(cfg.n_chains)]
    samples = [(c, t, w) for c, (s, _) in enumerate(results) for t, w in s]
    return SampleSet(samples, cfg, [tr for _, tr in results])


def run_map(target, cfg: SamplerConfig, init, seed: int = 0, callback=None, precond=None):
    """SGD with momentum on ``U``; returns the final iterate."""
    cfg = cfg.with_(kind="sgd_map")
    w, _, _ = _iterate(target, cfg, init, chain_rng(seed, 0), callback=callback, precond=precond)
    return w


def run_map_with_trace(target, cfg: SamplerConfig, init, seed: int = 0, precond=None):
    cfg = cfg.with_(kind="sgd_map")
    w, _, trace = _iterate(target, cfg, init, chain_rng(seed, 0), precond=precond)
    return w, trace
