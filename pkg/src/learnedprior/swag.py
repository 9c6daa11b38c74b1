"""SWAG: running moments plus a ring buffer of recent snapshots."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DimensionError
from .prior import LowRankGaussian

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class SwagConfig:
    snapshot_interval: int = 1
    max_rank: int = 10
    total_snapshots: int = 20

    def __post_init__(self):
        if self.max_rank < 2:
            raise ValueError("max_rank must be at least 2")
        if self.total_snapshots < self.max_rank:
            raise ValueError("total_snapshots must be at least max_rank")
        if self.snapshot_interval < 1:
            raise ValueError("snapshot_interval must be at least 1")


class SwagState:
    """Incremental SWAG statistics.

    The ring buffer keeps raw snapshots; deviations are taken against the
    final running mean when :func:`finalize` is called.
    """

    def __init__(self, dim: int, max_rank: int):
        self.dim = int(dim)
        self.max_rank = int(max_rank)
        self.count = 0
        self.running_mean = np.zeros(self.dim)
        self.running_sq_mean = np.zeros(self.dim)
        self._ring = np.zeros((self.dim, self.max_rank))
        self._head = 0  # next column to overwrite

    def copy(self) -> "SwagState":
        out = SwagState(self.dim, self.max_rank)
        out.count = self.count
        out.running_mean = self.running_mean.copy()
        out.running_sq_mean = self.running_sq_mean.copy()
        out._ring = self._ring.copy()
        out._head = self._head
        return out

    @property
    def ring(self) -> np.ndarray:
        """Stored snapshots as columns, oldest first."""
        k = min(self.count, self.max_rank)
        if self.count <= self.max_rank:
            return self._ring[:, :k].copy()
        order = np.r_[self._head:self.max_rank, 0:self._head]
        return self._ring[:, order]

    def update(self, snapshot) -> "SwagState":
        w = np.asarray(snapshot, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionError("snapshot length", self.dim, w.shape)
        n = self.count
        self.running_mean = self.running_mean + (w - self.running_mean) / (n + 1)
        self.running_sq_mean = self.running_sq_mean + (w * w - self.running_sq_mean) / (n + 1)
        self._ring[:, self._head] = w
        self._head = (self._head + 1) % self.max_rank
        self.count = n + 1
        return self


def update(state: SwagState, snapshot) -> SwagState:
    return state.update(snapshot)


def finalize(state: SwagState, cfg: SwagConfig, var_floor: float = VAR_FLOOR) -> LowRankGaussian:
    """Turn collected snapshots into the SWAG Gaussian (scale 1)."""
    rank = cfg.max_rank
    if rank > state.max_rank:
        raise ValueError(f"max_rank {rank} exceeds the state's buffer size {state.max_rank}")
    if state.count < rank:
        raise ValueError(f"need at least {rank} snapshots, have {state.count}")
    mean = state.running_mean.copy()
    snaps = state.ring[:, -rank:]
    dev = snaps - mean[:, None]
    diag = np.maximum(var_floor, np.sum(dev * dev, axis=1) / (rank - 1))
    return LowRankGaussian(mean, diag, dev, 1.0)
