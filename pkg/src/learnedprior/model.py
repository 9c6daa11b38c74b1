"""Small feed-forward networks over flat parameter vectors.

Parameters live in a single float64 vector; a :class:`ParamLayout` maps named
blocks (``W0``, ``b0``, ``W1``, ...) onto contiguous slices and groups them
into ``feature_extractor`` and ``head``.  Gradients are computed by hand for
the fixed affine + activation chain, so nothing beyond numpy is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FEATURE_EXTRACTOR = "feature_extractor"
HEAD = "head"


class DimensionError(ValueError):
    """Raised when an array does not have the size a model or layout expects."""

    def __init__(self, what: str, expected, got):
        super().__init__(f"{what}: expected {expected}, got {got}")
        self.what = what
        self.expected = expected
        self.got = got


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class ParamLayout:
    """Ordered, contiguous blocks covering ``[0, total_dim)`` plus named groups."""

    blocks: tuple[Block, ...]
    groups: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        pos = 0
        names = set()
        for b in self.blocks:
            if b.offset != pos:
                raise ValueError(f"block {b.name!r} starts at {b.offset}, expected {pos}")
            if b.length != int(np.prod(b.shape, dtype=int)):
                raise ValueError(f"block {b.name!r} length does not match shape {b.shape}")
            if b.name in names:
                raise ValueError(f"duplicate block name {b.name!r}")
            names.add(b.name)
            pos += b.length
        for g, members in self.groups.items():
            missing = set(members) - names
            if missing:
                raise ValueError(f"group {g!r} refers to unknown blocks {sorted(missing)}")

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple[int, ...]]],
                    groups: dict[str, Sequence[str]] | None = None) -> "ParamLayout":
        blocks = []
        offset = 0
        for name, shape in shapes:
            n = int(np.prod(shape, dtype=int))
            blocks.append(Block(name, offset, n, tuple(int(s) for s in shape)))
            offset += n
        groups = {k: tuple(v) for k, v in (groups or {}).items()}
        return cls(tuple(blocks), groups)

    @property
    def total_dim(self) -> int:
        if not self.blocks:
            return 0
        last = self.blocks[-1]
        return last.offset + last.length

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def group_blocks(self, group: str) -> list[Block]:
        members = set(self.groups[group])
        return [b for b in self.blocks if b.name in members]

    def group_indices(self, group: str) -> np.ndarray:
        """Flat indices of a group, in layout order."""
        parts = [np.arange(b.offset, b.offset + b.length) for b in self.group_blocks(group)]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=int)

    def group_dim(self, group: str) -> int:
        return sum(b.length for b in self.group_blocks(group))

    def unflatten(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = np.asarray(params)
        if params.shape != (self.total_dim,):
            raise DimensionError("parameter vector length", self.total_dim, params.shape)
        # views, not copies
        return {b.name: params[b.slice].reshape(b.shape) for b in self.blocks}

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.total_dim)
        for b in self.blocks:
            a = np.asarray(arrays[b.name], dtype=np.float64)
            if a.shape != b.shape:
                raise DimensionError(f"block {b.name}", b.shape, a.shape)
            out[b.slice] = a.ravel()
        return out

    def to_dict(self) -> dict:
        return {
            "blocks": [{"name": b.name, "offset": b.offset, "length": b.length,
                        "shape": list(b.shape)} for b in self.blocks],
            "groups": {k: list(v) for k, v in sorted(self.groups.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamLayout":
        blocks = tuple(Block(b["name"], int(b["offset"]), int(b["length"]), tuple(b["shape"]))
                       for b in d["blocks"])
        return cls(blocks, {k: tuple(v) for k, v in d.get("groups", {}).items()})


@dataclass(frozen=True)
class LossKind:
    """Which negative log-likelihood to use.

    ``cross_entropy`` for classification, ``info_nce`` for contrastive
    pre-training on view pairs and ``gaussian`` (squared error with known
    noise variance) for regression targets.
    """

    kind: str = "cross_entropy"
    temperature: float = 1.0
    noise_var: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cross_entropy", "info_nce", "gaussian"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "info_nce" and not self.temperature > 0:
            raise ValueError("info_nce temperature must be positive")
        if self.kind == "gaussian" and not self.noise_var > 0:
            raise ValueError("gaussian noise variance must be positive")

    @classmethod
    def cross_entropy(cls) -> "LossKind":
        return cls("cross_entropy")

    @classmethod
    def info_nce(cls, temperature: float = 0.5) -> "LossKind":
        return cls("info_nce", temperature=temperature)

    @classmethod
    def gaussian(cls, noise_var: float = 1.0) -> "LossKind":
        return cls("gaussian", noise_var=noise_var)


_ACTIVATIONS = ("relu", "tanh")


class MlpModel:
    """Affine layers with a shared activation between them (none after the last).

    Weight blocks ``W{i}`` have shape ``(fan_out, fan_in)`` so that each row is
    one unit ("filter"); bias blocks ``b{i}`` have shape ``(fan_out,)``.
    """

    def __init__(self, layer_dims: Sequence[int], activation: str = "relu"):
        layer_dims = tuple(int(d) for d in layer_dims)
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {layer_dims}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        self.layer_dims = layer_dims
        self.activation = activation
        shapes = []
        for i, (a, b) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            shapes += [(f"W{i}", (b, a)), (f"b{i}", (b,))]
        last = len(layer_dims) - 2
        head = (f"W{last}", f"b{last}")
        fe = tuple(n for n, _ in shapes if n not in head)
        self.layout = ParamLayout.from_shapes(shapes, {FEATURE_EXTRACTOR: fe, HEAD: head})

    def __repr__(self):
        return f"MlpModel({list(self.layer_dims)}, {self.activation!r})"

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def dim(self) -> int:
        return self.layout.total_dim

    def init_params(self, rng: np.random.Generator, head_scale: float = 1.0) -> np.ndarray:
        """He/Glorot-style random initialization, biases zero."""
        arrays = {}
        for i in range(self.n_layers):
            fan_out, fan_in = self.layer_dims[i + 1], self.layer_dims[i]
            gain = 2.0 if self.activation == "relu" else 1.0
            sd = np.sqrt(gain / fan_in)
            if i == self.n_layers - 1:
                sd *= head_scale
            arrays[f"W{i}"] = rng.normal(0.0, sd, size=(fan_out, fan_in))
            arrays[f"b{i}"] = np.zeros(fan_out)
        return self.layout.flatten(arrays)

    def _check(self, params, inputs):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.dim,):
            raise DimensionError("parameter vector length", self.dim, params.shape)
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.layer_dims[0]:
            raise DimensionError("input width", self.layer_dims[0],
                                 inputs.shape[1] if inputs.ndim == 2 else inputs.shape)
        return params, inputs

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, h):
        return (z > 0).astype(np.float64) if self.activation == "relu" else 1.0 - h * h

    def forward(self, params, inputs, return_cache=False):
        params, inputs = self._check(params, inputs)
        p = self.layout.unflatten(params)
        h = inputs
        cache = [(None, h)]
        for i in range(self.n_layers):
            z = h @ p[f"W{i}"].T + p[f"b{i}"]
            h = z if i == self.n_layers - 1 else self._act(z)
            cache.append((z, h))
        return (h, cache) if return_cache else h

    def features(self, params, inputs):
        """Output of the feature extractor (input to the head)."""
        _, cache = self.forward(params, inputs, return_cache=True)
        return cache[-2][1]

    def backward(self, params, cache, grad_out) -> np.ndarray:
        """Pull ``d loss / d output`` back to a flat parameter gradient."""
        p = self.layout.unflatten(np.asarray(params, dtype=np.float64))
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            z, h = cache[i + 1]
            if i != self.n_layers - 1:
                g = g * self._act_grad(z, h)
            h_prev = cache[i][1]
            grads[f"W{i}"] = g.T @ h_prev
            grads[f"b{i}"] = g.sum(axis=0)
            if i > 0:
                g = g @ p[f"W{i}"]
        return self.layout.flatten(grads)

    def predict_proba(self, params, inputs) -> np.ndarray:
        return softmax(self.forward(params, inputs))


def forward(model: MlpModel, params, inputs) -> np.ndarray:
    return model.forward(params, inputs)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_from_logits(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError("label count", n, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def info_nce_from_embeddings(za, zb, temperature):
    """Symmetric InfoNCE over cosine similarities with in-batch negatives.

    Row ``i`` of ``za`` is the positive for row ``i`` of ``zb``; every other row
    of the opposite view is a negative.  The loss averages the a->b and b->a
    cross-entropies.  Returns the loss and gradients w.r.t. ``za`` and ``zb``.
    """
    n = za.shape[0]
    na = np.linalg.norm(za, axis=1, keepdims=True)
    nb = np.linalg.norm(zb, axis=1, keepdims=True)
    ua, ub = za / na, zb / nb
    s = ua @ ub.T / temperature
    idx = np.arange(n)
    pa = softmax(s)
    pb = softmax(s.T)
    loss = 0.5 * (-np.log(pa[idx, idx]).mean() - np.log(pb[idx, idx]).mean())
    ga = pa.copy()
    ga[idx, idx] -= 1.0
    gb = pb.copy()
    gb[idx, idx] -= 1.0
    gs = 0.5 * (ga + gb.T) / n / temperature
    gua = gs @ ub
    gub = gs.T @ ua
    gza = (gua - ua * np.sum(ua * gua, axis=1, keepdims=True)) / na
    gzb = (gub - ub * np.sum(ub * gub, axis=1, keepdims=True)) / nb
    return loss, gza, gzb


def loss_and_grad(model: MlpModel, params, batch, loss: LossKind = LossKind()):
    """Mean per-example negative log-likelihood and its exact gradient.

    ``batch`` is ``(inputs, labels)`` for cross-entropy, ``(inputs, targets)``
    for the Gaussian loss and ``(view_a, view_b)`` for InfoNCE.
    """
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-d array of inputs")
    if loss.kind == "cross_entropy":
        out, cache = model.forward(params, x, return_cache=True)
        value, g = cross_entropy_from_logits(out, y)
        return value, model.backward(params, cache, g)
    if loss.kind == "gaussian":
        out, cache = model.forward(params, x, return_cache=True)
        y = np.asarray(y, dtype=np.float64).reshape(out.shape)
        r = out - y
        n = x.shape[0]
        value = (0.5 * np.sum(r * r) / loss.noise_var) / n \
            + 0.5 * out.shape[1] * np.log(2 * np.pi * loss.noise_var)
        return value, model.backward(params, cache, r / loss.noise_var / n)
    # info_nce
    xb = np.asarray(y, dtype=np.float64)
    if xb.shape != x.shape:
        raise DimensionError("paired view shape", x.shape, xb.shape)
    if x.shape[0] < 2:
        raise ValueError("info_nce needs at least two pairs for in-batch negatives")
    za, ca = model.forward(params, x, return_cache=True)
    zb, cb = model.forward(params, xb, return_cache=True)
    value, gza, gzb = info_nce_from_embeddings(za, zb, loss.temperature)
    return value, model.backward(params, ca, gza) + model.backward(params, cb, gzb)


def augment_pair(x, rng: np.random.Generator, noise_sd: float = 0.1,
                 scale_range: tuple[float, float] = (0.8, 1.2)):
    """Two random views of ``x``: a random global rescale plus additive noise.

    Works on a single vector or row-wise on a matrix.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi):
        raise ValueError(f"invalid scale range {scale_range}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1] + (1,) if x.ndim > 1 else (1,)

    def view():
        s = rng.uniform(lo, hi, size=lead) if hi > lo else np.full(lead, lo)
        return s * x + noise_sd * rng.standard_normal(x.shape)

    a = view()
    return a, view()
