"""Binary containers for priors, checkpoints and sample sets, plus CSV emission.

All binary formats are little-endian.  A PriorBundle is laid out as::

    magic   8 bytes   b"BPRIOR1\\0"
    version u32
    d       u32
    L       u32
    lambda  f64
    mean    d  x f64
    sigma2  d  x f64
    D       d*L x f64   (column-major)
    n       u32         length of the layout JSON in bytes
    layout  n bytes     UTF-8 JSON, keys sorted

Checkpoints and sample sets use the same conventions with their own magic.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct

import numpy as np

from .model import ParamLayout
from .prior import LowRankGaussian

PRIOR_MAGIC = b"BPRIOR1\0"
CHECKPOINT_MAGIC = b"BCKPT01\0"
SAMPLES_MAGIC = b"BSAMPL1\0"
VERSION = 1
_F64 = np.dtype("<f8")


class FormatError(ValueError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path


def _layout_bytes(layout: ParamLayout) -> bytes:
    raw = json.dumps(layout.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(self.path, f"truncated payload (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def floats(self, n):
        return np.frombuffer(self.take(8 * n), dtype=_F64).astype(np.float64)

    def header(self, magic):
        if self.take(len(magic)) != magic:
            raise FormatError(self.path, f"bad magic, expected {magic!r}")
        v = self.u32()
        if v != VERSION:
            raise FormatError(self.path, f"unsupported version {v}")

    def layout(self):
        raw = self.take(self.u32())
        try:
            return ParamLayout.from_dict(json.loads(raw.decode("utf-8")))
        except (ValueError, KeyError, TypeError) as e:
            raise FormatError(self.path, f"bad layout JSON: {e}") from None

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(self.path, f"{len(self.buf) - self.pos} trailing bytes")


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(payload)


# --- PriorBundle ------------------------------------------------------------------

def prior_to_bytes(prior: LowRankGaussian, layout: ParamLayout) -> bytes:
    if layout.total_dim != prior.dim:
        raise ValueError(f"layout covers {layout.total_dim} parameters, prior has {prior.dim}")
    parts = [PRIOR_MAGIC, struct.pack("<IIId", VERSION, prior.dim, prior.rank, prior.scale),
             prior.mean.astype(_F64).tobytes(), prior.diag_var.astype(_F64).tobytes(),
             prior.deviations.astype(_F64).tobytes(order="F"), _layout_bytes(layout)]
    return b"".join(parts)


def prior_from_bytes(buf: bytes, path="<bytes>") -> tuple[LowRankGaussian, ParamLayout]:
    r = _Reader(buf, path)
    r.header(PRIOR_MAGIC)
    d, L = r.u32(), r.u32()
    lam = r.f64()
    mean, var = r.floats(d), r.floats(d)
    dev = r.floats(d * L).reshape((d, L), order="F")
    layout = r.layout()
    r.done()
    if layout.total_dim != d:
        raise FormatError(path, f"layout covers {layout.total_dim} parameters, header says {d}")
    return LowRankGaussian(mean, var, np.ascontiguousarray(dev), lam), layout


def save_prior(path, prior: LowRankGaussian, layout: ParamLayout) -> None:
    _write(path, prior_to_bytes(prior, layout))


def load_prior(path) -> tuple[LowRankGaussian, ParamLayout]:
    return prior_from_bytes(_read(path), path)


# --- checkpoints and sample sets -------------------------------------------------------

def save_checkpoint(path, params, layout: ParamLayout) -> None:
    w = np.asarray(params, dtype=_F64)
    if w.shape != (layout.total_dim,):
        raise ValueError(f"params length {w.size} != layout dim {layout.total_dim}")
    _write(path, CHECKPOINT_MAGIC + struct.pack("<II", VERSION, w.size) + w.tobytes()
           + _layout_bytes(layout))


def load_checkpoint(path) -> tuple[np.ndarray, ParamLayout]:
    r = _Reader(_read(path), path)
    r.header(CHECKPOINT_MAGIC)
    w = r.floats(r.u32())
    layout = r.layout()
    r.done()
    if layout.total_dim != w.size:
        raise FormatError(path, "layout does not match the parameter count")
    return w, layout


def save_samples(path, samples, layout: ParamLayout) -> None:
    """``samples`` is a list of ``(chain, step, params)``."""
    parts = [SAMPLES_MAGIC, struct.pack("<III", VERSION, layout.total_dim, len(samples))]
    for chain, step, w in samples:
        parts.append(struct.pack("<II", chain, step))
        parts.append(np.asarray(w, dtype=_F64).tobytes())
    parts.append(_layout_bytes(layout))
    _write(path, b"".join(parts))


def load_samples(path):
    r = _Reader(_read(path), path)
    r.header(SAMPLES_MAGIC)
    d, j = r.u32(), r.u32()
    samples = []
    for _ in range(j):
        chain, step = r.u32(), r.u32()
        samples.append((chain, step, r.floats(d)))
    layout = r.layout()
    r.done()
    return samples, layout


def load_params(path):
    """Parameter vectors from either a checkpoint or a sample-set file."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == CHECKPOINT_MAGIC:
        w, layout = load_checkpoint(path)
        return [w], layout
    if magic == SAMPLES_MAGIC:
        samples, layout = load_samples(path)
        return [w for _, _, w in samples], layout
    raise FormatError(path, "neither a checkpoint nor a sample set")


# --- CSV -------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    raw = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows, provenance: dict) -> None:
    """CSV with a ``# key=value, ...`` provenance line above the header; rows are dicts."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# " + ", ".join(f"{k}={v}" for k, v in provenance.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])


def read_csv(path) -> tuple[str, list[dict]]:
    """Provenance line and rows (as strings) of a file written by :func:`write_csv`."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        rows = list(csv.DictReader(fh))
    return first, rows
