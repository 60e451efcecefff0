"""Desk-scale retrieval network: position-wise linear encoder with a
rectifier, GeM pooling, an affine whitening layer, l2 normalization and a
cosine classifier head. Forward and backward are written out by hand and
operate on batches shaped ``(B, d_in, d_w, d_h)``.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeMismatch, StaleRecord
from .numeric import (
    ACT_FLOOR,
    gem_pool_backward,
    gem_pool_batch,
    l2_normalize_backward,
    l2_normalize_rows,
)

GEM_P = 3.0
PARAM_NAMES = ("W_e", "W_w", "b_w", "W_c")


@dataclass
class ToyModel:
    W_e: np.ndarray  # (d_in, d_c)
    W_w: np.ndarray  # (d_c, d_g)
    b_w: np.ndarray  # (d_g,)
    W_c: np.ndarray  # (n_classes, d_g), rows normalized only when used
    gem_p: float = GEM_P
    version: int = field(default=0, compare=False)

    @property
    def d_in(self):
        return self.W_e.shape[0]

    @property
    def d_c(self):
        return self.W_e.shape[1]

    @property
    def d_g(self):
        return self.W_w.shape[1]

    @property
    def n_classes(self):
        return self.W_c.shape[0]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return ToyModel(*(getattr(self, n).copy() for n in PARAM_NAMES), gem_p=self.gem_p, version=self.version)

    def to_vector(self):
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def with_vector(self, vec):
        out = self.copy()
        offset = 0
        for name in PARAM_NAMES:
            cur = getattr(out, name)
            setattr(out, name, np.array(vec[offset : offset + cur.size]).reshape(cur.shape))
            offset += cur.size
        out.version = self.version + 1
        return out


def init_model(d_in, d_c, d_g, n_classes, seed=0, gem_p=GEM_P):
    rng = np.random.default_rng(seed)
    W_e = rng.uniform(-1.0, 1.0, size=(d_in, d_c)) / np.sqrt(d_in)
    W_w = rng.uniform(-1.0, 1.0, size=(d_c, d_g)) / np.sqrt(d_c)
    b_w = np.zeros(d_g)
    # unit rows: the head only sees directions, and larger rows shrink their own step size
    W_c = rng.standard_normal((n_classes, d_g))
    W_c /= np.linalg.norm(W_c, axis=1, keepdims=True)
    return ToyModel(W_e, W_w, b_w, W_c, gem_p=gem_p)


@dataclass
class ForwardRecord:
    grid_shape: tuple  # (d_w, d_h)
    x: np.ndarray  # (B, d_in, Z)
    h: np.ndarray  # (B, d_c, Z) pre-rectifier
    local: np.ndarray  # (B, d_c, Z) F^l
    clamped: np.ndarray
    pooled: np.ndarray  # (B, d_c)
    u: np.ndarray  # (B, d_g) pre-normalization
    u_norm: np.ndarray  # (B, 1)
    glob: np.ndarray  # (B, d_g) F^g
    wc_unit: np.ndarray
    wc_norm: np.ndarray
    logits: np.ndarray  # (B, n_classes)
    version: int

    @property
    def local_grids(self):
        """F^l as ``(B, d_c, d_w, d_h)``."""
        return self.local.reshape(self.local.shape[:2] + tuple(self.grid_shape))


def forward(model: ToyModel, inputs) -> ForwardRecord:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != model.d_in:
        raise ShapeMismatch(f"expected (B, {model.d_in}, d_w, d_h) input, got {np.shape(inputs)}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeMismatch("spatial dimensions must be >= 1")
    b = x.shape[0]
    xf = x.reshape(b, model.d_in, -1)
    h = np.matmul(model.W_e.T, xf)
    local = np.maximum(h, 0.0)
    pooled, clamped = gem_pool_batch(local, model.gem_p)
    u = pooled @ model.W_w + model.b_w
    glob, u_norm = l2_normalize_rows(u)
    wc_unit, wc_norm = l2_normalize_rows(model.W_c)
    logits = glob @ wc_unit.T
    return ForwardRecord(
        grid_shape=x.shape[2:], x=xf, h=h, local=local, clamped=clamped, pooled=pooled,
        u=u, u_norm=u_norm, glob=glob, wc_unit=wc_unit, wc_norm=wc_norm,
        logits=logits, version=model.version,
    )


@dataclass
class Grads:
    W_e: np.ndarray
    W_w: np.ndarray
    b_w: np.ndarray
    W_c: np.ndarray

    def to_vector(self):
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])


def backward(
    model: ToyModel,
    rec: ForwardRecord,
    d_logits,
    d_local: Optional[np.ndarray] = None,
    d_pooled: Optional[np.ndarray] = None,
) -> Grads:
    """Gradients of all weights given upstream gradients on the logits, on the
    local grid F^l and (optionally) on the pre-whitening pooled vector."""
    if rec.version != model.version:
        raise StaleRecord(f"record from model version {rec.version}, model is at {model.version}")
    d_logits = np.asarray(d_logits, dtype=np.float64)
    b = rec.x.shape[0]

    # cosine head
    d_glob = d_logits @ rec.wc_unit
    d_wc_unit = d_logits.T @ rec.glob
    d_W_c = l2_normalize_backward(rec.wc_unit, rec.wc_norm, d_wc_unit)

    # normalization + whitening
    d_u = l2_normalize_backward(rec.glob, rec.u_norm, d_glob)
    d_W_w = rec.pooled.T @ d_u
    d_b_w = np.sum(d_u, axis=0)
    d_pool = d_u @ model.W_w.T
    if d_pooled is not None:
        d_pool = d_pool + d_pooled

    # GeM (floor-clamped) + rectifier + encoder
    d_f = gem_pool_backward(rec.clamped, rec.pooled, d_pool, model.gem_p)
    d_f = np.where(rec.local > ACT_FLOOR, d_f, 0.0)
    if d_local is not None:
        d_f = d_f + np.asarray(d_local, dtype=np.float64).reshape(b, model.d_c, -1)
    d_h = np.where(rec.h > 0.0, d_f, 0.0)
    d_W_e = np.tensordot(rec.x, d_h, axes=([0, 2], [0, 2]))
    return Grads(d_W_e, d_W_w, d_b_w, d_W_c)


# --- checkpoint I/O ---------------------------------------------------------

MAGIC = b"CFCD"
FORMAT_VERSION = 1


def _tensors(model):
    yield from model.params().items()
    yield "gem_p", np.array([model.gem_p], dtype=np.float64)


def checkpoint_bytes(model: ToyModel) -> bytes:
    """Binary layout: magic, u32 format version, then per tensor
    u32 name length, utf-8 name, u32 rank, u64 dims, little-endian f64 values."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in _tensors(model):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> ToyModel:
    if buf[:4] != MAGIC:
        raise ValueError("not a CFCD checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    pos = 8
    tensors = {}
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    missing = [n for n in PARAM_NAMES + ("gem_p",) if n not in tensors]
    if missing:
        raise ValueError(f"checkpoint lacks tensors {missing}")
    return ToyModel(*(tensors[n] for n in PARAM_NAMES), gem_p=float(tensors["gem_p"].ravel()[0]))


def save_checkpoint(model: ToyModel, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
