"""Minimal dense neural-network substrate on numpy arrays.

Parameters live in named blocks, one (weight matrix, bias vector) pair per
dense layer. Gradients mirror that layout exactly, which makes per-layer
norm bookkeeping and per-layer gradient rescaling trivial. Backpropagation
is written out by hand for the fixed dense/relu stack; there is no autograd
graph and none is needed.

Precision is selected per network: float64 for verification work, float32
for training runs.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DTYPES = {"float32": np.float32, "float64": np.float64}
DTYPE_NAMES = {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64"}

# Lower clamp inside cross-entropy; keeps log() finite, well below test tolerances.
LOG_CLAMP = 1e-12


def resolve_dtype(precision):
    """Map a precision name (or dtype) to a numpy float dtype."""
    if isinstance(precision, str):
        if precision not in DTYPES:
            raise ConfigError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[precision])
    dt = np.dtype(precision)
    if dt not in DTYPE_NAMES:
        raise ConfigError(f"unsupported dtype {dt}")
    return dt


def check_finite(arr, context):
    """Raise NumericError if any entry of `arr` is NaN or infinite."""
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {context}")


def softmax_temperature(logits, tau):
    """Temperature softmax along the last axis, stabilized by max-subtraction.

    Accepts a single logit vector or a matrix of row vectors.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits)
    if z.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    check_finite(z, "softmax logits")
    scaled = z / tau
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_soft(pred, target):
    """Cross-entropy -sum(target * log(pred)) between two probability vectors."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction/target length mismatch: {p.shape} vs {t.shape}")
    return float(-(t * np.log(np.maximum(p, LOG_CLAMP))).sum())


def soft_cross_entropy_rows(pred_rows, target_rows):
    """Row-wise soft-target cross-entropy for matrices of probability rows."""
    if pred_rows.shape != target_rows.shape:
        raise ShapeError(f"prediction/target shape mismatch: {pred_rows.shape} vs {target_rows.shape}")
    return -(target_rows * np.log(np.maximum(pred_rows, LOG_CLAMP))).sum(axis=-1)


class LayerSpec:
    """One stage of the extractor stack: a dense layer or a relu activation."""

    __slots__ = ("kind", "in_dim", "out_dim")

    def __init__(self, kind, in_dim, out_dim):
        if kind not in ("dense", "relu"):
            raise ConfigError(f"unknown layer kind {kind!r}")
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError("layer dimensions must be positive")
        if kind == "relu" and in_dim != out_dim:
            raise ConfigError("relu cannot change dimensionality")
        self.kind = kind
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)

    def __eq__(self, other):
        return (
            isinstance(other, LayerSpec)
            and (self.kind, self.in_dim, self.out_dim) == (other.kind, other.in_dim, other.out_dim)
        )

    def __repr__(self):
        return f"LayerSpec({self.kind!r}, {self.in_dim}, {self.out_dim})"


def mlp_specs(input_dim, hidden=(256, 128)):
    """Dense+relu stack specs for an MLP extractor ending at hidden[-1] features."""
    specs = []
    prev = int(input_dim)
    for width in hidden:
        specs.append(LayerSpec("dense", prev, width))
        specs.append(LayerSpec("relu", width, width))
        prev = int(width)
    return specs


class ParamBlock:
    """Named (weight, bias) pair; the unit of per-layer norm accounting."""

    __slots__ = ("name", "weight", "bias")

    def __init__(self, name, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 2 or bias.ndim != 1 or bias.shape[0] != weight.shape[1]:
            raise ShapeError(f"block {name!r}: weight {weight.shape} and bias {bias.shape} are inconsistent")
        if weight.dtype != bias.dtype:
            raise ShapeError(f"block {name!r}: weight/bias dtype mismatch")
        self.name = name
        self.weight = weight
        self.bias = bias

    @property
    def num_params(self):
        return self.weight.size + self.bias.size

    def copy(self):
        return ParamBlock(self.name, self.weight.copy(), self.bias.copy())


_MAGIC = b"BLDP"
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_LE = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}


class _BlockSet:
    """Common machinery for parameter and gradient block collections."""

    def __init__(self, blocks):
        blocks = list(blocks)
        if not blocks:
            raise ShapeError("a block set needs at least one block")
        dt = blocks[0].weight.dtype
        for b in blocks:
            if b.weight.dtype != dt:
                raise ShapeError("all blocks must share one dtype")
        self.blocks = blocks

    @property
    def dtype(self):
        return self.blocks[0].weight.dtype

    @property
    def num_params(self):
        return sum(b.num_params for b in self.blocks)

    def names(self):
        return [b.name for b in self.blocks]

    def copy(self):
        return type(self)([b.copy() for b in self.blocks])

    def assert_congruent(self, other):
        if len(self.blocks) != len(other.blocks):
            raise ShapeError("block count mismatch")
        for a, b in zip(self.blocks, other.blocks):
            if a.weight.shape != b.weight.shape or a.bias.shape != b.bias.shape:
                raise ShapeError(f"block {a.name!r}/{b.name!r}: shape mismatch")


class ParameterSet(_BlockSet):
    """Ordered, named parameter blocks with canonical serialization.

    The canonical byte layout is a shape header (magic, dtype code, block
    names and dimensions) followed by every block's weight then bias as
    little-endian floats, blocks in layer order. `payload_nbytes` counts the
    float payload only; that is the figure the memory auditor compares
    against closed-form byte arithmetic.
    """

    @property
    def payload_nbytes(self):
        return self.num_params * self.dtype.itemsize

    def to_bytes(self):
        out = [_MAGIC, struct.pack("<BH", _DTYPE_CODES[self.dtype], len(self.blocks))]
        for b in self.blocks:
            name = b.name.encode("utf-8")
            out.append(struct.pack("<H", len(name)))
            out.append(name)
            out.append(struct.pack("<II", b.weight.shape[0], b.weight.shape[1]))
        le = _LE[self.dtype]
        for b in self.blocks:
            out.append(np.ascontiguousarray(b.weight, dtype=le).tobytes())
            out.append(np.ascontiguousarray(b.bias, dtype=le).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != _MAGIC:
            raise ShapeError("not a canonical parameter blob")
        code, nblocks = struct.unpack_from("<BH", data, 4)
        dtype = _CODE_DTYPES[code]
        off = 7
        shapes = []
        for _ in range(nblocks):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            in_dim, out_dim = struct.unpack_from("<II", data, off)
            off += 8
            shapes.append((name, in_dim, out_dim))
        le = _LE[dtype]
        blocks = []
        for name, in_dim, out_dim in shapes:
            wn = in_dim * out_dim * dtype.itemsize
            w = np.frombuffer(data[off : off + wn], dtype=le).reshape(in_dim, out_dim).astype(dtype)
            off += wn
            bn = out_dim * dtype.itemsize
            b = np.frombuffer(data[off : off + bn], dtype=le).astype(dtype)
            off += bn
            blocks.append(ParamBlock(name, w, b))
        return cls(blocks)

    def sha256(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


class GradientSet(_BlockSet):
    """Gradient blocks mirroring a ParameterSet, with in-place arithmetic."""

    @classmethod
    def zeros_like(cls, params):
        return cls([ParamBlock(b.name, np.zeros_like(b.weight), np.zeros_like(b.bias)) for b in params.blocks])

    def add_(self, other):
        self.assert_congruent(other)
        for a, b in zip(self.blocks, other.blocks):
            a.weight += b.weight
            a.bias += b.bias
        return self

    def scale_(self, factor):
        for b in self.blocks:
            b.weight *= factor
            b.bias *= factor
        return self

    def scale_block_(self, index, factor):
        self.blocks[index].weight *= factor
        self.blocks[index].bias *= factor
        return self

    def norms(self):
        """Per-block L2 norms (weight and bias of a layer form one block)."""
        out = np.empty(len(self.blocks), dtype=np.float64)
        for i, b in enumerate(self.blocks):
            sq = (b.weight * b.weight).sum(dtype=np.float64) + (b.bias * b.bias).sum(dtype=np.float64)
            out[i] = math.sqrt(sq)
        return out

    def max_abs(self):
        return max(max(abs(b.weight).max(initial=0.0), abs(b.bias).max(initial=0.0)) for b in self.blocks)


def layer_norms(grads):
    """Per-layer L2 gradient norms, one entry per named parameter block."""
    return grads.norms()


def sgd_step(params, grads, alpha):
    """In-place gradient-descent update p <- p - alpha * g on every block."""
    if alpha < 0:
        raise ValueError(f"learning rate must be nonnegative, got {alpha}")
    params.assert_congruent(grads)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is caught below
        for pb, gb in zip(params.blocks, grads.blocks):
            pb.weight -= alpha * gb.weight
            pb.bias -= alpha * gb.bias
            if not (np.isfinite(pb.weight).all() and np.isfinite(pb.bias).all()):
                raise NumericError(f"non-finite parameters after SGD step in block {pb.name!r}")
    return params


def forward_stack(specs, blocks, X, check=True):
    """Run a dense/relu stack; returns the final activation and the per-spec
    input cache needed by backward_stack."""
    if X.ndim != 2 or X.shape[1] != specs[0].in_dim:
        raise ShapeError(f"input shape {X.shape} does not match first layer ({specs[0].in_dim} inputs)")
    cache = []
    A = X
    bi = 0
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is caught below
        for i, spec in enumerate(specs):
            cache.append(A)
            if spec.kind == "dense":
                blk = blocks[bi]
                bi += 1
                A = A @ blk.weight + blk.bias
            else:
                A = np.maximum(A, 0)
            if check and not np.isfinite(A).all():
                raise NumericError(f"non-finite activations after layer {i} ({spec.kind})")
    return A, cache


def backward_stack(specs, blocks, cache, d_out, grad_blocks):
    """Accumulate gradients of the stack into grad_blocks given d(loss)/d(output).

    `cache` is the per-spec input list from forward_stack. Returns the
    gradient with respect to the stack input.
    """
    d = d_out
    bi = sum(1 for s in specs if s.kind == "dense")
    for i in range(len(specs) - 1, -1, -1):
        spec = specs[i]
        a_in = cache[i]
        if spec.kind == "relu":
            d = d * (a_in > 0)
        else:
            bi -= 1
            gb = grad_blocks[bi]
            gb.weight += a_in.T @ d
            gb.bias += d.sum(axis=0)
            d = d @ blocks[bi].weight.T
    return d
