"""Deterministic float32 kernels, a SplitMix64 PRNG and the CTED tensor file format.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank <= 3.
Every reduction runs in a fixed ascending order with float32 accumulators so
results are bit-identical across runs, thread counts and BLAS builds.
Transcendentals are evaluated in float64 and rounded once to float32.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

F32 = np.float32
MAX_RANK = 3

MAGIC = b"CTED"
VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_NEG_53 = 2.0**-53


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TensorFileError(ValueError):
    pass


def as_tensor(x, dims: Sequence[int] | None = None) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=F32)
    if dims is not None:
        t = t.reshape(tuple(dims))
    if t.ndim > MAX_RANK:
        raise ShapeError(f"rank {t.ndim} exceeds {MAX_RANK}")
    return t


def zeros(dims: Sequence[int]) -> np.ndarray:
    return np.zeros(tuple(dims), dtype=F32)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def _check_f32(*ts: np.ndarray) -> None:
    for t in ts:
        if t.dtype != F32:
            raise TypeError(f"expected float32 tensor, got {t.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with the inner sum taken in ascending index order.

    Works on matrices and on rank-3 batches (leading batch axis on both
    operands). Each partial sum is rounded to float32, exactly like a scalar
    triple loop.
    """
    _check_f32(a, b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two rank-2 or two rank-3 tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    k = a.shape[-1]
    shape = a.shape[:-1] + b.shape[-1:]
    out = np.zeros(shape, dtype=F32)
    tmp = np.empty(shape, dtype=F32)
    for p in range(k):
        np.multiply(a[..., :, p : p + 1], b[..., p : p + 1, :], out=tmp)
        out += tmp
    return check_finite(out, "matmul output")


def row_sum(a: np.ndarray) -> np.ndarray:
    """Sum along the last axis, left to right, float32 accumulator. Keeps the axis."""
    acc = np.zeros(a.shape[:-1] + (1,), dtype=F32)
    for j in range(a.shape[-1]):
        acc += a[..., j : j + 1]
    return acc


def exp(a: np.ndarray) -> np.ndarray:
    return np.exp(a.astype(np.float64)).astype(F32)


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    ``-inf`` entries are allowed (masked logits) as long as every row keeps at
    least one finite entry.
    """
    _check_f32(a)
    m = a.max(axis=-1, keepdims=True)
    e = exp(a - m)
    out = e / row_sum(e)
    return check_finite(out, "softmax output")


def layer_norm(a: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    _check_f32(a, gain, bias)
    check_finite(a, "layer_norm input")
    n = F32(a.shape[-1])
    mean = row_sum(a) / n
    centered = a - mean
    var = row_sum(centered * centered) / n
    denom = np.sqrt(var + F32(eps))
    out = centered / denom * gain + bias
    return check_finite(out, "layer_norm output")


def silu(a: np.ndarray) -> np.ndarray:
    x = a.astype(np.float64)
    return (x / (1.0 + np.exp(-x))).astype(F32)


def gelu(a: np.ndarray) -> np.ndarray:
    x = a.astype(np.float64)
    return (0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))).astype(F32)


def sinusoidal(positions: Iterable[float], dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding table: ``[sin(p*w_0..), cos(p*w_0..)]`` per row."""
    pos = np.asarray(list(positions), dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = pos * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(F32)


# ---------------------------------------------------------------------------
# PRNG


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Prng:
    """SplitMix64 stream. ``next_u64`` and ``take`` share one counter."""

    def __init__(self, seed: int):
        self.state = int(seed) & 0xFFFFFFFFFFFFFFFF

    def take(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * _GOLDEN
            out = _mix(states)
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
        return out

    def next_u64(self) -> int:
        return int(self.take(1)[0])

    def uniform(self, n: int) -> np.ndarray:
        """Uniform doubles in (0, 1]: ``((x >> 11) + 0.5) * 2**-53``."""
        bits = self.take(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * _TWO_NEG_53


def randn(prng: Prng, dims: Sequence[int]) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) > MAX_RANK or any(d <= 0 for d in dims):
        raise ShapeError(f"invalid dims {dims}")
    n = math.prod(dims)
    pairs = (n + 1) // 2
    u = prng.uniform(2 * pairs).reshape(pairs, 2)
    r = np.sqrt(-2.0 * np.log(u[:, 0]))
    theta = 2.0 * math.pi * u[:, 1]
    z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
    return z[:n].astype(F32).reshape(dims)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# CTED files


def tensor_bytes(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    header = MAGIC + struct.pack("<II", VERSION, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + t.astype("<f4").tobytes(order="C")


def save_tensor(path: str | Path, t: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise TensorFileError("truncated file: header incomplete")
    if buf[:4] != MAGIC:
        raise TensorFileError(f"bad magic {buf[:4]!r}")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if rank > MAX_RANK:
        raise TensorFileError(f"rank {rank} exceeds {MAX_RANK}")
    offset = 12 + 8 * rank
    if len(buf) < offset:
        raise TensorFileError("truncated file: dims incomplete")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = math.prod(dims)
    if 4 * count >= 2**63:
        raise TensorFileError(f"dim overflow: {dims}")
    expected = offset + 4 * count
    if len(buf) < expected:
        raise TensorFileError(f"truncated file: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise TensorFileError(f"trailing bytes: expected {expected}, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return data.astype(F32).reshape(dims)


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
