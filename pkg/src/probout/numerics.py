"""Dense array arithmetic and deterministic random streams.

Everything downstream builds on two primitives: plain numpy arrays in
row-major layout (float32 while training, float64 when verifying
gradients) and counter-based random streams that can be forked into
independent substreams without any shared mutable state.
"""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from .errors import ProbabilityError, ShapeError

_MASK64 = (1 << 64) - 1

_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    """Working float dtype for newly created tensors."""
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported float dtype: {dtype!r}")
    _default_dtype = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working dtype (float64 for verification runs)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def as_tensor(data, dtype=None) -> np.ndarray:
    return np.asarray(data, dtype=dtype or _default_dtype)


def assert_finite(arr: np.ndarray, context: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {context}")


def affine(W, v, b) -> np.ndarray:
    """result[i] = dot(W[i, :], v) + b[i], with explicit shape checks."""
    W = np.asarray(W)
    v = np.asarray(v)
    b = np.asarray(b)
    if W.ndim != 2 or v.ndim != 1 or b.ndim != 1:
        raise ShapeError(
            f"affine expects matrix/vector/vector, got {W.ndim}-d/{v.ndim}-d/{b.ndim}-d"
        )
    m, d = W.shape
    if v.shape[0] != d:
        raise ShapeError(f"affine: W is {m}x{d} but v has length {v.shape[0]}")
    if b.shape[0] != m:
        raise ShapeError(f"affine: W has {m} rows but b has length {b.shape[0]}")
    return W @ v + b


def _splitmix64(x: int) -> int:
    """SplitMix64 finalizer; a bijection on 64-bit integers."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(*parts: int) -> int:
    """Collapse integers into one well-mixed 64-bit seed."""
    acc = 0x243F6A8885A308D3  # arbitrary nonzero start
    for p in parts:
        acc = _splitmix64(acc ^ _splitmix64(int(p) & _MASK64))
    return acc


class RngStream:
    """Deterministic random stream identified by (seed, stream_id).

    Draws come from a Philox counter-based generator keyed on the pair,
    so an equal (seed, stream_id, draw sequence) replays bit-identically
    on any platform, and distinct stream ids are independent by
    construction. ``fork`` derives a child id from the parent id and an
    integer label without consuming any parent state, which makes a
    whole tree of streams reproducible from the root seed alone.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self._gen: np.random.Generator | None = None

    def _generator(self) -> np.random.Generator:
        if self._gen is None:
            key = (self.stream_id << 64) | self.seed
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def fork(self, label: int) -> "RngStream":
        """Child stream deterministic in (seed, stream_id, label)."""
        child = _splitmix64(self.stream_id ^ _splitmix64(int(label) & _MASK64))
        return RngStream(self.seed, child)

    def uniform(self, size=None):
        """Float64 draws in [0, 1)."""
        return self._generator().random(size)

    def normal(self, size=None):
        return self._generator().standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high), matching numpy Generator semantics."""
        return self._generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def rng_fork(parent: RngStream, label: int) -> RngStream:
    return parent.fork(label)


def _validated_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ProbabilityError(f"probability vector must be 1-d and non-empty, got shape {p.shape}")
    if np.any(p < 0):
        raise ProbabilityError("probability vector has a negative entry")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise ProbabilityError(f"probabilities sum to {total}, beyond 1e-6 of 1")
    return p


def multinomial_draw(p, rng: RngStream) -> int:
    """Sample an index with probability p[i] by inverse CDF.

    Rounding residue beyond the cumulative total is assigned to the
    last index, so the draw always lands in [0, len(p)).
    """
    p = _validated_probs(p)
    cum = np.cumsum(p)
    u = rng.uniform()
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, p.size - 1)


def categorical_from_uniform(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Batched inverse-CDF draw: probs[..., m] rows against uniforms u[...].

    Matches multinomial_draw element-wise: the smallest index whose
    cumulative mass exceeds u, residual mass on the last index.
    """
    cum = np.cumsum(probs, axis=-1, dtype=np.float64)
    idx = np.sum(cum <= u[..., None], axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)
