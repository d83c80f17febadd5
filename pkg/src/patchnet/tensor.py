"""Dense array primitives and a deterministic random source.

Tensors are plain numpy ndarrays in row-major (C) order; ``float32`` is the
working precision for training and inference, ``float64`` is used where
finite-difference headroom is needed.  All randomness flows through ``Rng``,
a counter-based SplitMix64 generator whose output stream depends only on the
seed, bit for bit, on every platform.
"""

from __future__ import annotations

import math

import numpy as np

FLOAT_MODES = {"f32": np.float32, "f64": np.float64}

# SplitMix64 constants (Steele, Lea & Flood's mixing finalizer).
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 output function on uint64 values (vectorized)."""
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


class Rng:
    """Counter-based SplitMix64 stream.

    The i-th raw output is ``mix64(seed + i * GAMMA)``, so the whole stream
    is a pure function of ``(seed, counter)`` and blocks of any size can be
    produced with vectorized uint64 arithmetic.  Normal samples use the
    Box-Muller transform and are generated in pairs: a request for n samples
    always consumes 2 * ceil(n / 2) counter steps.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & _MASK
        self.counter = counter

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def uniform01(self, n: int) -> np.ndarray:
        """n float64 samples uniform on [0, 1) using the top 53 bits."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform01(n)
        return (low + (high - low) * u).astype(dtype).reshape(shape)

    def normal(self, mean: float, std: float, shape, dtype=np.float32) -> np.ndarray:
        if std <= 0:
            raise ValueError(f"std must be positive, got {std}")
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        # u1 shifted into (0, 1] so log() is finite.
        u1 = 1.0 - self.uniform01(pairs)
        u2 = self.uniform01(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).astype(dtype).reshape(shape)

    def randint(self, n: int) -> int:
        """One integer uniform on [0, n)."""
        return min(int(self.uniform01(1)[0] * n), n - 1)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def derive(self, tag: int) -> "Rng":
        """Independent child stream, e.g. one per training epoch."""
        x = ((self.seed ^ (tag & _MASK)) + 0x9E3779B97F4A7C15) & _MASK
        child = _mix64(np.array([x], dtype=np.uint64))[0]
        return Rng(int(child))


def normal_sample(rng: Rng, mean: float, std: float, shape, dtype=np.float32) -> np.ndarray:
    """Normal samples with the documented Box-Muller transform."""
    return rng.normal(mean, std, shape, dtype)


def flat_index(shape, indices) -> int:
    """Row-major flat offset: ((i0*s1 + i1)*s2 + ...) + ik."""
    if len(shape) != len(indices):
        raise ValueError(f"rank mismatch: shape {tuple(shape)} vs indices {tuple(indices)}")
    off = 0
    for dim, i in zip(shape, indices):
        if not 0 <= i < dim:
            raise IndexError(f"index {i} out of range for dim {dim}")
        off = off * dim + i
    return off


def elementwise(op_kind: str, a: np.ndarray, b=None) -> np.ndarray:
    """Pointwise add/sub/mul on same-shape tensors, scale by scalar, or neg."""
    a = np.asarray(a)
    if op_kind in ("add", "sub", "mul"):
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op_kind](a, b)
    if op_kind == "scale":
        return a * a.dtype.type(b)
    if op_kind == "neg":
        return -a
    raise ValueError(f"unknown op_kind {op_kind!r}")


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of pairwise products over equally sized tensors."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size != b.size:
        raise ValueError(f"element count mismatch: {a.size} vs {b.size}")
    return float(np.dot(a.ravel(), b.ravel()))


def fsum(values) -> float:
    """Exactly rounded sum; independent of summand order."""
    return math.fsum(float(v) for v in values)
