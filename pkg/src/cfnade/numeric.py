"""Small dense numeric kernel shared by the model, losses and tests.

All arrays are float64 numpy arrays. Randomness goes through :class:`SeededRng`,
a thin wrapper over numpy's PCG64 bit generator so that a seed pins the full
draw sequence on every platform numpy supports.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

DTYPE = np.float64


class SeededRng:
    """PCG64-backed random stream with an explicit seed.

    ``spawn(worker_id)`` derives an independent sub-stream keyed on
    ``(seed, worker_id)``; a single instance must not be shared between
    concurrent workers.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, worker_id: int) -> "SeededRng":
        child = SeededRng.__new__(SeededRng)
        child.seed = self.seed
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(worker_id),))
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def tanh(x):
    return np.tanh(np.asarray(x, dtype=DTYPE))


def log_softmax(scores, axis: int = -1) -> np.ndarray:
    """Log-probabilities of a softmax over ``axis``, max-shifted for stability."""
    s = np.asarray(scores, dtype=DTYPE)
    if s.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    shifted = s - np.max(s, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(scores, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(scores, axis=axis))


def logsumexp(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=DTYPE)
    m = np.max(s, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(s - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def finite_diff_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``.

    ``theta`` is not modified. Raises ``FloatingPointError`` naming the
    coordinate when ``f`` returns a non-finite value.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=DTYPE)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(theta)
        flat[i] = orig - h
        f_minus = f(theta)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value at index {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(theta.shape)


def sample_permutation(rng: SeededRng, n: int) -> np.ndarray:
    """Uniform random ordering of ``range(n)`` (0-based positions)."""
    if n < 1:
        raise ValueError("permutation length must be at least 1")
    # numpy's permutation is an in-place Fisher-Yates shuffle.
    return rng.permutation(n)


def glorot_uniform(rng: SeededRng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)
