"""
Tensor Core

Dense-tensor substrate for the pooling operators and the toy ViT.

Tensors are plain numpy arrays: float64 for all computation, float32 only when
written to a checkpoint. Activation maps are stored tokens-major then channels
(N² × D, row-major), so a channel's tokens sit at stride D. Reductions over
tokens first move the token axis to the contiguous position so numpy's pairwise
summation applies in ascending token order.
"""

from typing import Callable

import numpy as np

from ml.errors import InvalidArgument, NumericFailure


DEFAULT_CLAMP_EPS = 1e-6

# Identifier stored in checkpoints next to the seed
RNG_ALGORITHM_PCG64 = 1


class Rng:
    """
    Seeded random stream (numpy PCG64)

    Identical seeds give identical streams on every platform numpy supports.
    Single owner; use spawn() to derive independent streams for workers.
    """

    algorithm_id = RNG_ALGORITHM_PCG64

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise InvalidArgument(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def spawn(self, stream_id: int) -> 'Rng':
        """Derive an independent stream: seed' = hash(seed, stream_id)"""
        derived = np.random.SeedSequence([self.seed, int(stream_id)])
        return Rng(int(derived.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def normal(self, scale: float, shape) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, shape=None):
        return self.generator.random(size=shape)


def clamp_min(x: np.ndarray, eps: float = DEFAULT_CLAMP_EPS) -> np.ndarray:
    """Elementwise max(x, eps); keeps every element positive before a power"""
    if not eps > 0:
        raise InvalidArgument(f"clamp floor must be positive, got {eps}")
    return np.maximum(np.asarray(x, dtype=np.float64), eps)


def token_sum(values: np.ndarray) -> np.ndarray:
    """Sum over the token axis (-2) with pairwise summation in ascending token order"""
    moved = np.ascontiguousarray(np.swapaxes(values, -1, -2))
    return moved.sum(axis=-1)


def token_mean(values: np.ndarray) -> np.ndarray:
    return token_sum(values) / values.shape[-2]


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a scalar function

    Args:
        f: scalar function of an array shaped like x
        x: evaluation point (not modified)
        h: step size

    Returns:
        array shaped like x with (f(x + h e_i) - f(x - h e_i)) / 2h per element
    """
    if not h > 0:
        raise InvalidArgument(f"step size must be positive, got {h}")

    point = np.array(x, dtype=np.float64, copy=True)
    flat = point.reshape(-1)
    grad = np.zeros_like(flat)

    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = float(f(point))
        flat[i] = original - h
        f_minus = float(f(point))
        flat[i] = original

        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericFailure(f"non-finite function value at index {i}", where=str(i))
        grad[i] = (f_plus - f_minus) / (2.0 * h)

    return grad.reshape(point.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max abs difference normalised by the larger tensor magnitude (never below `floor`)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def ensure_finite(values: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericFailure(f"non-finite values in {where}", where=where)
    return values
