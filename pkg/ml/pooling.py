"""
Pooling Operators

Average, max, GeM and Group GeM (GGeM) pooling over activation maps, with
exact analytic backward passes for both the activations and the exponents.

GGeM splits the D channels into G sequential groups along the channel axis
and pools every channel of group g with the shared exponent p_g:

    v_d = ((1/|X_d|) * sum_{x in X_d} x ** p_{y(d)}) ** (1 / p_{y(d)})
    y(d) = ceil(d * G / D)             (1-based channel and group ids)

G = 1 is GeM, and GeM with p = 1 is average pooling.

Every kernel here works on arrays shaped (..., tokens, channels) so the toy
ViT can pool a whole batch at once; the public functions take ActivationMaps.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from ml.errors import InvalidArgument, InvalidState
from ml.tensor_core import DEFAULT_CLAMP_EPS, clamp_min, ensure_finite, token_mean, token_sum
from utils.console import warn


STRATEGIES = ('class_token', 'average', 'max', 'gem', 'ggem')

# Lower bound for every pooling exponent, enforced after each optimizer step
EXPONENT_FLOOR = 1e-3

# Above this exponent GeM is evaluated in the log domain
LOG_DOMAIN_THRESHOLD = 20.0

PooledVector = np.ndarray


@dataclass(frozen=True)
class ActivationMaps:
    """
    Patch-token activations X, stored tokens-major (n_tokens x D)

    `side` is the recorded N when the patch-token count is a perfect square N²
    (always the case for ViT activations); hand-made maps may use any count.
    With `has_class_token` the first row is the class token and is excluded
    from every aggregate strategy.
    """
    values: np.ndarray
    side: Optional[int] = None
    has_class_token: bool = False

    @classmethod
    def from_array(cls, values, has_class_token: bool = False, side: Optional[int] = None) -> 'ActivationMaps':
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise InvalidArgument(f"activation maps must be tokens x channels, got shape {values.shape}")

        n_patch = values.shape[0] - (1 if has_class_token else 0)
        if n_patch < 1 or values.shape[1] < 1:
            raise InvalidArgument(f"activation maps need at least one patch token and one channel, got {values.shape}")

        root = math.isqrt(n_patch)
        if side is not None and side * side != n_patch:
            raise InvalidArgument(f"expected {side}² = {side * side} patch tokens, got {n_patch}")
        if side is None and root * root == n_patch:
            side = root

        ensure_finite(values, "activation maps")
        return cls(values=values, side=side, has_class_token=has_class_token)

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.values[1:] if self.has_class_token else self.values

    @property
    def n_tokens(self) -> int:
        return self.patch_tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PoolingConfig:
    """
    Pooling strategy plus its GGeM parameters

    average behaves as GGeM with G=1, p=1 fixed; gem is GGeM with G=1.
    max and class_token carry no exponents.
    """
    strategy: str = 'ggem'
    groups: int = 1
    exponents: Tuple[float, ...] = (3.0,)
    exponents_trainable: bool = True
    clamp_eps: float = DEFAULT_CLAMP_EPS

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"unknown pooling strategy '{self.strategy}' (expected one of {', '.join(STRATEGIES)})")
        if not self.clamp_eps > 0:
            raise InvalidArgument(f"clamp_eps must be positive, got {self.clamp_eps}")

        exponents = tuple(float(p) for p in self.exponents)
        object.__setattr__(self, 'exponents', exponents)

        if self.strategy == 'average':
            object.__setattr__(self, 'groups', 1)
            object.__setattr__(self, 'exponents', (1.0,))
            object.__setattr__(self, 'exponents_trainable', False)
            return
        if self.strategy in ('max', 'class_token'):
            object.__setattr__(self, 'groups', 1)
            object.__setattr__(self, 'exponents', ())
            object.__setattr__(self, 'exponents_trainable', False)
            return

        if self.groups < 1:
            raise InvalidArgument(f"groups must be a positive integer, got {self.groups}")
        if self.strategy == 'gem' and self.groups != 1:
            raise InvalidArgument(f"gem pooling uses a single shared exponent (groups=1), got groups={self.groups}")
        if len(exponents) != self.groups:
            raise InvalidArgument(f"expected {self.groups} exponents (one per group), got {len(exponents)}")
        for p in exponents:
            if not np.isfinite(p) or p < EXPONENT_FLOOR:
                raise InvalidArgument(f"pooling exponents must be >= {EXPONENT_FLOOR}, got {p}")

    @classmethod
    def average(cls) -> 'PoolingConfig':
        return cls(strategy='average')

    @classmethod
    def max(cls) -> 'PoolingConfig':
        return cls(strategy='max')

    @classmethod
    def class_token(cls) -> 'PoolingConfig':
        return cls(strategy='class_token')

    @classmethod
    def gem(cls, p: float = 3.0, trainable: bool = True, clamp_eps: float = DEFAULT_CLAMP_EPS) -> 'PoolingConfig':
        return cls(strategy='gem', groups=1, exponents=(p,), exponents_trainable=trainable, clamp_eps=clamp_eps)

    @classmethod
    def ggem(cls, groups: int, p=3.0, trainable: bool = True, clamp_eps: float = DEFAULT_CLAMP_EPS) -> 'PoolingConfig':
        """GGeM with `groups` exponents; `p` is one initial value or a full list"""
        exponents = tuple(p) if isinstance(p, (list, tuple, np.ndarray)) else (float(p),) * groups
        return cls(strategy='ggem', groups=groups, exponents=exponents,
                   exponents_trainable=trainable, clamp_eps=clamp_eps)

    @property
    def uses_exponents(self) -> bool:
        return self.strategy in ('gem', 'ggem')

    def with_exponents(self, exponents: Sequence[float]) -> 'PoolingConfig':
        return replace(self, exponents=tuple(float(p) for p in exponents))

    def validate_channels(self, channels: int) -> None:
        if self.strategy == 'ggem' and channels % self.groups != 0:
            raise InvalidArgument(
                f"D mod G must be 0: {channels} channels cannot be split into {self.groups} equal groups"
            )


def group_index(i: int, channels: int, groups: int) -> int:
    """1-based group id of 1-based channel i: ceil(i / (D / G))"""
    if groups < 1 or channels % groups != 0:
        raise InvalidArgument(f"D mod G must be 0, got D={channels}, G={groups}")
    if not 1 <= i <= channels:
        raise InvalidArgument(f"channel index must be in 1..{channels}, got {i}")
    return (i * groups + channels - 1) // channels


def channel_exponents(cfg: PoolingConfig, channels: int) -> np.ndarray:
    """Exponent p_{y(d)} for every channel d (sequential grouping)"""
    cfg.validate_channels(channels)
    if cfg.strategy == 'average':
        return np.ones(channels)
    if not cfg.uses_exponents:
        raise InvalidArgument(f"{cfg.strategy} pooling has no exponents")
    return np.repeat(np.asarray(cfg.exponents, dtype=np.float64), channels // cfg.groups)


# ---------------------------------------------------------------------------
# Batched kernels on (..., tokens, channels)
# ---------------------------------------------------------------------------

def _constant_channels(x: np.ndarray) -> np.ndarray:
    return np.all(x == x[..., :1, :], axis=-2)


def arithmetic_mean(x: np.ndarray) -> np.ndarray:
    """Token mean; a constant channel returns its value exactly"""
    return np.where(_constant_channels(x), x[..., 0, :], token_mean(x))


def generalized_mean(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Per-channel power mean of positive x; p has one entry per channel"""
    n_tokens = x.shape[-2]
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), x.shape[-1:])
    out = np.empty(x.shape[:-2] + x.shape[-1:])

    direct = p <= LOG_DOMAIN_THRESHOLD
    if direct.any():
        p_direct = p[direct]
        out[..., direct] = token_mean(x[..., direct] ** p_direct) ** (1.0 / p_direct)
    if (~direct).any():
        p_log = p[~direct]
        z = p_log * np.log(x[..., ~direct]) - np.log(n_tokens)
        out[..., ~direct] = np.exp(logsumexp(z, axis=-2) / p_log)

    # The power mean of equal values is that value, for every p
    return np.where(_constant_channels(x), x[..., 0, :], out)


def generalized_mean_grad_x(x: np.ndarray, p: np.ndarray, v: np.ndarray, grad_out: np.ndarray,
                            eps: float = DEFAULT_CLAMP_EPS) -> np.ndarray:
    """grad_out[d] * (1/|X_d|) * v_d^(1-p_d) * x_i^(p_d-1), evaluated as (x/v)^(p-1)"""
    n_tokens = x.shape[-2]
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), x.shape[-1:])
    v_tokens = v[..., None, :]

    powered = (x / v_tokens) ** (p - 1.0)

    below_one = p < 1.0
    if below_one.any():
        raw = x[..., below_one] ** (p[below_one] - 1.0)
        limit = 1.0 / eps
        if np.any(raw > limit):
            warn(f"GeM backward: x^(p-1) exceeded 1/eps={limit:.3g} for p < 1, clamped")
        powered[..., below_one] = np.minimum(raw, limit) * v_tokens[..., below_one] ** (1.0 - p[below_one])

    powered = np.where(_constant_channels(x)[..., None, :], 1.0, powered)
    return grad_out[..., None, :] * powered / n_tokens


def generalized_mean_grad_p(x: np.ndarray, p: np.ndarray, v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """
    Per-channel contribution grad_out[d] * dv_d/dp_d

    dv/dp = (v/p) * (sum_i w_i ln x_i - ln v), w = softmax_i(p ln x_i)
    """
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), x.shape[-1:])
    log_x = np.log(x)
    z = p * log_x
    weights = np.exp(z - logsumexp(z, axis=-2, keepdims=True))
    dv_dp = v / p * (token_sum(weights * log_x) - np.log(v))
    dv_dp = np.where(_constant_channels(x), 0.0, dv_dp)
    return grad_out * dv_dp


def sum_by_group(per_channel: np.ndarray, groups: int) -> np.ndarray:
    """Reduce (..., D) per-channel values to (G,) group totals (also over leading axes)"""
    channels = per_channel.shape[-1]
    grouped = per_channel.reshape(-1, groups, channels // groups)
    return grouped.sum(axis=(0, 2))


def pool_forward(values: np.ndarray, cfg: PoolingConfig, has_class_token: bool = False) -> np.ndarray:
    """Pool (..., tokens, D) into (..., D); class token (row 0) only used by class_token"""
    if cfg.strategy == 'class_token':
        if not has_class_token:
            raise InvalidArgument("class_token pooling needs the full token sequence including position 0")
        return values[..., 0, :].copy()

    patch = values[..., 1:, :] if has_class_token else values
    cfg.validate_channels(patch.shape[-1])

    if cfg.strategy == 'average':
        return arithmetic_mean(patch)
    if cfg.strategy == 'max':
        return patch.max(axis=-2)

    clamped = clamp_min(patch, cfg.clamp_eps)
    return generalized_mean(clamped, channel_exponents(cfg, patch.shape[-1]))


def pool_backward(values: np.ndarray, cfg: PoolingConfig, grad_out: np.ndarray,
                  has_class_token: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Backward of pool_forward

    Returns:
        (grad wrt values, grad wrt exponents or None when exponents are fixed/absent)
    """
    grad_values = np.zeros_like(values)

    if cfg.strategy == 'class_token':
        if not has_class_token:
            raise InvalidArgument("class_token pooling needs the full token sequence including position 0")
        grad_values[..., 0, :] = grad_out
        return grad_values, None

    offset = 1 if has_class_token else 0
    patch = values[..., offset:, :]
    grad_patch = grad_values[..., offset:, :]
    n_tokens = patch.shape[-2]

    if cfg.strategy == 'average':
        grad_patch += grad_out[..., None, :] / n_tokens
        return grad_values, None

    if cfg.strategy == 'max':
        winners = np.argmax(patch, axis=-2)[..., None, :]
        np.put_along_axis(grad_patch, winners, grad_out[..., None, :], axis=-2)
        return grad_values, None

    clamped = clamp_min(patch, cfg.clamp_eps)
    p = channel_exponents(cfg, patch.shape[-1])
    v = generalized_mean(clamped, p)

    passes = patch > cfg.clamp_eps
    grad_patch += generalized_mean_grad_x(clamped, p, v, grad_out, cfg.clamp_eps) * passes

    grad_p = None
    if cfg.exponents_trainable:
        grad_p = sum_by_group(generalized_mean_grad_p(clamped, p, v, grad_out), cfg.groups)
    return grad_values, grad_p


# ---------------------------------------------------------------------------
# Public single-map operators
# ---------------------------------------------------------------------------

def avg_pool(x: ActivationMaps) -> PooledVector:
    """Mean over tokens per channel"""
    return arithmetic_mean(x.patch_tokens)


def max_pool(x: ActivationMaps) -> PooledVector:
    """Maximum over tokens per channel"""
    return x.patch_tokens.max(axis=0)


def gem_pool(x: ActivationMaps, p: float, clamp_eps: float = DEFAULT_CLAMP_EPS) -> PooledVector:
    """GeM with one exponent shared by every channel"""
    if not p > 0:
        raise InvalidArgument(f"GeM exponent must be positive, got {p}")
    return generalized_mean(clamp_min(x.patch_tokens, clamp_eps), np.full(x.channels, float(p)))


def ggem_pool(x: ActivationMaps, cfg: PoolingConfig) -> PooledVector:
    """GeM with one exponent per sequential channel group"""
    if cfg.strategy != 'ggem':
        raise InvalidArgument(f"ggem_pool needs a ggem config, got '{cfg.strategy}'")
    return pool_forward(x.patch_tokens, cfg)


def pool(x: ActivationMaps, cfg: PoolingConfig) -> PooledVector:
    """Dispatch to the configured strategy"""
    return pool_forward(x.values, cfg, has_class_token=x.has_class_token)


def _check_backward_shapes(x: ActivationMaps, v: np.ndarray, grad_out: np.ndarray) -> None:
    channels = x.channels
    if np.shape(v) != (channels,) or np.shape(grad_out) != (channels,):
        raise InvalidArgument(
            f"expected pooled vector and grad_out of shape ({channels},), got {np.shape(v)} and {np.shape(grad_out)}"
        )
    ensure_finite(np.asarray(grad_out), "grad_out")


def gem_backward_x(x: ActivationMaps, p, v: PooledVector, grad_out: np.ndarray,
                   eps: float = DEFAULT_CLAMP_EPS) -> np.ndarray:
    """
    Gradient of the GeM output wrt its (clamped) input tokens

    Args:
        x: activation maps, already clamped to >= eps
        p: scalar exponent or one exponent per channel
        v: forward output for (x, p)
        grad_out: upstream gradient, one value per channel

    Returns:
        n_tokens x D gradient
    """
    _check_backward_shapes(x, v, grad_out)
    p = np.broadcast_to(np.asarray(p, dtype=np.float64), (x.channels,))
    return generalized_mean_grad_x(x.patch_tokens, p, np.asarray(v, dtype=np.float64),
                                   np.asarray(grad_out, dtype=np.float64), eps)


def gem_backward_p(x: ActivationMaps, cfg: PoolingConfig, v: PooledVector, grad_out: np.ndarray) -> np.ndarray:
    """Gradient wrt the G exponents; contributions of a group's channels are summed"""
    if not cfg.uses_exponents:
        raise InvalidArgument(f"{cfg.strategy} pooling has no exponents")
    if not cfg.exponents_trainable:
        raise InvalidState("exponent gradient requested but exponents are not trainable")
    _check_backward_shapes(x, v, grad_out)

    p = channel_exponents(cfg, x.channels)
    per_channel = generalized_mean_grad_p(x.patch_tokens, p, np.asarray(v, dtype=np.float64),
                                          np.asarray(grad_out, dtype=np.float64))
    return sum_by_group(per_channel, cfg.groups)


def gradient_concentration_table(channel: Sequence[float], p_values: Sequence[float]) -> np.ndarray:
    """
    dv/dx_i for one channel under several exponents (gradient heatmap data)

    Returns:
        len(p_values) x len(channel) array, row k computed with p_values[k]
    """
    x = ActivationMaps.from_array(clamp_min(np.asarray(channel, dtype=np.float64)))
    rows = []
    for p in p_values:
        v = gem_pool(x, p)
        rows.append(gem_backward_x(x, p, v, np.ones(1))[:, 0])
    return np.array(rows)
