"""
Toy Vision Transformer

A minimal pre-norm ViT encoder with hand-derived backward passes:

    image -> patches -> linear projection -> [class] token + positional embedding
          -> L x (LN -> multi-head attention -> residual -> LN -> GELU MLP -> residual)
          -> final LN -> pooling head -> linear classifier

Small enough to gradient-check every parameter against finite differences,
structured enough (D = heads * head_dim) that GGeM with G = heads maps one
exponent onto each head's channel slice.

All batch arrays are (batch, tokens, channels); token 0 is the class token.
"""

import copy
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ml.errors import FormatError, InvalidArgument, NumericFailure
from ml.pooling import EXPONENT_FLOOR, STRATEGIES, PoolingConfig, pool_backward, pool_forward
from ml.tensor_core import RNG_ALGORITHM_PCG64, Rng, ensure_finite
from utils.file_io import PathLike
from utils.tensor_container import read_container, write_container


LAYER_NORM_EPS = 1e-5

# Weight init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)); class token and positional
# embedding: U(-EMBED_INIT_SCALE, EMBED_INIT_SCALE); biases 0; LN scale 1, shift 0
EMBED_INIT_SCALE = 0.1

GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class ToyViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels_in: int = 1
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 2
    mlp_ratio: float = 2.0
    pooling: PoolingConfig = field(default_factory=lambda: PoolingConfig.ggem(groups=4, p=3.0))
    classes: int = 3

    def __post_init__(self):
        for name in ('image_size', 'patch_size', 'channels_in', 'embed_dim', 'heads', 'blocks', 'classes'):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise InvalidArgument(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise InvalidArgument(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if not self.mlp_ratio > 0:
            raise InvalidArgument(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        self.pooling.validate_channels(self.embed_dim)

    @property
    def grid(self) -> int:
        """N: patches per image side"""
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels_in


@dataclass
class AttentionRecord:
    """
    Attention captured for one image

    attention[b]: (heads, T, T) row-stochastic matrices of block b
    head_outputs[b]: (heads, T, head_dim) per-head attention outputs (A @ V,
    before the output projection)
    """
    attention: List[np.ndarray]
    head_outputs: List[np.ndarray]
    grid: int
    patch_size: int

    @property
    def blocks(self) -> int:
        return len(self.attention)


@dataclass
class ForwardResult:
    logits: np.ndarray
    pooled: np.ndarray
    records: Optional[List[AttentionRecord]] = None
    cache: Optional[dict] = None


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, S, S, C) -> (B, N², R*R*C); patches row-major, pixels row-major inside"""
    batch, size, _, channels = images.shape
    grid = size // patch_size
    blocks = images.reshape(batch, grid, patch_size, grid, patch_size, channels)
    return blocks.transpose(0, 1, 3, 2, 4, 5).reshape(batch, grid * grid, patch_size * patch_size * channels)


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
    x_hat = centered * inv_std
    return gamma * x_hat + beta, (x_hat, inv_std)


def layer_norm_backward(d_out: np.ndarray, cache, gamma: np.ndarray):
    x_hat, inv_std = cache
    width = d_out.shape[-1]
    d_gamma = (d_out * x_hat).reshape(-1, width).sum(axis=0)
    d_beta = d_out.reshape(-1, width).sum(axis=0)
    d_x_hat = d_out * gamma
    d_x = inv_std * (
        d_x_hat
        - d_x_hat.mean(axis=-1, keepdims=True)
        - x_hat * (d_x_hat * x_hat).mean(axis=-1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


def gelu(u: np.ndarray) -> np.ndarray:
    """tanh approximation"""
    return 0.5 * u * (1.0 + np.tanh(GELU_C * (u + 0.044715 * u ** 3)))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t ** 2) * GELU_C * (1.0 + 3 * 0.044715 * u ** 2)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    batch, tokens, width = t.shape
    return t.reshape(batch, tokens, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads(t: np.ndarray) -> np.ndarray:
    batch, heads, tokens, head_dim = t.shape
    return t.transpose(0, 2, 1, 3).reshape(batch, tokens, heads * head_dim)


def _matmul_grad(inputs: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Weight gradient of y = inputs @ W summed over every leading axis"""
    return inputs.reshape(-1, inputs.shape[-1]).T @ d_out.reshape(-1, d_out.shape[-1])


def attention_forward(h: np.ndarray, p: Dict[str, np.ndarray], prefix: str, heads: int):
    q = _split_heads(h @ p[f'{prefix}.wq'] + p[f'{prefix}.bq'], heads)
    k = _split_heads(h @ p[f'{prefix}.wk'] + p[f'{prefix}.bk'], heads)
    v = _split_heads(h @ p[f'{prefix}.wv'] + p[f'{prefix}.bv'], heads)

    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    head_out = attn @ v
    merged = _merge_heads(head_out)
    out = merged @ p[f'{prefix}.wo'] + p[f'{prefix}.bo']

    cache = {'h': h, 'q': q, 'k': k, 'v': v, 'attn': attn, 'head_out': head_out, 'merged': merged}
    return out, cache


def attention_backward(d_out: np.ndarray, cache: dict, p: Dict[str, np.ndarray], prefix: str,
                       grads: Dict[str, np.ndarray]) -> np.ndarray:
    heads = cache['q'].shape[1]
    q, k, v, attn = cache['q'], cache['k'], cache['v'], cache['attn']
    h = cache['h']

    grads[f'{prefix}.wo'] = _matmul_grad(cache['merged'], d_out)
    grads[f'{prefix}.bo'] = d_out.reshape(-1, d_out.shape[-1]).sum(axis=0)

    d_head_out = _split_heads(d_out @ p[f'{prefix}.wo'].T, heads)
    d_attn = d_head_out @ v.transpose(0, 1, 3, 2)
    d_v = attn.transpose(0, 1, 3, 2) @ d_head_out

    scale = 1.0 / np.sqrt(q.shape[-1])
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True)) * scale
    d_q = _merge_heads(d_scores @ k)
    d_k = _merge_heads(d_scores.transpose(0, 1, 3, 2) @ q)
    d_v = _merge_heads(d_v)

    d_h = np.zeros_like(h)
    for name, d_proj in (('q', d_q), ('k', d_k), ('v', d_v)):
        grads[f'{prefix}.w{name}'] = _matmul_grad(h, d_proj)
        grads[f'{prefix}.b{name}'] = d_proj.reshape(-1, d_proj.shape[-1]).sum(axis=0)
        d_h += d_proj @ p[f'{prefix}.w{name}'].T
    return d_h


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient wrt the logits"""
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -float(log_probs[np.arange(batch), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(batch), labels] -= 1.0
    return loss, grad / batch


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class ToyViTModel:
    """
    Parameters and forward/backward passes of the toy ViT

    Parameters live in one ordered name -> array dict (float64):
        patch.weight, patch.bias, cls_token, pos_embed,
        blocks.{b}.ln1.*, blocks.{b}.attn.{wq,bq,wk,bk,wv,bv,wo,bo},
        blocks.{b}.ln2.*, blocks.{b}.mlp.{w1,b1,w2,b2},
        norm.gamma, norm.beta, head.weight, head.bias, pool.p (gem/ggem only)
    """

    def __init__(self, config: ToyViTConfig, params: Dict[str, np.ndarray], seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed

    @classmethod
    def initialize(cls, config: ToyViTConfig, rng: Rng) -> 'ToyViTModel':
        D, hidden = config.embed_dim, config.mlp_hidden

        def linear(fan_in: int, fan_out: int) -> np.ndarray:
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, (fan_in, fan_out))

        params = {
            'patch.weight': linear(config.patch_dim, D),
            'patch.bias': np.zeros(D),
            'cls_token': rng.uniform(-EMBED_INIT_SCALE, EMBED_INIT_SCALE, (1, D)),
            'pos_embed': rng.uniform(-EMBED_INIT_SCALE, EMBED_INIT_SCALE, (config.seq_len, D)),
        }
        for b in range(config.blocks):
            prefix = f'blocks.{b}'
            params[f'{prefix}.ln1.gamma'] = np.ones(D)
            params[f'{prefix}.ln1.beta'] = np.zeros(D)
            for name in ('q', 'k', 'v', 'o'):
                params[f'{prefix}.attn.w{name}'] = linear(D, D)
                params[f'{prefix}.attn.b{name}'] = np.zeros(D)
            params[f'{prefix}.ln2.gamma'] = np.ones(D)
            params[f'{prefix}.ln2.beta'] = np.zeros(D)
            params[f'{prefix}.mlp.w1'] = linear(D, hidden)
            params[f'{prefix}.mlp.b1'] = np.zeros(hidden)
            params[f'{prefix}.mlp.w2'] = linear(hidden, D)
            params[f'{prefix}.mlp.b2'] = np.zeros(D)
        params['norm.gamma'] = np.ones(D)
        params['norm.beta'] = np.zeros(D)
        params['head.weight'] = linear(D, config.classes)
        params['head.bias'] = np.zeros(config.classes)
        if config.pooling.uses_exponents:
            params['pool.p'] = np.asarray(config.pooling.exponents, dtype=np.float64)

        return cls(config, params, seed=rng.seed)

    def copy(self) -> 'ToyViTModel':
        return ToyViTModel(self.config, {k: v.copy() for k, v in self.params.items()}, seed=self.seed)

    @property
    def pooling_config(self) -> PoolingConfig:
        """Pooling config carrying the model's current exponents"""
        pooling = self.config.pooling
        if 'pool.p' in self.params:
            return pooling.with_exponents(self.params['pool.p'])
        return pooling

    @property
    def exponents(self) -> np.ndarray:
        return self.params['pool.p'].copy() if 'pool.p' in self.params else np.zeros(0)

    def trainable_names(self, tune_blocks: int = -1) -> List[str]:
        """
        Parameters updated by the optimizer

        Args:
            tune_blocks: -1 or L trains everything; 0 is linear probing
                (classifier + exponents); k trains the last k blocks, the final
                norm, the classifier and the exponents
        """
        L = self.config.blocks
        if tune_blocks < 0 or tune_blocks >= L:
            names = list(self.params)
        else:
            first_tuned = L - tune_blocks
            names = [n for n in self.params if n.startswith('blocks.') and int(n.split('.')[1]) >= first_tuned]
            names += ['head.weight', 'head.bias']
            if tune_blocks > 0:
                names += ['norm.gamma', 'norm.beta']
            if 'pool.p' in self.params:
                names.append('pool.p')

        if not self.config.pooling.exponents_trainable and 'pool.p' in names:
            names.remove('pool.p')
        return names

    # -- forward ----------------------------------------------------------

    def _as_batch(self, images) -> np.ndarray:
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        expected = (cfg.image_size, cfg.image_size, cfg.channels_in)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != expected:
            raise InvalidArgument(f"expected images of shape {expected} (optionally batched), got {images.shape}")
        return images

    def patch_embed(self, images) -> Tuple[np.ndarray, np.ndarray]:
        """Images -> (token sequences (B, N²+1, D), flattened patches)"""
        p = self.params
        patches = patchify(self._as_batch(images), self.config.patch_size)
        embedded = patches @ p['patch.weight'] + p['patch.bias']
        cls_tokens = np.broadcast_to(p['cls_token'], (embedded.shape[0], 1, self.config.embed_dim))
        return np.concatenate([cls_tokens, embedded], axis=1) + p['pos_embed'], patches

    def _block_forward(self, b: int, x: np.ndarray):
        p = self.params
        prefix = f'blocks.{b}'
        h1, ln1 = layer_norm_forward(x, p[f'{prefix}.ln1.gamma'], p[f'{prefix}.ln1.beta'])
        attn_out, attn_cache = attention_forward(h1, p, f'{prefix}.attn', self.config.heads)
        x1 = x + attn_out
        h2, ln2 = layer_norm_forward(x1, p[f'{prefix}.ln2.gamma'], p[f'{prefix}.ln2.beta'])
        u = h2 @ p[f'{prefix}.mlp.w1'] + p[f'{prefix}.mlp.b1']
        g = gelu(u)
        x2 = x1 + g @ p[f'{prefix}.mlp.w2'] + p[f'{prefix}.mlp.b2']
        return x2, {'ln1': ln1, 'attn': attn_cache, 'ln2': ln2, 'h2': h2, 'u': u, 'g': g}

    def forward(self, images, capture: bool = False, keep_cache: bool = False) -> ForwardResult:
        """
        Run the encoder, pooling head and classifier on a batch

        Args:
            images: (S, S, C) or (B, S, S, C) pixel array
            capture: fill one AttentionRecord per image
            keep_cache: keep intermediates for backward()
        """
        p = self.params
        x, patches = self.patch_embed(images)
        block_caches = []

        for b in range(self.config.blocks):
            x, block_cache = self._block_forward(b, x)
            if not np.all(np.isfinite(x)):
                raise NumericFailure(f"non-finite activations in block {b}", where=f"block {b}")
            block_caches.append(block_cache)

        z, norm_cache = layer_norm_forward(x, p['norm.gamma'], p['norm.beta'])
        pooling = self.pooling_config
        pooled = pool_forward(z, pooling, has_class_token=True)
        logits = pooled @ p['head.weight'] + p['head.bias']
        ensure_finite(logits, "classifier logits")

        records = None
        if capture:
            records = [
                AttentionRecord(
                    attention=[c['attn']['attn'][i].copy() for c in block_caches],
                    head_outputs=[c['attn']['head_out'][i].copy() for c in block_caches],
                    grid=self.config.grid,
                    patch_size=self.config.patch_size,
                )
                for i in range(z.shape[0])
            ]

        cache = None
        if keep_cache:
            cache = {'patches': patches, 'blocks': block_caches, 'norm': norm_cache,
                     'z': z, 'pooled': pooled, 'pooling': pooling}
        return ForwardResult(logits=logits, pooled=pooled, records=records, cache=cache)

    # -- backward ---------------------------------------------------------

    def _block_backward(self, b: int, d_x2: np.ndarray, cache: dict, grads: Dict[str, np.ndarray]) -> np.ndarray:
        p = self.params
        prefix = f'blocks.{b}'

        grads[f'{prefix}.mlp.w2'] = _matmul_grad(cache['g'], d_x2)
        grads[f'{prefix}.mlp.b2'] = d_x2.reshape(-1, d_x2.shape[-1]).sum(axis=0)
        d_u = (d_x2 @ p[f'{prefix}.mlp.w2'].T) * gelu_grad(cache['u'])
        grads[f'{prefix}.mlp.w1'] = _matmul_grad(cache['h2'], d_u)
        grads[f'{prefix}.mlp.b1'] = d_u.reshape(-1, d_u.shape[-1]).sum(axis=0)
        d_h2 = d_u @ p[f'{prefix}.mlp.w1'].T

        d_ln2, grads[f'{prefix}.ln2.gamma'], grads[f'{prefix}.ln2.beta'] = \
            layer_norm_backward(d_h2, cache['ln2'], p[f'{prefix}.ln2.gamma'])
        d_x1 = d_x2 + d_ln2

        d_h1 = attention_backward(d_x1, cache['attn'], p, f'{prefix}.attn', grads)
        d_ln1, grads[f'{prefix}.ln1.gamma'], grads[f'{prefix}.ln1.beta'] = \
            layer_norm_backward(d_h1, cache['ln1'], p[f'{prefix}.ln1.gamma'])
        return d_x1 + d_ln1

    def backward(self, cache: dict, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of every parameter given dLoss/dlogits (pool.p only when trainable)"""
        p = self.params
        grads: Dict[str, np.ndarray] = {}

        grads['head.weight'] = cache['pooled'].T @ grad_logits
        grads['head.bias'] = grad_logits.sum(axis=0)
        d_pooled = grad_logits @ p['head.weight'].T

        d_z, d_exponents = pool_backward(cache['z'], cache['pooling'], d_pooled, has_class_token=True)
        if d_exponents is not None:
            grads['pool.p'] = d_exponents

        d_x, grads['norm.gamma'], grads['norm.beta'] = layer_norm_backward(d_z, cache['norm'], p['norm.gamma'])

        for b in reversed(range(self.config.blocks)):
            d_x = self._block_backward(b, d_x, cache['blocks'][b], grads)

        grads['pos_embed'] = d_x.sum(axis=0)
        grads['cls_token'] = d_x[:, :1, :].sum(axis=0)
        d_embedded = d_x[:, 1:, :]
        grads['patch.weight'] = _matmul_grad(cache['patches'], d_embedded)
        grads['patch.bias'] = d_embedded.reshape(-1, d_embedded.shape[-1]).sum(axis=0)
        return grads

    def loss(self, images, labels) -> float:
        result = self.forward(images)
        return cross_entropy(result.logits, np.asarray(labels, dtype=np.int64))[0]

    def loss_and_grads(self, images, labels) -> Tuple[float, Dict[str, np.ndarray]]:
        result = self.forward(images, keep_cache=True)
        loss, grad_logits = cross_entropy(result.logits, np.asarray(labels, dtype=np.int64))
        return loss, self.backward(result.cache, grad_logits)

    def predict(self, images, chunk: int = 256) -> Tuple[np.ndarray, np.ndarray]:
        """(predicted labels, pooled descriptors) for a batch, evaluated in chunks"""
        images = self._as_batch(images)
        labels, pooled = [], []
        for start in range(0, images.shape[0], chunk):
            result = self.forward(images[start:start + chunk])
            labels.append(result.logits.argmax(axis=-1))
            pooled.append(result.pooled)
        return np.concatenate(labels), np.concatenate(pooled)

    def project_exponents(self) -> None:
        if 'pool.p' in self.params:
            np.maximum(self.params['pool.p'], EXPONENT_FLOOR, out=self.params['pool.p'])


def vit_forward(image, model: ToyViTModel, capture: bool = False):
    """
    Single-image forward pass

    Returns:
        (logits (K,), pooled (D,), AttentionRecord or None)
    """
    result = model.forward(image, capture=capture)
    record = result.records[0] if capture else None
    return result.logits[0], result.pooled[0], record


def patch_embed(image, model: ToyViTModel) -> np.ndarray:
    """Single image -> (N²+1, D) token sequence"""
    return model.patch_embed(image)[0][0]


# ---------------------------------------------------------------------------
# Checkpoints (GGEM container)
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = ('image_size', 'patch_size', 'channels_in', 'embed_dim', 'heads', 'blocks', 'classes')


def _seed_chunks(seed: int) -> np.ndarray:
    """64-bit seed as four 16-bit chunks (each exact in float32)"""
    return np.array([(seed >> shift) & 0xFFFF for shift in (0, 16, 32, 48)], dtype=np.float64)


def _seed_from_chunks(chunks: Iterable[float]) -> int:
    return sum(int(c) << shift for c, shift in zip(chunks, (0, 16, 32, 48)))


def checkpoint_tensors(model: ToyViTModel) -> Dict[str, np.ndarray]:
    cfg = model.config
    pooling = cfg.pooling
    tensors = {f'config.{name}': np.array(getattr(cfg, name)) for name in _CONFIG_FIELDS}
    tensors['config.mlp_hidden'] = np.array(cfg.mlp_hidden)
    tensors['config.pool_strategy'] = np.array(STRATEGIES.index(pooling.strategy))
    tensors['config.pool_groups'] = np.array(pooling.groups)
    tensors['config.exponents_trainable'] = np.array(int(pooling.exponents_trainable))
    tensors['config.clamp_eps'] = np.array(pooling.clamp_eps)
    tensors['rng.algorithm'] = np.array(RNG_ALGORITHM_PCG64)
    tensors['rng.seed'] = _seed_chunks(model.seed)
    tensors.update(model.params)
    return tensors


def model_from_tensors(tensors: Dict[str, np.ndarray]) -> ToyViTModel:
    try:
        values = {name: int(tensors[f'config.{name}']) for name in _CONFIG_FIELDS}
        hidden = int(tensors['config.mlp_hidden'])
        strategy_index = int(tensors['config.pool_strategy'])
        groups = int(tensors['config.pool_groups'])
        trainable = bool(int(tensors['config.exponents_trainable']))
        clamp_eps = float(tensors['config.clamp_eps'])
        seed = _seed_from_chunks(tensors['rng.seed'])
    except (KeyError, IndexError) as e:
        raise FormatError(f"checkpoint is missing configuration entry {e}")

    if not 0 <= strategy_index < len(STRATEGIES):
        raise FormatError(f"checkpoint has unknown pooling strategy index {strategy_index}")
    strategy = STRATEGIES[strategy_index]

    if int(tensors.get('rng.algorithm', -1)) != RNG_ALGORITHM_PCG64:
        raise FormatError(f"checkpoint uses unknown rng algorithm {tensors.get('rng.algorithm')}")

    exponents = tuple(tensors['pool.p']) if 'pool.p' in tensors else (1.0,) * groups
    pooling = PoolingConfig(strategy=strategy, groups=groups, exponents=exponents,
                            exponents_trainable=trainable, clamp_eps=clamp_eps)
    config = ToyViTConfig(mlp_ratio=hidden / values['embed_dim'], pooling=pooling, **values)

    template = ToyViTModel.initialize(config, Rng(0))
    params = {}
    for name, expected in template.params.items():
        if name not in tensors:
            raise FormatError(f"checkpoint is missing parameter '{name}'")
        if tensors[name].shape != expected.shape:
            raise FormatError(f"parameter '{name}' has shape {tensors[name].shape}, expected {expected.shape}")
        params[name] = np.array(tensors[name], dtype=np.float64)
    return ToyViTModel(config, params, seed=seed)


def save_checkpoint(model: ToyViTModel, path: PathLike):
    return write_container(path, checkpoint_tensors(model))


def load_checkpoint(path: PathLike) -> ToyViTModel:
    return model_from_tensors(read_container(path))


def quantized(model: ToyViTModel) -> ToyViTModel:
    """Copy with every parameter rounded through float32, as a checkpoint stores it"""
    clone = copy.copy(model)
    clone.params = {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()}
    pooling = replace(model.config.pooling, clamp_eps=float(np.float32(model.config.pooling.clamp_eps)))
    if 'pool.p' in clone.params:
        pooling = pooling.with_exponents(clone.params['pool.p'])
    clone.config = replace(model.config, pooling=pooling)
    return clone
