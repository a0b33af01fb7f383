"""
Experiment Configuration

Flat `key = value` documents (UTF-8, `#` comments) that describe a toy ViT,
its pooling head, the optimizer, the seed and the file paths of a run.

Example:

    # ggem on the synthetic blobs
    image_size = 16
    patch_size = 4
    embed_dim = 32
    heads = 4
    blocks = 2
    classes = 3
    pooling = ggem
    groups = heads
    p_init = 3.0
"""

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List

from config.hardware_profiles import convert_value
from ml.errors import ConfigError
from ml.pooling import STRATEGIES, PoolingConfig
from ml.tensor_core import DEFAULT_CLAMP_EPS
from ml.toy_vit import ToyViTConfig
from ml.training import TrainingConfig
from utils.file_io import PathLike


REQUIRED_KEYS = ('image_size', 'patch_size', 'embed_dim', 'heads', 'blocks', 'classes', 'pooling')

# Symbolic group counts
GROUP_SYMBOLS = ('heads', 'channels')


@dataclass(frozen=True)
class ExperimentConfig:
    # model
    image_size: int = 16
    patch_size: int = 4
    channels_in: int = 1
    embed_dim: int = 32
    heads: int = 4
    blocks: int = 2
    mlp_ratio: float = 2.0
    classes: int = 3

    # pooling head
    pooling: str = 'ggem'
    groups: str = 'heads'
    p_init: float = 3.0
    exponents_trainable: bool = True
    clamp_eps: float = DEFAULT_CLAMP_EPS

    # optimizer
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 20
    tune_blocks: int = -1

    # run
    seed: int = 0
    synthetic_samples: int = 200
    synthetic_noise: float = 0.1
    dataset: str = 'synthetic'
    labels: str = ''
    checkpoint: str = 'model.ggem'
    init_checkpoint: str = ''
    trace: str = 'trace.csv'

    def __post_init__(self):
        if self.pooling not in STRATEGIES:
            raise ConfigError(f"pooling must be one of {', '.join(STRATEGIES)}, got '{self.pooling}'")
        if self.groups not in GROUP_SYMBOLS:
            try:
                count = int(self.groups)
            except ValueError:
                raise ConfigError(f"groups must be an integer, 'heads' or 'channels', got '{self.groups}'")
            if count < 1:
                raise ConfigError(f"groups must be positive, got {count}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be in [0, 2^64), got {self.seed}")
        if self.synthetic_samples < 1:
            raise ConfigError(f"synthetic_samples must be positive, got {self.synthetic_samples}")

    def resolved_groups(self) -> int:
        if self.groups == 'heads':
            return self.heads
        if self.groups == 'channels':
            return self.embed_dim
        return int(self.groups)

    def pooling_config(self) -> PoolingConfig:
        if self.pooling == 'average':
            return PoolingConfig.average()
        if self.pooling == 'max':
            return PoolingConfig.max()
        if self.pooling == 'class_token':
            return PoolingConfig.class_token()
        if self.pooling == 'gem':
            return PoolingConfig.gem(p=self.p_init, trainable=self.exponents_trainable, clamp_eps=self.clamp_eps)
        return PoolingConfig.ggem(groups=self.resolved_groups(), p=self.p_init,
                                  trainable=self.exponents_trainable, clamp_eps=self.clamp_eps)

    def model_config(self) -> ToyViTConfig:
        return ToyViTConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            channels_in=self.channels_in,
            embed_dim=self.embed_dim,
            heads=self.heads,
            blocks=self.blocks,
            mlp_ratio=self.mlp_ratio,
            pooling=self.pooling_config(),
            classes=self.classes,
        )

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            lr=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            tune_blocks=self.tune_blocks,
        )

    def to_text(self) -> str:
        """Serialize every field as `key = value` lines"""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}".rstrip())
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _typed(key: str, raw: str, line: int):
    kind = _FIELD_TYPES[key]
    if kind in (str, 'str'):
        return raw

    value = convert_value(raw)
    if kind in (bool, 'bool'):
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' expects true or false, got '{raw}'", line=line)
        return value
    if kind in (int, 'int'):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' expects an integer, got '{raw}'", line=line)
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{key}' expects a number, got '{raw}'", line=line)
    return float(value)


def parse_config(text: str, require: bool = True) -> ExperimentConfig:
    """
    Parse a config document

    Args:
        text: `key = value` lines; `#` starts a comment
        require: enforce REQUIRED_KEYS

    Raises:
        ConfigError: unknown or duplicate key, bad value, missing required key
    """
    values: Dict[str, object] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"expected 'key = value', got '{raw_line.strip()}'", line=number)

        key, raw = (part.strip() for part in line.split('=', 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'", line=number)
        if key in values:
            raise ConfigError(f"duplicate config key '{key}'", line=number)
        values[key] = _typed(key, raw, number)

    if require:
        missing: List[str] = [key for key in REQUIRED_KEYS if key not in values]
        if missing:
            raise ConfigError(f"missing required config keys: {', '.join(missing)}")

    return ExperimentConfig(**values)


def load_config(path: PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    payload = path.read_bytes()
    try:
        text = payload.decode('utf-8')
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path.name} is not valid UTF-8", line=payload.count(b'\n', 0, e.start) + 1)
    return parse_config(text)
