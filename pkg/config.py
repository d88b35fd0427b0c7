"""
Streaming G2PnP Configuration
Streaming/architecture hyperparameters, training run settings and the flat
key = value config file format used by every CLI subcommand.

Config file format:
    # comment lines start with '#'
    chunk_size = 5
    intermediate_layers = 2,4,6
    full_context = false

Every field of StreamingConfig and RunConfig is a valid key. Unknown keys are
rejected so typos never silently fall back to defaults.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from exceptions import ConfigError

logger = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1

PAST_ANCHORS = ("chunk", "token")
PRECISIONS = ("float64", "float32")


@dataclass
class StreamingConfig:
    """
    Chunk-aware streaming and Conformer architecture settings.

    Attributes:
        chunk_size: C, chunk size in grapheme tokens
        past_context: P, past context in tokens before the chunk start
        lookahead: M, minimum look-ahead tokens (first layer only)
        upsample: U, encoder frames per grapheme token
        n_layers: L, number of Conformer blocks
        intermediate_layers: 1-based layers with an intermediate CTC tap
        intermediate_weight: weight of each intermediate CTC loss
        past_anchor: 'chunk' counts P before the chunk start, 'token' before each token
        full_context: non-streaming reference model (every mask all-true)
        precision: parameter dtype, 'float64' for training, 'float32' for inference
    """

    chunk_size: int = 5
    past_context: int = 10
    lookahead: int = 1
    upsample: int = 8
    n_layers: int = 4
    intermediate_layers: Tuple[int, ...] = (2,)
    intermediate_weight: float = 1.0 / 3.0
    d_model: int = 128
    n_heads: int = 4
    conv_kernel: int = 8
    ff_dim: int = 256
    dropout: float = 0.1
    past_anchor: str = "chunk"
    full_context: bool = False
    precision: str = "float64"

    def __post_init__(self):
        self.intermediate_layers = tuple(sorted(int(i) for i in self.intermediate_layers))
        self.validate()

    def validate(self):
        """Raise ConfigError if any invariant is violated."""
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.past_context < 0:
            raise ConfigError(f"past_context must be >= 0, got {self.past_context}")
        if self.lookahead < 0:
            raise ConfigError(f"lookahead must be >= 0, got {self.lookahead}")
        if self.upsample < 1:
            raise ConfigError(f"upsample must be >= 1, got {self.upsample}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        for layer in self.intermediate_layers:
            if not 1 <= layer <= self.n_layers - 1:
                raise ConfigError(
                    f"intermediate layer {layer} outside 1..{self.n_layers - 1}"
                )
        if self.intermediate_weight < 0:
            raise ConfigError("intermediate_weight must be >= 0")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model ({self.d_model}) must be a positive multiple of n_heads ({self.n_heads})"
            )
        if self.conv_kernel < 1 or self.ff_dim < 1:
            raise ConfigError("conv_kernel and ff_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.past_anchor not in PAST_ANCHORS:
            raise ConfigError(f"past_anchor must be one of {PAST_ANCHORS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}")

    @property
    def rel_window(self) -> int:
        """Largest relative token offset with its own position bias."""
        return self.past_context + self.chunk_size + self.lookahead

    @property
    def start_tokens(self) -> int:
        """Tokens a stream waits for before its first chunk is encoded."""
        return self.chunk_size + self.lookahead

    def replace(self, **changes) -> "StreamingConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict:
        data = dataclasses.asdict(self)
        data["intermediate_layers"] = list(self.intermediate_layers)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "StreamingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown streaming config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class RunConfig:
    """
    A full reproducible run: streaming config plus training settings.

    The learning rate warms up linearly for warmup_steps, then decays
    exponentially from lr_start to lr_end over the remaining steps.
    """

    streaming: StreamingConfig = field(default_factory=StreamingConfig)
    steps: int = 30000
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    warmup_steps: int = 1000
    batch_frames: int = 4096
    seed: int = 0
    checkpoint: str = "checkpoint.npz"
    train_path: str = "data/train.json"
    valid_path: str = "data/valid.json"
    log_every: int = 100
    valid_every: int = 1000
    valid_size: int = 200
    grad_clip: float = 5.0
    infeasible_clamp: float = 1e4
    train_fraction: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.streaming.validate()
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.batch_frames < 1:
            raise ConfigError("batch_frames must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.log_every < 1 or self.valid_every < 1:
            raise ConfigError("log_every and valid_every must be >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must be in (0, 1]")
        if self.infeasible_clamp <= 0:
            raise ConfigError("infeasible_clamp must be positive")

    def to_flat(self) -> Dict:
        """Flatten into the key set used by config files."""
        flat = self.streaming.to_dict()
        for f in dataclasses.fields(self):
            if f.name != "streaming":
                flat[f.name] = getattr(self, f.name)
        return flat

    @classmethod
    def from_flat(cls, flat: Dict) -> "RunConfig":
        streaming_keys = {f.name for f in dataclasses.fields(StreamingConfig)}
        run_keys = {f.name for f in dataclasses.fields(cls)} - {"streaming"}
        unknown = set(flat) - streaming_keys - run_keys
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        streaming = StreamingConfig(**{k: v for k, v in flat.items() if k in streaming_keys})
        return cls(streaming=streaming, **{k: v for k, v in flat.items() if k in run_keys})


def _field_types() -> Dict[str, object]:
    types = {f.name: f.type for f in dataclasses.fields(StreamingConfig)}
    types.update({f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "streaming"})
    return types


def _coerce(key: str, raw: str, kind) -> object:
    """Convert a raw config string to the declared field type."""
    text = raw.strip()
    try:
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (str, "str"):
            return text
        # Tuple[int, ...]
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"Invalid value for '{key}': {raw!r}")


def parse_config_text(text: str) -> Dict[str, str]:
    """
    Parse flat key = value text into a raw string mapping.

    Args:
        text: Config file contents

    Returns:
        Dictionary of key -> raw value string
    """
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"Line {line_no}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def coerce_mapping(raw: Dict[str, str]) -> Dict[str, object]:
    types = _field_types()
    coerced = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"Unknown config key: {key}")
        coerced[key] = _coerce(key, value, types[key])
    return coerced


def parse_overrides(pairs: Optional[Iterable[str]]) -> Dict[str, str]:
    """Turn ['key=value', ...] CLI overrides into a raw mapping."""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"Override must be key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    Build a RunConfig from defaults, an optional config file and overrides.

    Args:
        path: Optional path to a flat key = value config file
        overrides: Raw key -> value strings applied after the file

    Returns:
        Validated RunConfig
    """
    flat = RunConfig().to_flat()
    raw: Dict[str, str] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw.update(parse_config_text(f.read()))
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")
        logger.info(f"config_file={path} keys={len(raw)}")
    raw.update(overrides or {})
    flat.update(coerce_mapping(raw))
    return RunConfig.from_flat(flat)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig to the flat config format (round-trips through load)."""
    lines: List[str] = [f"# config_format_version = {CONFIG_FORMAT_VERSION}"]
    for key, value in cfg.to_flat().items():
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
