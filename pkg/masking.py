"""
Chunk-Aware Attention Masks
Per-layer attend/not-attend matrices for chunk-aware streaming with optional
first-layer minimum look-ahead (MLA), plus receptive-field analysis.

Mask rule for query token q in chunk k = q // C (chunk start s = k*C):
    - any key in the same chunk
    - past context: s - P <= j < s   (past_anchor='chunk', the default)
                    q - P <= j < s   (past_anchor='token')
    - layer 1 only: s + C <= j < s + C + M   (the MLA window)
Keys that do not exist (beyond the sequence end) are simply absent, which
truncates the MLA window to M' = min(M, remaining tokens).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import StreamingConfig
from exceptions import ConfigError

logger = logging.getLogger(__name__)

RECEPTIVE_FIELD_COLUMNS = ["token", "chunk_offset", "lookahead", "past_reach"]


@dataclass
class LayerMask:
    """
    Attention rights of one layer.

    Attributes:
        layer_index: 1-based layer the mask belongs to
        allowed: (queries, keys) boolean matrix, True = may attend
        upsample: frames per token (1 for token granularity)
    """

    layer_index: int
    allowed: np.ndarray
    upsample: int = 1

    @property
    def granularity(self) -> str:
        return "token" if self.upsample == 1 else "frame"

    @property
    def size(self) -> int:
        return self.allowed.shape[0]


@dataclass
class ReceptiveFieldReport:
    """
    Composed receptive field after stacking layers.

    Attributes:
        mode: 'chunk_aware' or 'regular'
        n_layers: number of layers composed
        lookahead: per-token future reach in tokens after all layers
        past_reach: per-token past reach in tokens after all layers
        per_layer_lookahead: future reach after 1..L layers (rows = layers)
        per_layer_constant: per layer, True if its future reach equals the final one
        per_offset_lookahead: chunk_aware only, reach by within-chunk offset
            measured on the first complete chunk with full look-ahead available
    """

    mode: str
    n_layers: int
    lookahead: np.ndarray
    past_reach: np.ndarray
    per_layer_lookahead: np.ndarray
    per_layer_constant: List[bool]
    per_offset_lookahead: List[int] = field(default_factory=list)
    chunk_size: int = 0

    @property
    def constant_across_layers(self) -> bool:
        return all(self.per_layer_constant)

    def to_frame(self) -> pd.DataFrame:
        """Per-token table (token, chunk_offset, lookahead, past_reach)."""
        n = len(self.lookahead)
        offsets = np.arange(n) % self.chunk_size if self.chunk_size else np.zeros(n, dtype=int)
        return pd.DataFrame({
            "token": np.arange(n),
            "chunk_offset": offsets,
            "lookahead": self.lookahead,
            "past_reach": self.past_reach,
        }, columns=RECEPTIVE_FIELD_COLUMNS)


def _check_layer(cfg: StreamingConfig, layer_index: int):
    if not 1 <= layer_index <= cfg.n_layers:
        raise ConfigError(f"layer_index {layer_index} outside 1..{cfg.n_layers}")


def token_attention_rights(query_tokens: np.ndarray, key_tokens: np.ndarray,
                           cfg: StreamingConfig, layer_index: int) -> np.ndarray:
    """
    Evaluate the mask rule on absolute token indices.

    Shared by offline mask construction and the streaming engine, which asks
    only for the keys it actually holds.

    Args:
        query_tokens: Absolute token index of every query row
        key_tokens: Absolute token index of every key column
        cfg: Streaming configuration
        layer_index: 1-based layer

    Returns:
        Boolean matrix (len(query_tokens), len(key_tokens))
    """
    _check_layer(cfg, layer_index)
    q = np.asarray(query_tokens, dtype=np.int64)[:, None]
    j = np.asarray(key_tokens, dtype=np.int64)[None, :]
    if cfg.full_context:
        return np.ones((q.shape[0], j.shape[1]), dtype=bool)
    C, P, M = cfg.chunk_size, cfg.past_context, cfg.lookahead
    start = (q // C) * C
    allowed = (j // C) == (q // C)
    past_floor = start - P if cfg.past_anchor == "chunk" else q - P
    allowed |= (j >= past_floor) & (j < start)
    if layer_index == 1 and M > 0:
        allowed |= (j >= start + C) & (j < start + C + M)
    return allowed


def build_token_mask(n_tokens: int, cfg: StreamingConfig, layer_index: int) -> LayerMask:
    """
    Token-granular mask of one layer.

    Args:
        n_tokens: Sequence length in tokens (>= 1)
        cfg: Streaming configuration
        layer_index: 1-based layer; only layer 1 carries the MLA window

    Returns:
        LayerMask with an (n_tokens, n_tokens) matrix

    Raises:
        ConfigError: if layer_index is out of range or n_tokens < 1
    """
    if n_tokens < 1:
        raise ConfigError(f"n_tokens must be >= 1, got {n_tokens}")
    idx = np.arange(n_tokens)
    return LayerMask(layer_index, token_attention_rights(idx, idx, cfg, layer_index), 1)


def expand_to_frames(token_mask: LayerMask, upsample: int) -> LayerMask:
    """Frame (q, j) allowed iff token (q // U, j // U) allowed."""
    if upsample < 1:
        raise ConfigError(f"upsample must be >= 1, got {upsample}")
    if upsample == 1:
        return LayerMask(token_mask.layer_index, token_mask.allowed.copy(), token_mask.upsample)
    block = np.ones((upsample, upsample), dtype=bool)
    allowed = np.kron(token_mask.allowed, block).astype(bool)
    return LayerMask(token_mask.layer_index, allowed, token_mask.upsample * upsample)


def build_frame_masks(n_tokens: int, cfg: StreamingConfig) -> List[LayerMask]:
    """Frame-granular masks for layers 1..L (layers >= 2 share one matrix)."""
    first = expand_to_frames(build_token_mask(n_tokens, cfg, 1), cfg.upsample)
    if cfg.n_layers == 1:
        return [first]
    rest = expand_to_frames(build_token_mask(n_tokens, cfg, 2), cfg.upsample)
    return [first] + [LayerMask(i, rest.allowed, rest.upsample) for i in range(2, cfg.n_layers + 1)]


def regular_lookahead_mask(n_tokens: int, window: int, past: Optional[int] = None) -> np.ndarray:
    """Baseline mask: every token sees `window` future tokens (and `past` past ones)."""
    q = np.arange(n_tokens)[:, None]
    j = np.arange(n_tokens)[None, :]
    allowed = j <= q + window
    if past is not None:
        allowed &= j >= q - past
    return allowed


def _reach(dependency: np.ndarray):
    n = dependency.shape[0]
    idx = np.arange(n)
    keys = np.where(dependency, idx[None, :], -1)
    future = keys.max(axis=1) - idx
    first = np.where(dependency, idx[None, :], n).min(axis=1)
    return future, idx - first


def effective_lookahead(cfg: StreamingConfig, n_tokens: int, mode: str = "chunk_aware",
                        window: int = 1) -> ReceptiveFieldReport:
    """
    Compose layer masks by boolean matrix products and measure the reach.

    Args:
        cfg: Streaming configuration (n_layers sets the depth)
        n_tokens: Sequence length, at least one chunk
        mode: 'chunk_aware' (cfg masks) or 'regular' (uniform window per layer)
        window: Per-layer future window for regular mode

    Returns:
        ReceptiveFieldReport
    """
    if mode not in ("chunk_aware", "regular"):
        raise ConfigError(f"Unknown look-ahead mode '{mode}'")
    if n_tokens < cfg.chunk_size:
        raise ConfigError(f"n_tokens ({n_tokens}) must be >= chunk_size ({cfg.chunk_size})")

    if mode == "chunk_aware":
        layer_masks = [build_token_mask(n_tokens, cfg, l).allowed for l in range(1, cfg.n_layers + 1)]
    else:
        base = regular_lookahead_mask(n_tokens, window, cfg.past_context)
        layer_masks = [base] * cfg.n_layers

    dependency = np.eye(n_tokens, dtype=bool)
    per_layer = []
    past = None
    for allowed in layer_masks:
        # output of this layer depends on whatever its allowed keys depended on
        dependency = (allowed.astype(np.int64) @ dependency.astype(np.int64)) > 0
        future, past = _reach(dependency)
        per_layer.append(future)
    per_layer = np.stack(per_layer)
    final = per_layer[-1]
    constant = [bool(np.array_equal(row, final)) for row in per_layer]

    per_offset: List[int] = []
    if mode == "chunk_aware" and not cfg.full_context:
        C = cfg.chunk_size
        for start in range(0, n_tokens - C + 1, C):
            if start + C + cfg.lookahead <= n_tokens:
                per_offset = [int(v) for v in final[start:start + C]]
                break

    report = ReceptiveFieldReport(
        mode=mode,
        n_layers=cfg.n_layers,
        lookahead=final,
        past_reach=past,
        per_layer_lookahead=per_layer,
        per_layer_constant=constant,
        per_offset_lookahead=per_offset,
        chunk_size=cfg.chunk_size if mode == "chunk_aware" else 0,
    )
    logger.debug(f"receptive_field mode={mode} layers={cfg.n_layers} offsets={per_offset}")
    return report


def render_mask(mask: LayerMask, allowed_char: str = "■", blocked_char: str = "·") -> str:
    """Plain-text grid, one row per query, one column per key."""
    header = f"layer {mask.layer_index} ({mask.granularity}, {mask.size}x{mask.size})"
    rows = [
        f"{q:>3} " + "".join(allowed_char if a else blocked_char for a in row)
        for q, row in enumerate(mask.allowed)
    ]
    return "\n".join([header] + rows)


def mask_difference(first: LayerMask, second: LayerMask) -> Dict[str, int]:
    """Count entries allowed in one mask but not the other."""
    return {
        "only_first": int((first.allowed & ~second.allowed).sum()),
        "only_second": int((second.allowed & ~first.allowed).sum()),
    }
