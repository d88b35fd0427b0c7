"""
Streaming Inference Engine
Accepts grapheme tokens one at a time, encodes chunk k as soon as its C
tokens and M look-ahead tokens have arrived, and emits PnP symbols.

Per-stream state:
    - buffer of tokens not yet encoded (current chunk + look-ahead)
    - per layer, the layer input of the last P tokens (keys/values are
      recomputed from it, which keeps streaming bit-for-bit faithful to the
      offline masked forward up to summation order)
    - per layer, kernel-1 frames of causal-conv history
    - the greedy-decoder collapse state

Look-ahead tokens contribute only their layer-1 keys/values (derived from
their embeddings); they are fully encoded later, in their own chunk.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

import numerics as nx
from ctc import BLANK, CollapseState, greedy_decode, greedy_decode_chunk
from encoder import StreamingConformer, relative_position_ids
from exceptions import StreamStateError
from masking import token_attention_rights

logger = logging.getLogger(__name__)


@dataclass
class EmittedSymbol:
    """A decoded label with the number of tokens received when it was emitted."""

    symbol: int
    arrival_index: int
    timestamp: float


@dataclass
class StreamState:
    """Everything one stream needs between push_token calls."""

    model: StreamingConformer
    buffer: List[int] = field(default_factory=list)
    next_chunk_start: int = 0
    n_received: int = 0
    layer_cache: List[np.ndarray] = field(default_factory=list)
    conv_history: List[np.ndarray] = field(default_factory=list)
    collapse: CollapseState = field(default_factory=CollapseState)
    emitted: List[EmittedSymbol] = field(default_factory=list)
    closed: bool = False
    chunk_times: List[float] = field(default_factory=list)
    first_chunk_tokens: Optional[int] = None
    peak_frames: List[int] = field(default_factory=list)
    record_hidden: bool = False
    hidden: List[np.ndarray] = field(default_factory=list)

    @property
    def symbols(self) -> List[int]:
        return [e.symbol for e in self.emitted]


@dataclass
class LatencyRecord:
    """
    Start-latency measurement of one stream.

    Attributes:
        tokens_waited_for_first_output: tokens received when the first chunk was encoded
        compute_time_per_chunk: wall-clock seconds spent encoding each chunk
        first_chunk_compute: mean first-chunk compute time over the bench repeats
        tau: simulated seconds per upstream token
    """

    tokens_waited_for_first_output: int
    compute_time_per_chunk: List[float]
    first_chunk_compute: float
    tau: float

    @property
    def wait_term(self) -> float:
        return self.tokens_waited_for_first_output * self.tau

    @property
    def modeled_start(self) -> float:
        return self.wait_term + self.first_chunk_compute

    def describe(self) -> str:
        return f"{self.tokens_waited_for_first_output}τ + {self.first_chunk_compute:.4f}"


def open_stream(model: StreamingConformer, record_hidden: bool = False) -> StreamState:
    """Fresh stream over a shared read-only model."""
    cfg = model.cfg
    d = cfg.d_model
    dtype = nx.dtype_for(cfg.precision)
    return StreamState(
        model=model,
        layer_cache=[np.zeros((0, d), dtype=dtype) for _ in range(cfg.n_layers)],
        conv_history=[np.zeros((cfg.conv_kernel - 1, d), dtype=dtype) for _ in range(cfg.n_layers)],
        collapse=CollapseState(BLANK),
        peak_frames=[0] * cfg.n_layers,
        record_hidden=record_hidden,
    )


def _encode_chunk(state: StreamState, chunk_len: int, lookahead_len: int) -> List[int]:
    """Encode the first chunk_len buffered tokens and decode their frames."""
    model = state.model
    cfg = model.cfg
    U = cfg.upsample
    start = state.next_chunk_start
    chunk_ids = state.buffer[:chunk_len]
    la_ids = state.buffer[chunk_len:chunk_len + lookahead_len]
    began = time.perf_counter()

    with nx.no_grad():
        embedded = model.embed(chunk_ids + la_ids).data
        x = embedded[:chunk_len * U]
        lookahead = embedded[chunk_len * U:]
        query_tokens = np.repeat(np.arange(start, start + chunk_len), U)
        for i, block in enumerate(model.blocks):
            layer = i + 1
            past = state.layer_cache[i]
            n_past = past.shape[0] // U
            parts = [past, x]
            n_key_tokens = n_past + chunk_len
            if layer == 1 and lookahead_len:
                parts.append(lookahead)
                n_key_tokens += lookahead_len
            keys_in = np.concatenate(parts, axis=0)
            key_tokens = np.repeat(np.arange(start - n_past, start - n_past + n_key_tokens), U)
            token_rights = token_attention_rights(
                np.arange(start, start + chunk_len),
                np.arange(start - n_past, start - n_past + n_key_tokens), cfg, layer)
            mask = np.kron(token_rights, np.ones((U, U), dtype=bool)).astype(bool)
            rel_ids = relative_position_ids(query_tokens, key_tokens, cfg.rel_window)
            state.peak_frames[i] = max(state.peak_frames[i], keys_in.shape[0])

            out, state.conv_history[i] = block.forward(
                nx.Tensor(keys_in), past.shape[0], chunk_len * U, mask, rel_ids,
                conv_history=state.conv_history[i])
            keep = cfg.past_context * U
            state.layer_cache[i] = np.concatenate([past, x], axis=0)[-keep:] if keep else past[:0]
            if layer in cfg.intermediate_layers:
                out = model.self_condition(out, model.output_logits(out), layer)
            x = out.data
        log_probs = nx.log_softmax(model.output_logits(nx.Tensor(x))).data

    if state.record_hidden:
        state.hidden.append(x)
    symbols, state.collapse = greedy_decode_chunk(log_probs, state.collapse)
    elapsed = time.perf_counter() - began
    state.chunk_times.append(elapsed)
    if state.first_chunk_tokens is None:
        state.first_chunk_tokens = state.n_received
    del state.buffer[:chunk_len]
    state.next_chunk_start += chunk_len
    now = time.monotonic()
    for symbol in symbols:
        state.emitted.append(EmittedSymbol(symbol, state.n_received, now))
    logger.debug(
        f"chunk start={start} tokens={chunk_len} lookahead={lookahead_len} "
        f"emitted={len(symbols)} seconds={elapsed:.5f}"
    )
    return symbols


def push_token(state: StreamState, token: int) -> List[int]:
    """
    Feed one grapheme token.

    Chunk k is encoded once tokens through kC + C + M - 1 have arrived.

    Returns:
        Label ids emitted by this call (often empty)

    Raises:
        StreamStateError: if the stream is closed
    """
    if state.closed:
        raise StreamStateError("push_token after close")
    cfg = state.model.cfg
    state.buffer.append(int(token))
    state.n_received += 1
    if cfg.full_context:
        return []
    emitted: List[int] = []
    while len(state.buffer) >= cfg.chunk_size + cfg.lookahead:
        emitted += _encode_chunk(state, cfg.chunk_size, cfg.lookahead)
    return emitted


def close(state: StreamState) -> List[int]:
    """
    End the stream: encode every buffered token as final, possibly short,
    chunks whose look-ahead is truncated at the end of the stream.

    Raises:
        StreamStateError: on a second close
    """
    if state.closed:
        raise StreamStateError("stream already closed")
    state.closed = True
    cfg = state.model.cfg
    emitted: List[int] = []
    if cfg.full_context:
        if state.buffer:
            emitted += _encode_chunk(state, len(state.buffer), 0)
        return emitted
    while state.buffer:
        chunk_len = min(cfg.chunk_size, len(state.buffer))
        lookahead_len = min(cfg.lookahead, len(state.buffer) - chunk_len)
        emitted += _encode_chunk(state, chunk_len, lookahead_len)
    return emitted


def stream_decode(model: StreamingConformer, tokens: Sequence[int]) -> List[int]:
    """Push every token, close, and return all emitted label ids."""
    state = open_stream(model)
    emitted: List[int] = []
    for token in tokens:
        emitted += push_token(state, token)
    emitted += close(state)
    return emitted


def offline_decode(model: StreamingConformer, tokens: Sequence[int]) -> List[int]:
    """Masked full-sequence forward followed by greedy decoding."""
    if not tokens:
        return []
    return greedy_decode(model.log_probs(list(tokens)))


def bench_stream(model: StreamingConformer, tokens: Sequence[int], tau: float,
                 repeats: int = 1) -> LatencyRecord:
    """
    Measure Start latency: tokens waited * tau + mean first-chunk compute.

    Args:
        model: Encoder
        tokens: Token stream to replay
        tau: Simulated seconds per upstream token (>= 0)
        repeats: Number of replays averaged for the compute term
    """
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    first_times: List[float] = []
    waited = 0
    per_chunk: List[float] = []
    for _ in range(max(1, repeats)):
        state = open_stream(model)
        for token in tokens:
            push_token(state, token)
        close(state)
        waited = state.first_chunk_tokens or 0
        per_chunk = list(state.chunk_times)
        if state.chunk_times:
            first_times.append(state.chunk_times[0])
    record = LatencyRecord(
        tokens_waited_for_first_output=waited,
        compute_time_per_chunk=per_chunk,
        first_chunk_compute=float(np.mean(first_times)) if first_times else 0.0,
        tau=tau,
    )
    logger.info(
        f"bench tokens_waited={record.tokens_waited_for_first_output} tau={tau} "
        f"first_chunk_compute={record.first_chunk_compute:.5f} start={record.modeled_start:.5f}"
    )
    return record
