"""
Streaming Conformer Encoder
Token embedding, repetition upsampling, L masked Conformer blocks with causal
convolution, a shared CTC output layer and self-conditioned CTC feedback.

Block layout (Macaron style, layer norm everywhere, no batch statistics):
    h1  = x + 0.5 * FFN1(x)
    h2  = h1 + MHSA(LN(h1))            keys/values come from LN(h1) of the key frames
    h3  = h2 + Conv(h2)                LN -> pointwise -> GLU -> causal depthwise -> LN -> swish -> pointwise
    h4  = h3 + 0.5 * FFN2(h3)
    out = LN(h4)

Attention adds a learned per-head bias indexed by the relative token offset
(key token - query token), clipped to +-rel_window tokens.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from config import StreamingConfig
from exceptions import DatasetError, DimensionError
from masking import LayerMask, build_frame_masks
from numerics import Rng, Tensor

logger = logging.getLogger(__name__)


@dataclass
class EncoderOutput:
    """
    Result of a full-sequence forward pass.

    Attributes:
        hidden: final hidden states (frames, d_model)
        intermediate_logits: layer index -> (frames, vocab) logits at the CTC taps
        logits: final (frames, vocab) logits
    """

    hidden: Tensor
    intermediate_logits: Dict[int, Tensor] = field(default_factory=dict)
    logits: Optional[Tensor] = None

    @property
    def n_frames(self) -> int:
        return self.hidden.shape[0]


def upsample(token_embeddings: Tensor, factor: int) -> Tensor:
    """Repeat every token embedding `factor` consecutive times."""
    return nx.repeat_rows(token_embeddings, factor)


def relative_position_ids(query_tokens: np.ndarray, key_tokens: np.ndarray, window: int) -> np.ndarray:
    """Bias-table row for every (query, key) pair: clip(key - query) + window."""
    offsets = np.asarray(key_tokens)[None, :] - np.asarray(query_tokens)[:, None]
    return np.clip(offsets, -window, window) + window


def _param(rng: Rng, shape, std: float, dtype) -> Tensor:
    return Tensor(rng.normal(shape, std), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


class ConformerBlock:
    """
    One streaming Conformer layer.

    The block is evaluated on a contiguous run of query frames that sits
    inside a (possibly longer) run of key frames. Offline the two coincide;
    the streaming engine prepends cached past frames and, on layer 1, appends
    look-ahead frames.
    """

    def __init__(self, cfg: StreamingConfig, layer_index: int, rng: Rng):
        self.cfg = cfg
        self.layer_index = layer_index
        d, ff, k = cfg.d_model, cfg.ff_dim, cfg.conv_kernel
        dtype = nx.dtype_for(cfg.precision)
        win = 2 * cfg.rel_window + 1
        self.params: Dict[str, Tensor] = {}
        for name in ("ffn1", "ffn2"):
            self.params[f"{name}.ln.gamma"] = _ones(d, dtype)
            self.params[f"{name}.ln.beta"] = _zeros(d, dtype)
            self.params[f"{name}.w1"] = _param(rng, (d, ff), 1.0 / np.sqrt(d), dtype)
            self.params[f"{name}.b1"] = _zeros(ff, dtype)
            self.params[f"{name}.w2"] = _param(rng, (ff, d), 1.0 / np.sqrt(ff), dtype)
            self.params[f"{name}.b2"] = _zeros(d, dtype)
        self.params["att.ln.gamma"] = _ones(d, dtype)
        self.params["att.ln.beta"] = _zeros(d, dtype)
        for name in ("wq", "wk", "wv", "wo"):
            self.params[f"att.{name}"] = _param(rng, (d, d), 1.0 / np.sqrt(d), dtype)
        self.params["att.bo"] = _zeros(d, dtype)
        self.params["att.rel_bias"] = _zeros((win, cfg.n_heads), dtype)
        self.params["conv.ln.gamma"] = _ones(d, dtype)
        self.params["conv.ln.beta"] = _zeros(d, dtype)
        self.params["conv.pw1"] = _param(rng, (d, 2 * d), 1.0 / np.sqrt(d), dtype)
        self.params["conv.pw1_b"] = _zeros(2 * d, dtype)
        self.params["conv.depthwise"] = _param(rng, (k, d), 1.0 / np.sqrt(k), dtype)
        self.params["conv.depthwise_b"] = _zeros(d, dtype)
        self.params["conv.ln2.gamma"] = _ones(d, dtype)
        self.params["conv.ln2.beta"] = _zeros(d, dtype)
        self.params["conv.pw2"] = _param(rng, (d, d), 1.0 / np.sqrt(d), dtype)
        self.params["conv.pw2_b"] = _zeros(d, dtype)
        self.params["out.ln.gamma"] = _ones(d, dtype)
        self.params["out.ln.beta"] = _zeros(d, dtype)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return nx.layer_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def _ffn(self, x: Tensor, name: str, training: bool, rng: Optional[Rng]) -> Tensor:
        p = self.params
        h = nx.swish(self._ln(x, f"{name}.ln") @ p[f"{name}.w1"] + p[f"{name}.b1"])
        h = nx.dropout(h, self.cfg.dropout, rng, training)
        h = h @ p[f"{name}.w2"] + p[f"{name}.b2"]
        return nx.dropout(h, self.cfg.dropout, rng, training)

    def _attention(self, keys_in: Tensor, query_start: int, n_query: int, mask: np.ndarray,
                   rel_ids: np.ndarray, training: bool, rng: Optional[Rng]) -> Tensor:
        p = self.params
        H = self.cfg.n_heads
        d = self.cfg.d_model
        dk = d // H
        n_keys = keys_in.shape[0]
        queries_in = nx.slice_tensor(keys_in, query_start, query_start + n_query)

        def heads(x: Tensor, rows: int) -> Tensor:
            return nx.transpose(nx.reshape(x, (rows, H, dk)), (1, 0, 2))

        q = heads(queries_in @ p["att.wq"], n_query)
        k = heads(keys_in @ p["att.wk"], n_keys)
        v = heads(keys_in @ p["att.wv"], n_keys)
        scores = nx.scale(q @ nx.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(dk))
        bias = nx.transpose(nx.embedding_lookup(p["att.rel_bias"], rel_ids), (2, 0, 1))
        probs = nx.softmax_masked(scores + bias, mask[None, :, :])
        probs = nx.dropout(probs, self.cfg.dropout, rng, training)
        context = nx.reshape(nx.transpose(probs @ v, (1, 0, 2)), (n_query, d))
        return context @ p["att.wo"] + p["att.bo"]

    def _convolution(self, x: Tensor, history: Optional[np.ndarray], training: bool,
                     rng: Optional[Rng]) -> Tuple[Tensor, np.ndarray]:
        p = self.params
        h = nx.glu(self._ln(x, "conv.ln") @ p["conv.pw1"] + p["conv.pw1_b"])
        h, new_history = nx.causal_conv1d(h, p["conv.depthwise"], history)
        h = nx.swish(self._ln(h + p["conv.depthwise_b"], "conv.ln2"))
        h = h @ p["conv.pw2"] + p["conv.pw2_b"]
        return nx.dropout(h, self.cfg.dropout, rng, training), new_history

    def forward(self, keys_in: Tensor, query_start: int, n_query: int, mask: np.ndarray,
                rel_ids: np.ndarray, conv_history: Optional[np.ndarray] = None,
                training: bool = False, rng: Optional[Rng] = None) -> Tuple[Tensor, np.ndarray]:
        """
        Run the block on frames [query_start, query_start + n_query) of keys_in.

        Args:
            keys_in: Layer input for every key frame (keys, d_model)
            query_start: Offset of the first query frame inside keys_in
            n_query: Number of query frames
            mask: (n_query, keys) attention rights
            rel_ids: (n_query, keys) relative-position bias rows
            conv_history: kernel-1 frames of conv-module state (zeros if None)
            training: Enables dropout
            rng: Dropout generator

        Returns:
            (output for the query frames, new conv history)
        """
        if mask.shape != (n_query, keys_in.shape[0]):
            raise DimensionError(
                f"layer {self.layer_index}: mask {mask.shape} does not match "
                f"{n_query} queries x {keys_in.shape[0]} keys"
            )
        h1_keys = keys_in + nx.scale(self._ffn(keys_in, "ffn1", training, rng), 0.5)
        att_in = self._ln(h1_keys, "att.ln")
        att = self._attention(att_in, query_start, n_query, mask, rel_ids, training, rng)
        att = nx.dropout(att, self.cfg.dropout, rng, training)
        h2 = nx.slice_tensor(h1_keys, query_start, query_start + n_query) + att
        conv, new_history = self._convolution(h2, conv_history, training, rng)
        h3 = h2 + conv
        h4 = h3 + nx.scale(self._ffn(h3, "ffn2", training, rng), 0.5)
        return self._ln(h4, "out.ln"), new_history


class StreamingConformer:
    """
    Grapheme-token encoder with CTC heads.

    Parameters are plain Tensors keyed by dotted names; the same model object
    serves offline forward passes, training and any number of streams.
    """

    def __init__(self, cfg: StreamingConfig, n_graphemes: int, n_labels: int, seed: int = 0):
        self.cfg = cfg
        self.n_graphemes = n_graphemes
        self.n_labels = n_labels
        self.seed = seed
        dtype = nx.dtype_for(cfg.precision)
        init = Rng(seed).stream("init")
        d = cfg.d_model
        self.params: Dict[str, Tensor] = {
            "embedding": _param(init.stream(0), (n_graphemes, d), 1.0, dtype),
            "ctc.w": _param(init.stream(1), (d, n_labels), 1.0 / np.sqrt(d), dtype),
            "ctc.b": _zeros(n_labels, dtype),
        }
        for layer in cfg.intermediate_layers:
            self.params[f"selfcond.{layer}.proj"] = _param(
                init.stream(2 + layer), (n_labels, d), 1.0 / np.sqrt(n_labels), dtype)
            self.params[f"selfcond.{layer}.ln.gamma"] = _ones(d, dtype)
            self.params[f"selfcond.{layer}.ln.beta"] = _zeros(d, dtype)
        self.blocks = [
            ConformerBlock(cfg, layer, init.stream(1000 + layer))
            for layer in range(1, cfg.n_layers + 1)
        ]
        self._mask_cache: Dict[int, List[LayerMask]] = {}
        self._mask_lock = threading.Lock()

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> Dict[str, Tensor]:
        named = dict(self.params)
        for i, block in enumerate(self.blocks, 1):
            for name, tensor in block.params.items():
                named[f"blocks.{i}.{name}"] = tensor
        return named

    def zero_grad(self):
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    def load_parameters(self, arrays: Dict[str, np.ndarray]):
        """Copy arrays into the parameters (names and shapes must match)."""
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        if missing:
            raise DatasetError(f"Checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, tensor in named.items():
            if arrays[name].shape != tensor.shape:
                raise DatasetError(f"Shape mismatch for {name}: {arrays[name].shape} vs {tensor.shape}")
            tensor.data = np.array(arrays[name], dtype=tensor.dtype)

    def metadata(self) -> Dict:
        return {
            "streaming": self.cfg.to_dict(),
            "n_graphemes": self.n_graphemes,
            "n_labels": self.n_labels,
            "seed": self.seed,
        }

    def save(self, path: str, extra: Optional[Dict] = None):
        meta = self.metadata()
        meta.update(extra or {})
        nx.save_checkpoint(path, self.named_parameters(), meta)

    @classmethod
    def load(cls, path: str, precision: Optional[str] = None) -> "StreamingConformer":
        """Rebuild a model from a checkpoint, optionally casting its precision."""
        arrays, meta = nx.load_checkpoint(path)
        try:
            cfg = StreamingConfig.from_dict(meta["streaming"])
            n_graphemes, n_labels = meta["n_graphemes"], meta["n_labels"]
        except KeyError as e:
            raise DatasetError(f"Checkpoint {path} lacks metadata field {e}")
        if precision:
            cfg = cfg.replace(precision=precision)
        model = cls(cfg, n_graphemes, n_labels, seed=meta.get("seed", 0))
        model.load_parameters(arrays)
        logger.info(f"model_loaded path={path} layers={cfg.n_layers} d_model={cfg.d_model}")
        return model

    # -- building blocks shared with the streaming engine --------------------

    def embed(self, token_ids: Sequence[int]) -> Tensor:
        """Upsampled token embeddings (tokens * U, d_model)."""
        ids = np.asarray(token_ids, dtype=np.int64)
        return upsample(nx.embedding_lookup(self.params["embedding"], ids), self.cfg.upsample)

    def output_logits(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["ctc.w"] + self.params["ctc.b"]

    def self_condition(self, hidden: Tensor, intermediate_logits: Tensor, layer_index: int) -> Tensor:
        """LayerNorm(hidden + Project(softmax(logits))), frame by frame."""
        probs = nx.softmax_masked(intermediate_logits)
        feedback = probs @ self.params[f"selfcond.{layer_index}.proj"]
        return nx.layer_norm(
            hidden + feedback,
            self.params[f"selfcond.{layer_index}.ln.gamma"],
            self.params[f"selfcond.{layer_index}.ln.beta"],
        )

    def frame_masks(self, n_tokens: int) -> List[LayerMask]:
        with self._mask_lock:
            masks = self._mask_cache.get(n_tokens)
            if masks is None:
                if len(self._mask_cache) > 256:
                    self._mask_cache.clear()
                masks = build_frame_masks(n_tokens, self.cfg)
                self._mask_cache[n_tokens] = masks
        return masks

    # -- offline forward -----------------------------------------------------

    def forward(self, token_ids: Sequence[int], masks: Optional[List[LayerMask]] = None,
                training: bool = False, rng: Optional[Rng] = None) -> EncoderOutput:
        """
        Full-sequence forward pass under per-layer masks.

        Args:
            token_ids: Grapheme token ids
            masks: Frame-level LayerMask per layer (built from cfg when omitted)
            training: Enables dropout
            rng: Dropout generator (required when training with dropout > 0)

        Returns:
            EncoderOutput with hidden states, intermediate and final logits

        Raises:
            DimensionError: if a mask does not match the frame count
        """
        cfg = self.cfg
        n_tokens = len(token_ids)
        n_frames = n_tokens * cfg.upsample
        if masks is None:
            masks = self.frame_masks(n_tokens)
        if len(masks) != cfg.n_layers:
            raise DimensionError(f"expected {cfg.n_layers} masks, got {len(masks)}")
        for mask in masks:
            if mask.allowed.shape != (n_frames, n_frames):
                raise DimensionError(
                    f"mask for layer {mask.layer_index} is {mask.allowed.shape}, "
                    f"sequence has {n_frames} frames"
                )
        frame_tokens = np.repeat(np.arange(n_tokens), cfg.upsample)
        rel_ids = relative_position_ids(frame_tokens, frame_tokens, cfg.rel_window)

        x = self.embed(token_ids)
        intermediate: Dict[int, Tensor] = {}
        for block, mask in zip(self.blocks, masks):
            x, _ = block.forward(x, 0, n_frames, mask.allowed, rel_ids,
                                 training=training, rng=rng)
            if block.layer_index in cfg.intermediate_layers:
                logits = self.output_logits(x)
                intermediate[block.layer_index] = logits
                x = self.self_condition(x, logits, block.layer_index)
        return EncoderOutput(hidden=x, intermediate_logits=intermediate, logits=self.output_logits(x))

    def log_probs(self, token_ids: Sequence[int], masks: Optional[List[LayerMask]] = None) -> np.ndarray:
        """Inference helper: final log-probabilities (frames, vocab)."""
        with nx.no_grad():
            out = self.forward(token_ids, masks)
            return nx.log_softmax(out.logits).data
