"""
CTC Loss and Decoding
Log-space CTC forward-backward with analytic gradients, the combined
final + intermediate objective, and greedy decoding whose blank/repeat
collapse is seamless across chunk boundaries.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import numerics as nx
from exceptions import InputError
from numerics import Tensor

logger = logging.getLogger(__name__)

BLANK = 0
BLANK_SYMBOL = "<b>"
PROSODY_SYMBOLS = ("#", "/", "*")

# log(0); also the loss returned for targets that cannot be aligned
LOG_ZERO = -np.inf
INFEASIBLE = np.inf


class LabelVocab:
    """
    Closed output vocabulary: blank at index 0, then phonemes, then '#', '/', '*'.
    """

    def __init__(self, phonemes: Sequence[str]):
        overlap = set(phonemes) & (set(PROSODY_SYMBOLS) | {BLANK_SYMBOL})
        if overlap:
            raise InputError(f"Phoneme inventory clashes with reserved symbols: {sorted(overlap)}")
        self.symbols: List[str] = [BLANK_SYMBOL] + list(phonemes) + list(PROSODY_SYMBOLS)
        self.index: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, symbols: Sequence[str]) -> List[int]:
        try:
            ids = [self.index[s] for s in symbols]
        except KeyError as e:
            raise InputError(f"Unknown label symbol {e}")
        if BLANK in ids:
            raise InputError("Target sequences must not contain the blank")
        return ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.symbols[i] for i in ids]

    @property
    def prosody_ids(self) -> List[int]:
        return [self.index[s] for s in PROSODY_SYMBOLS]


@dataclass
class CtcLattice:
    """
    Forward (or backward) variables of one utterance.

    Attributes:
        log_alpha: (frames, 2 * len(target) + 1) log forward variables
        extended: target with blanks interleaved (blank, l1, blank, ..., blank)
        log_likelihood: log P(target | log_probs), -inf when infeasible
    """

    log_alpha: np.ndarray
    extended: np.ndarray
    log_likelihood: float


def extend_target(target: Sequence[int], blank: int = BLANK) -> np.ndarray:
    extended = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    extended[1::2] = np.asarray(target, dtype=np.int64)
    return extended


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit target: its length plus one blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _skip_allowed(extended: np.ndarray, blank: int) -> np.ndarray:
    skip = np.zeros(len(extended), dtype=bool)
    if len(extended) > 2:
        skip[2:] = (extended[2:] != blank) & (extended[2:] != extended[:-2])
    return skip


def ctc_forward(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> CtcLattice:
    """Compute the forward lattice in log space."""
    frames = log_probs.shape[0]
    ext = extend_target(target, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    emit = log_probs[:, ext]
    alpha = np.full((frames, S), LOG_ZERO)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, frames):
            prev = alpha[t - 1]
            stay = prev
            step = np.concatenate([[LOG_ZERO], prev[:-1]])
            jump = np.where(skip, np.concatenate([[LOG_ZERO, LOG_ZERO], prev[:-2]])[:S], LOG_ZERO)
            alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + emit[t]
    if S > 1:
        total = float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))
    else:
        total = float(alpha[-1, -1])
    return CtcLattice(log_alpha=alpha, extended=ext, log_likelihood=total)


def ctc_backward(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> np.ndarray:
    """Log backward variables; beta[t, s] includes the emission at frame t."""
    frames = log_probs.shape[0]
    ext = extend_target(target, blank)
    S = len(ext)
    skip_from = np.zeros(S, dtype=bool)  # s may jump to s + 2
    if S > 2:
        skip_from[:-2] = _skip_allowed(ext, blank)[2:]
    emit = log_probs[:, ext]
    beta = np.full((frames, S), LOG_ZERO)
    beta[-1, -1] = emit[-1, -1]
    if S > 1:
        beta[-1, -2] = emit[-1, -2]
    with np.errstate(invalid="ignore"):
        for t in range(frames - 2, -1, -1):
            nxt = beta[t + 1]
            step = np.concatenate([nxt[1:], [LOG_ZERO]])
            jump = np.where(skip_from, np.concatenate([nxt[2:], [LOG_ZERO, LOG_ZERO]])[:S], LOG_ZERO)
            beta[t] = np.logaddexp(np.logaddexp(nxt, step), jump) + emit[t]
    return beta


def ctc_loss(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> Tuple[float, np.ndarray]:
    """
    Negative log-likelihood of target summed over all alignments.

    Args:
        log_probs: (frames, vocab) log-probabilities
        target: Label ids (no blanks)
        blank: Blank index

    Returns:
        (loss, gradient w.r.t. log_probs). Infeasible targets give
        (INFEASIBLE, zeros) instead of raising; NaN
        log-probabilities give a NaN loss.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    frames = log_probs.shape[0]
    if frames == 0 or frames < min_frames(target):
        return INFEASIBLE, np.zeros_like(log_probs)
    lattice = ctc_forward(log_probs, target, blank)
    log_p = lattice.log_likelihood
    if np.isnan(log_p):
        return float("nan"), np.zeros_like(log_probs)
    if not np.isfinite(log_p):
        return INFEASIBLE, np.zeros_like(log_probs)
    beta = ctc_backward(log_probs, target, blank)
    ext = lattice.extended
    emit = log_probs[:, ext]
    with np.errstate(invalid="ignore"):
        occupancy = lattice.log_alpha + beta - emit - log_p
    weights = np.where(np.isfinite(occupancy), np.exp(occupancy), 0.0)
    grad = np.zeros_like(log_probs)
    for s, label in enumerate(ext):
        grad[:, label] -= weights[:, s]
    return -log_p, grad


def ctc_loss_tensor(log_probs: Tensor, target: Sequence[int], blank: int = BLANK,
                    infeasible_value: Optional[float] = None) -> Tuple[Tensor, bool]:
    """
    CTC loss as an autograd node on top of log_probs.

    Args:
        log_probs: (frames, vocab) log-probability tensor
        target: Label ids
        blank: Blank index
        infeasible_value: Finite stand-in loss for unalignable targets
            (no gradient flows); None keeps the +inf sentinel

    Returns:
        (0-d loss tensor, whether the target was alignable)
    """
    value, grad = ctc_loss(log_probs.data, target, blank)
    feasible = not bool(np.isposinf(value))
    if not feasible and infeasible_value is not None:
        value = infeasible_value
    grad = grad.astype(log_probs.dtype)

    def backward(g):
        log_probs._accumulate(g * grad)

    return nx._result(np.asarray(value, dtype=log_probs.dtype), (log_probs,), "ctc", backward), feasible


Number = Union[float, Tensor]


def combine_losses(final: Number, intermediates: Dict[int, Number], weight: float) -> Number:
    """final + weight * sum(intermediates); works on floats and tensors alike."""
    result = final
    if weight == 0 or not intermediates:
        return result
    for layer in sorted(intermediates):
        result = result + intermediates[layer] * weight
    return result


def total_loss(outputs, target: Sequence[int], intermediate_weight: float,
               infeasible_value: Optional[float] = None) -> Tuple[Tensor, Dict[str, float], int]:
    """
    Final CTC loss plus weighted intermediate CTC losses.

    Args:
        outputs: EncoderOutput carrying final and intermediate logits
        target: Label ids
        intermediate_weight: Weight of each intermediate loss
        infeasible_value: Clamp for unalignable targets (None keeps +inf)

    Returns:
        (loss tensor, per-term float losses keyed 'final' / 'layer<i>', number of infeasible terms)
    """
    final, ok = ctc_loss_tensor(nx.log_softmax(outputs.logits), target,
                                infeasible_value=infeasible_value)
    terms = {"final": final.item()}
    infeasible = 0 if ok else 1
    intermediates = {}
    for layer, logits in outputs.intermediate_logits.items():
        loss, ok = ctc_loss_tensor(nx.log_softmax(logits), target, infeasible_value=infeasible_value)
        intermediates[layer] = loss
        terms[f"layer{layer}"] = loss.item()
        infeasible += 0 if ok else 1
    return combine_losses(final, intermediates, intermediate_weight), terms, infeasible


@dataclass
class CollapseState:
    """Argmax symbol of the previous frame of the stream (blank at start)."""

    last_symbol: int = BLANK


def greedy_decode_chunk(log_probs_chunk: np.ndarray, state: CollapseState,
                        blank: int = BLANK) -> Tuple[List[int], CollapseState]:
    """
    Best-path decode of one chunk of frames.

    Per-frame argmax, collapse repeats, drop blanks. The previous chunk's last
    argmax is carried in `state`, so a repeat spanning the boundary is emitted
    once, exactly as offline decoding of the concatenated frames would.
    """
    emitted: List[int] = []
    previous = state.last_symbol
    for symbol in np.argmax(log_probs_chunk, axis=-1) if len(log_probs_chunk) else []:
        symbol = int(symbol)
        if symbol != blank and symbol != previous:
            emitted.append(symbol)
        previous = symbol
    return emitted, CollapseState(last_symbol=previous)


def greedy_decode(log_probs: np.ndarray, blank: int = BLANK) -> List[int]:
    """Offline best-path decode of a whole utterance."""
    emitted, _ = greedy_decode_chunk(log_probs, CollapseState(blank), blank)
    return emitted
