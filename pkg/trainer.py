"""
G2PnP Trainer
Minimizes final + weighted intermediate CTC losses with Adam, a linear
warmup followed by exponential decay, frame-capped batches and global
gradient-norm clipping.

Outputs: a final checkpoint and a training log CSV (one row per logged step).
A run is deterministic given (RunConfig, dataset files).
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import numerics as nx
from config import RunConfig
from corpus import DatasetFile
from ctc import greedy_decode, total_loss
from encoder import StreamingConformer
from engine import stream_decode
from exceptions import DatasetError, TrainingDivergedError
from metrics import score
from numerics import Rng, Tensor

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "lr", "loss", "final", "intermediate", "infeasible",
               "grad_norm", "sentences", "valid_cer_pnp"]


def learning_rate(step: int, total_steps: int, lr_start: float, lr_end: float, warmup_steps: int) -> float:
    """
    Learning rate for a 1-based step.

    Rises linearly to lr_start over warmup_steps, then decays exponentially
    so that the last step uses lr_end.
    """
    if warmup_steps and step <= warmup_steps:
        return lr_start * step / warmup_steps
    decay_steps = max(1, total_steps - warmup_steps)
    progress = min(1.0, max(0.0, (step - warmup_steps) / decay_steps))
    return lr_start * (lr_end / lr_start) ** progress


class AdamOptimizer:
    """Adam over a name -> Tensor mapping; moments are kept per parameter name."""

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)


def make_batches(lengths: Sequence[int], batch_frames: int, upsample: int, rng: Rng) -> List[List[int]]:
    """
    Shuffle record indices and pack them into batches of at most batch_frames
    frames. A sentence longer than the cap forms a batch on its own.
    """
    batches: List[List[int]] = []
    current: List[int] = []
    frames = 0
    for idx in rng.permutation(len(lengths)):
        n = int(lengths[idx]) * upsample
        if current and frames + n > batch_frames:
            batches.append(current)
            current, frames = [], 0
        current.append(int(idx))
        frames += n
    if current:
        batches.append(current)
    return batches


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm; returns the pre-clip norm."""
    norm = nx.global_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class TrainingResult:
    steps: int
    checkpoint: str
    log: pd.DataFrame
    valid_cer: Dict[int, float] = field(default_factory=dict)

    @property
    def final_valid_cer(self) -> Optional[float]:
        if not self.valid_cer:
            return None
        return self.valid_cer[max(self.valid_cer)]


class Trainer:
    """
    Trains a StreamingConformer on a synthetic dataset.

    The model is trained under the configured streaming masks (all-true when
    full_context is set), so a streaming model sees at training time exactly
    the context it will have when streaming.
    """

    def __init__(self, cfg: RunConfig, train: DatasetFile, valid: Optional[DatasetFile] = None):
        if not train.records:
            raise DatasetError("Training set is empty")
        self.cfg = cfg
        self.train = train.subset(cfg.train_fraction) if cfg.train_fraction < 1.0 else train
        self.valid = valid
        self.rules = train.rules()
        self.model = StreamingConformer(cfg.streaming, len(self.rules.graphemes),
                                        len(self.rules.vocab), seed=cfg.seed)
        self.params = self.model.named_parameters()
        self.optimizer = AdamOptimizer(self.params)
        root = Rng(cfg.seed)
        self.dropout_rng = root.stream("dropout")
        self.batch_rng = root.stream("data")
        self.step_count = 0
        self._epoch = 0
        self._queue: List[List[int]] = []
        self._lengths = [len(g) for g, _ in self.train.records]

    def _next_batch(self) -> List[int]:
        if not self._queue:
            self._queue = make_batches(self._lengths, self.cfg.batch_frames,
                                       self.cfg.streaming.upsample, self.batch_rng.stream(self._epoch))
            self._epoch += 1
        return self._queue.pop(0)

    def train_step(self, batch: Sequence[int], lr: float) -> Dict[str, float]:
        """
        One optimizer update on the given record indices.

        Raises:
            TrainingDivergedError: on a non-finite loss or gradient norm
        """
        self.model.zero_grad()
        weight = 1.0 / len(batch)
        totals = {"loss": 0.0, "final": 0.0, "intermediate": 0.0, "infeasible": 0}
        for idx in batch:
            graphemes, labels = self.train.records[idx]
            outputs = self.model.forward(graphemes, training=True, rng=self.dropout_rng)
            loss, terms, infeasible = total_loss(
                outputs, labels, self.cfg.streaming.intermediate_weight,
                infeasible_value=self.cfg.infeasible_clamp)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"Non-finite loss at step={self.step_count + 1} lr={lr:.3e} terms={terms}")
            (loss * weight).backward()
            totals["loss"] += value * weight
            totals["final"] += terms["final"] * weight
            inter = [v for k, v in terms.items() if k != "final"]
            totals["intermediate"] += (float(np.mean(inter)) if inter else 0.0) * weight
            totals["infeasible"] += infeasible
        grad_norm = clip_gradients(list(self.params.values()), self.cfg.grad_clip)
        if not np.isfinite(grad_norm):
            raise TrainingDivergedError(
                f"Non-finite gradient norm at step={self.step_count + 1} lr={lr:.3e} loss={totals['loss']:.4f}")
        self.optimizer.step(lr)
        self.step_count += 1
        totals["grad_norm"] = grad_norm
        totals["sentences"] = len(batch)
        return totals

    def validate(self) -> float:
        """Held-out PnP CER of offline greedy decoding on the first valid_size records."""
        if not self.valid or not self.valid.records:
            return float("nan")
        records = self.valid.records[:self.cfg.valid_size]
        vocab = self.rules.vocab
        hyps = [vocab.decode(greedy_decode(self.model.log_probs(g))) for g, _ in records]
        refs = [vocab.decode(l) for _, l in records]
        return score(hyps, refs, "pnp").cer

    def save(self, path: Optional[str] = None) -> str:
        path = path or self.cfg.checkpoint
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.model.save(path, extra={
            "run": self.cfg.to_flat(),
            "steps_done": self.step_count,
            "dataset": {k: self.train.header.get(k) for k in ("rules_seed", "radius", "grapheme_hash", "label_hash")},
        })
        return path

    def run(self, log_path: Optional[str] = None) -> TrainingResult:
        """
        Train for cfg.steps updates, validate periodically, write the checkpoint.

        Args:
            log_path: Optional CSV destination for the training log

        Returns:
            TrainingResult with the log DataFrame and validation CER history
        """
        cfg = self.cfg
        logger.info("=" * 60)
        logger.info(
            f"train_start steps={cfg.steps} records={len(self.train.records)} "
            f"layers={cfg.streaming.n_layers} d_model={cfg.streaming.d_model} "
            f"C={cfg.streaming.chunk_size} P={cfg.streaming.past_context} M={cfg.streaming.lookahead} "
            f"full_context={cfg.streaming.full_context}"
        )
        rows: List[Dict[str, object]] = []
        valid_cer: Dict[int, float] = {}
        for step in range(1, cfg.steps + 1):
            lr = learning_rate(step, cfg.steps, cfg.lr_start, cfg.lr_end, cfg.warmup_steps)
            stats = self.train_step(self._next_batch(), lr)
            cer = float("nan")
            if step % cfg.valid_every == 0 or step == cfg.steps:
                cer = self.validate()
                if np.isfinite(cer):
                    valid_cer[step] = cer
                    logger.info(f"valid step={step} cer_pnp={cer:.3f}")
            if step % cfg.log_every == 0 or step == cfg.steps or np.isfinite(cer):
                rows.append({"step": step, "lr": lr, **stats, "valid_cer_pnp": cer})
                logger.info(
                    f"step={step} loss={stats['loss']:.4f} final={stats['final']:.4f} "
                    f"lr={lr:.2e} infeasible={stats['infeasible']} grad_norm={stats['grad_norm']:.3f}"
                )

        checkpoint = self.save()
        log = pd.DataFrame(rows, columns=LOG_COLUMNS)
        if log_path:
            log.to_csv(log_path, index=False, float_format="%.6g")
        logger.info(f"✅ train_done steps={self.step_count} checkpoint={checkpoint}")
        logger.info("=" * 60)
        return TrainingResult(steps=self.step_count, checkpoint=checkpoint, log=log, valid_cer=valid_cer)


def train(cfg: RunConfig, log_path: Optional[str] = None) -> TrainingResult:
    """Load the configured datasets and run a Trainer."""
    train_set = DatasetFile.read(cfg.train_path)
    valid_set = DatasetFile.read(cfg.valid_path) if cfg.valid_path and os.path.exists(cfg.valid_path) else None
    return Trainer(cfg, train_set, valid_set).run(log_path)


def decode_dataset(model: StreamingConformer, dataset: DatasetFile, offline: bool = True,
                   limit: Optional[int] = None) -> Tuple[List[List[str]], List[List[str]]]:
    """
    Decode every record and return (hypotheses, references) as symbol lists.

    Streaming decoding pushes tokens one at a time through the engine.
    """
    vocab = dataset.rules().vocab
    records = dataset.records[:limit] if limit else dataset.records
    hyps, refs = [], []
    for graphemes, labels in records:
        ids = greedy_decode(model.log_probs(graphemes)) if offline else stream_decode(model, graphemes)
        hyps.append(vocab.decode(ids))
        refs.append(vocab.decode(labels))
    return hyps, refs
