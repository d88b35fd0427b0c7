"""
Training Experiments
Training studies on the synthetic corpus:

    - Streaming grid: C in {2, 5} x M in {0, 1, 2} at P = 10, plus the
      non-streaming reference, scored on all three views with Start latency
    - MLA ablation: C = 2, M = 0 vs M = 1, with the chunk-boundary error
      profile at ambiguous positions
    - Self-conditioning ablation: intermediate weight 1/3 vs 0
    - Data-size trend: 5% / 25% / 100% of the training corpus, same steps

Every variant is trained from the same RunConfig with only the studied
field changed.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config import RunConfig
from corpus import DatasetFile, ambiguous_positions, generate, oracle_alignment
from encoder import StreamingConformer
from exceptions import ConfigError
from engine import bench_stream
from metrics import EvalReport, evaluate, results_table
from trainer import Trainer, TrainingResult, decode_dataset

logger = logging.getLogger(__name__)

STUDIES = ("table", "mla", "selfcond", "datasize")

TABLE_GRID = [(2, 0), (2, 1), (2, 2), (5, 0), (5, 1), (5, 2)]
DATA_FRACTIONS = (0.05, 0.25, 1.0)


@dataclass
class VariantResult:
    name: str
    cfg: RunConfig
    model: StreamingConformer
    training: TrainingResult
    report: EvalReport


def prepare_data(out_dir: str, seed: int, n_train: int, n_valid: int, radius: int = 1,
                 len_range: Tuple[int, int] = (4, 32)) -> Tuple[DatasetFile, DatasetFile]:
    """Generate (or reuse) train.json / valid.json under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    splits = []
    for split, count in (("train", n_train), ("valid", n_valid)):
        path = os.path.join(out_dir, f"{split}.json")
        if os.path.exists(path):
            dataset = DatasetFile.read(path)
            if dataset.header.get("rules_seed") == seed and dataset.header.get("n_records") == count \
                    and dataset.header.get("radius") == radius:
                splits.append(dataset)
                continue
        dataset = generate(seed, count, len_range, radius, split)
        dataset.write(path)
        splits.append(dataset)
    return splits[0], splits[1]


def score_model(model: StreamingConformer, valid: DatasetFile, offline: bool = True) -> EvalReport:
    """Evaluate all views plus the boundary profile at ambiguous positions."""
    rules = valid.rules()
    hyps, refs = decode_dataset(model, valid, offline=offline)
    spans = [oracle_alignment(rules, g)[1] for g, _ in valid.records]
    ambiguous = [ambiguous_positions(rules, g) for g, _ in valid.records]
    return evaluate(hyps, refs, spans, model.cfg.chunk_size, ambiguous)


def train_variant(base: RunConfig, name: str, train: DatasetFile, valid: DatasetFile, out_dir: str,
                  run_changes: Optional[Dict] = None, **streaming_changes) -> VariantResult:
    """Train one configuration derived from base and score it on valid."""
    os.makedirs(out_dir, exist_ok=True)
    flat = base.to_flat()
    flat.update(streaming_changes)
    flat.update(run_changes or {})
    flat["checkpoint"] = os.path.join(out_dir, f"{name}.npz")
    cfg = RunConfig.from_flat(flat)
    logger.info(f"variant_start name={name} seed={cfg.seed}")
    trainer = Trainer(cfg, train, valid)
    result = trainer.run(os.path.join(out_dir, f"{name}.log.csv"))
    report = score_model(trainer.model, valid)
    logger.info(f"variant_done name={name} cer_pnp={report.cer_pnp:.3f}")
    return VariantResult(name, cfg, trainer.model, result, report)


def streaming_grid(base: RunConfig, train: DatasetFile, valid: DatasetFile, out_dir: str,
              tau: float = 0.0, past_context: int = 10) -> pd.DataFrame:
    """
    Streaming configurations and the non-streaming reference, one row each.

    Start is reported as "<tokens waited>τ + <first-chunk seconds>".
    """
    rows = []
    bench_tokens = valid.records[0][0] if valid.records else []
    variants = [(f"stream-{c}-{m}", dict(chunk_size=c, lookahead=m, past_context=past_context,
                                         full_context=False)) for c, m in TABLE_GRID]
    variants.append(("non-streaming", dict(full_context=True)))
    for name, changes in variants:
        variant = train_variant(base, name, train, valid, out_dir, **changes)
        latency = bench_stream(variant.model, bench_tokens, tau, repeats=3)
        s = variant.cfg.streaming
        streaming = not s.full_context
        rows.append(variant.report.to_row(
            name,
            past=s.past_context if streaming else "-",
            chunk=s.chunk_size if streaming else "-",
            lookahead=s.lookahead if streaming else "-",
            start=latency.describe(),
        ))
    table = results_table(rows)
    table.to_csv(os.path.join(out_dir, "table.csv"), index=False)
    return table


def mla_ablation(base: RunConfig, train: DatasetFile, valid: DatasetFile, out_dir: str,
                 seeds: Sequence[int] = (0, 1, 2), chunk_size: int = 2) -> pd.DataFrame:
    """
    Compare M = 0 and M = 1 at a small chunk size.

    A replica passes the overall check when CER(M=1) < CER(M=0), and the
    boundary check when the chunk-final offset error rate under M=0 is at
    least twice the M=1 rate.
    """
    rows = []
    final_offset = chunk_size - 1
    for seed in seeds:
        reports = {}
        for m in (0, 1):
            variant = train_variant(base, f"mla-s{seed}-m{m}", train, valid, out_dir,
                                    run_changes={"seed": seed}, chunk_size=chunk_size,
                                    lookahead=m, full_context=False)
            reports[m] = variant.report
        without, with_mla = reports[0], reports[1]
        rate0 = without.offset_profile.get(final_offset, 0.0)
        rate1 = with_mla.offset_profile.get(final_offset, 0.0)
        rows.append({
            "seed": seed,
            "cer_m0": without.cer_pnp,
            "cer_m1": with_mla.cer_pnp,
            "final_offset_rate_m0": rate0,
            "final_offset_rate_m1": rate1,
            "overall_ok": with_mla.cer_pnp < without.cer_pnp,
            "boundary_ok": rate0 >= 2.0 * rate1 and rate0 > 0,
        })
    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(out_dir, "mla_ablation.csv"), index=False)
    return frame


def selfcond_ablation(base: RunConfig, train: DatasetFile, valid: DatasetFile, out_dir: str,
                      weights: Sequence[float] = (1.0 / 3.0, 0.0)) -> pd.DataFrame:
    """Train once per intermediate loss weight; the last weight is the baseline."""
    rows = []
    for weight in weights:
        variant = train_variant(base, f"selfcond-w{weight:.3f}", train, valid, out_dir,
                                intermediate_weight=weight)
        log = variant.training.log
        rows.append({
            "intermediate_weight": weight,
            "cer_pnp": variant.report.cer_pnp,
            "final_train_loss": float(log["final"].iloc[-1]) if len(log) else float("nan"),
        })
    frame = pd.DataFrame(rows)
    frame["non_degraded"] = frame["cer_pnp"] <= frame["cer_pnp"].iloc[-1] + 0.5
    frame.to_csv(os.path.join(out_dir, "selfcond_ablation.csv"), index=False)
    return frame


def data_size_study(base: RunConfig, train: DatasetFile, valid: DatasetFile, out_dir: str,
                    fractions: Sequence[float] = DATA_FRACTIONS,
                    seeds: Sequence[int] = (0,)) -> pd.DataFrame:
    """Held-out CER per training fraction; every fraction trains for the same number of steps."""
    rows = []
    for seed in seeds:
        for fraction in fractions:
            variant = train_variant(base, f"data-s{seed}-{int(round(fraction * 100))}", train, valid, out_dir,
                                    run_changes={"seed": seed, "train_fraction": fraction})
            rows.append({"seed": seed, "fraction": fraction,
                         "records": len(train.subset(fraction).records),
                         "cer_pnp": variant.report.cer_pnp})
    frame = pd.DataFrame(rows)
    frame["monotone"] = frame.groupby("seed")["cer_pnp"].transform(
        lambda s: bool((s.diff().fillna(0) <= 1e-9).all()))
    frame.to_csv(os.path.join(out_dir, "data_size.csv"), index=False)
    return frame


def run_study(study: str, base: RunConfig, train: DatasetFile, valid: DatasetFile, out_dir: str,
              seeds: Sequence[int] = (0, 1, 2), tau: float = 0.0) -> pd.DataFrame:
    """Dispatch one named study."""
    if study == "table":
        return streaming_grid(base, train, valid, out_dir, tau)
    if study == "mla":
        return mla_ablation(base, train, valid, out_dir, seeds)
    if study == "selfcond":
        return selfcond_ablation(base, train, valid, out_dir)
    if study == "datasize":
        return data_size_study(base, train, valid, out_dir, seeds=seeds)
    raise ConfigError(f"Unknown study '{study}', expected one of {STUDIES}")


def summarize(frames: Dict[str, pd.DataFrame]) -> List[str]:
    lines = []
    for name, frame in frames.items():
        lines.append(f"== {name} ==")
        lines.append(frame.to_string(index=False))
    return lines
