"""
G2PnP Error Rates
CER/SER under the three scoring views (PnP, Norm. PnP, phoneme only) and the
chunk-boundary error profile.

A "character" is one PnP vocabulary symbol, phoneme or prosodic mark.
CER = sum of edit distances / sum of reference lengths * 100 (it can exceed
100 when hypotheses insert heavily; an all-empty reference side scores 100 times
the raw distance count). SER = % sentences with distance > 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import editdistance
import numpy as np
import pandas as pd

from exceptions import InputError

logger = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1

VIEWS = ("pnp", "norm_pnp", "phoneme")
PROSODY = frozenset({"#", "/", "*"})

TABLE_COLUMNS = ["Config", "P", "C", "M", "PnP", "Norm. PnP", "Phoneme", "Start"]


def apply_view(symbols: Sequence[str], view: str) -> List[str]:
    """
    Transform a symbol sequence for a scoring view.

    pnp keeps everything, norm_pnp maps '#' to '/', phoneme deletes '#', '/', '*'.
    """
    if view == "pnp":
        return list(symbols)
    if view == "norm_pnp":
        return ["/" if s == "#" else s for s in symbols]
    if view == "phoneme":
        return [s for s in symbols if s not in PROSODY]
    raise InputError(f"Unknown scoring view '{view}'")


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    return int(editdistance.eval(list(a), list(b)))


def edit_script(ref: Sequence, hyp: Sequence) -> List[Tuple[str, int]]:
    """
    One minimum-cost alignment of hyp against ref.

    Returns:
        List of (op, ref_position) with op in ok/sub/del/ins; an insertion
        carries the position of the reference symbol it precedes
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[0] = np.arange(m + 1)
    cols = np.arange(m + 1)
    hyp_arr = np.asarray([str(h) for h in hyp], dtype=object)
    for i in range(1, n + 1):
        mismatch = (hyp_arr != str(ref[i - 1])).astype(np.int64) if m else np.zeros(0, dtype=np.int64)
        row = np.empty(m + 1, dtype=np.int64)
        row[0] = i
        row[1:] = np.minimum(cost[i - 1, 1:] + 1, cost[i - 1, :-1] + mismatch)
        row = np.minimum.accumulate(row - cols) + cols
        cost[i] = row
    ops: List[Tuple[str, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = str(ref[i - 1]) == str(hyp[j - 1])
            if cost[i, j] == cost[i - 1, j - 1] + (0 if same else 1):
                ops.append(("ok" if same else "sub", i - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            ops.append(("del", i - 1))
            i -= 1
        else:
            ops.append(("ins", i))
            j -= 1
    ops.reverse()
    return ops


@dataclass
class ViewScore:
    cer: float
    ser: float
    errors: int
    ref_length: int


def score(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], view: str = "pnp") -> ViewScore:
    """
    Corpus CER/SER for one view; the view is applied to both sides first.

    Raises:
        InputError: if the hypothesis and reference counts differ
    """
    if len(hyps) != len(refs):
        raise InputError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    errors = 0
    ref_length = 0
    wrong = 0
    for hyp, ref in zip(hyps, refs):
        h, r = apply_view(hyp, view), apply_view(ref, view)
        dist = edit_distance(h, r)
        errors += dist
        ref_length += len(r)
        wrong += dist > 0
    cer = 100.0 * errors / max(1, ref_length)
    ser = 100.0 * wrong / len(refs) if refs else 0.0
    return ViewScore(cer=cer, ser=ser, errors=errors, ref_length=ref_length)


@dataclass
class EvalReport:
    """CER/SER percentages for every view plus the per-offset error histogram."""

    cer_pnp: float
    ser_pnp: float
    cer_norm_pnp: float
    ser_norm_pnp: float
    cer_phoneme: float
    ser_phoneme: float
    n_sentences: int = 0
    offset_profile: Dict[int, float] = field(default_factory=dict)

    def view(self, name: str) -> Tuple[float, float]:
        return getattr(self, f"cer_{name}"), getattr(self, f"ser_{name}")

    def to_row(self, name: str, past: object = "", chunk: object = "", lookahead: object = "",
               start: str = "") -> Dict[str, object]:
        """One results-table row: CER (SER) per view."""
        row = {"Config": name, "P": past, "C": chunk, "M": lookahead}
        for column, view in zip(("PnP", "Norm. PnP", "Phoneme"), VIEWS):
            cer, ser = self.view(view)
            row[column] = f"{cer:.2f} ({ser:.1f})"
        row["Start"] = start
        return row

    def to_text(self) -> str:
        lines = [f"report_format_version={REPORT_FORMAT_VERSION}", f"sentences={self.n_sentences}"]
        for view in VIEWS:
            cer, ser = self.view(view)
            lines.append(f"view={view} cer={cer:.4f} ser={ser:.4f}")
        for offset in sorted(self.offset_profile):
            lines.append(f"offset={offset} error_rate={self.offset_profile[offset]:.6f}")
        return "\n".join(lines) + "\n"


def boundary_error_profile(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]],
                           spans: Sequence[Sequence[int]], chunk_size: int,
                           token_filter: Optional[Sequence[Sequence[bool]]] = None) -> Dict[int, float]:
    """
    Error rate per within-chunk token offset 0..C-1.

    Every edit operation of an optimal alignment is attributed to the source
    token of the reference symbol it touches (insertions to the symbol they
    precede, or the last symbol at the end). The rate at offset o is errors
    attributed to tokens with token % C == o divided by the reference
    symbols of those tokens.

    Args:
        hyps: Hypothesis symbol sequences
        refs: Reference symbol sequences
        spans: Per reference symbol, its source token index (oracle alignment)
        chunk_size: C
        token_filter: Optional per-sentence per-token flags; only flagged
            tokens are counted (e.g. ambiguous positions)
    """
    if not (len(hyps) == len(refs) == len(spans)):
        raise InputError("hyps, refs and spans must have equal counts")
    errors = np.zeros(chunk_size)
    totals = np.zeros(chunk_size)
    for s, (hyp, ref, span) in enumerate(zip(hyps, refs, spans)):
        if len(span) != len(ref):
            raise InputError(f"sentence {s}: {len(span)} spans for {len(ref)} reference symbols")
        keep = token_filter[s] if token_filter is not None else None

        def counted(token: int) -> bool:
            return keep is None or bool(keep[token])

        for token in span:
            if counted(token):
                totals[token % chunk_size] += 1
        if not ref:
            continue
        for op, position in edit_script(ref, hyp):
            if op == "ok":
                continue
            token = span[min(position, len(ref) - 1)]
            if counted(token):
                errors[token % chunk_size] += 1
    return {o: float(errors[o] / totals[o]) if totals[o] else 0.0 for o in range(chunk_size)}


def evaluate(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]],
             spans: Optional[Sequence[Sequence[int]]] = None, chunk_size: Optional[int] = None,
             token_filter: Optional[Sequence[Sequence[bool]]] = None) -> EvalReport:
    """Score all three views and, when spans are given, the boundary profile."""
    scores = {view: score(hyps, refs, view) for view in VIEWS}
    profile = {}
    if spans is not None and chunk_size:
        profile = boundary_error_profile(hyps, refs, spans, chunk_size, token_filter)
    report = EvalReport(
        cer_pnp=scores["pnp"].cer, ser_pnp=scores["pnp"].ser,
        cer_norm_pnp=scores["norm_pnp"].cer, ser_norm_pnp=scores["norm_pnp"].ser,
        cer_phoneme=scores["phoneme"].cer, ser_phoneme=scores["phoneme"].ser,
        n_sentences=len(refs), offset_profile=profile,
    )
    logger.info(
        f"eval sentences={len(refs)} cer_pnp={report.cer_pnp:.3f} "
        f"cer_norm_pnp={report.cer_norm_pnp:.3f} cer_phoneme={report.cer_phoneme:.3f}"
    )
    return report


def results_table(rows: List[Dict[str, object]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def write_report(report: EvalReport, text_path: str, table_path: Optional[str] = None,
                 name: str = "model", **row_fields):
    """Write the plain-text report and, optionally, its one-row CSV table."""
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(report.to_text())
    if table_path:
        results_table([report.to_row(name, **row_fields)]).to_csv(table_path, index=False)


def read_symbol_file(path: str) -> List[List[str]]:
    """One sentence per line, symbols separated by whitespace."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.split() for line in f.read().splitlines()]
    except OSError as e:
        raise InputError(f"Cannot read {path}: {e}")
