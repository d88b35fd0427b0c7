"""
Synthetic G2PnP Corpus
Deterministic grapheme -> phoneme-and-prosody rules, the oracle that applies
them, dataset generation and the versioned dataset file.

The rules are built so that context matters the way it does in real G2PnP:
ambiguous graphemes pick their pronunciation from the next `radius`
graphemes, so no predictor restricted to tokens <= t can resolve them.

Oracle, per sentence:
    - token t reads base[g] or, for ambiguous g, variants[g][v] where
      v = (sum of context[g][g_{t+i}] for i = 1..radius) % 2 (missing
      right context counts as 0)
    - accent phrases start at token 0; a phrase starting with grapheme g
      spans phrase_length[g] (3..6) tokens, cut short right after a clause
      grapheme; the boundary before the next phrase is '#' after a clause
      grapheme and '/' otherwise
    - '*' follows the k-th phoneme of a phrase, k = accent[g_first]
      (0 = unaccented, no '*'; no '*' if the phrase is shorter than k)
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ctc import LabelVocab
from exceptions import DatasetError, InputError
from numerics import Rng

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1

# lower bound on ambiguous positions per generated sentence
MIN_AMBIGUOUS_PERCENT = 15

PHONEMES = (
    "a", "i", "u", "e", "o", "k", "s", "t", "n", "h", "m", "y",
    "r", "w", "g", "z", "d", "b", "p", "N", "cl", "ch", "sh", "ts",
)

LabelSequence = List[str]


def grapheme_names(n: int) -> List[str]:
    return [f"g{i:02d}" for i in range(n)]


def vocab_hash(symbols: Sequence[str]) -> str:
    return hashlib.sha256("\x1f".join(symbols).encode("utf-8")).hexdigest()[:16]


@dataclass
class SyntheticRules:
    """
    Rule tables of the synthetic language.

    Attributes:
        seed: Seed the tables were drawn from
        radius: Right-context radius r of ambiguous graphemes
        graphemes: Grapheme symbols (ids are list positions)
        base: Per grapheme, its pronunciation (1-3 phonemes)
        ambiguous: Sorted ids of ambiguous graphemes
        variants: Ambiguous grapheme -> two distinct pronunciations
        context: Ambiguous grapheme -> 0/1 vote of every possible next grapheme
        phrase_length: Per grapheme, accent-phrase length when it starts a phrase
        accent: Per grapheme, accent-nucleus position k (0 = none)
        clause: Ids of clause graphemes (phrase ends after them with '#')
        ambiguous_rate: Probability of drawing an ambiguous grapheme during generation
    """

    seed: int
    radius: int
    graphemes: List[str]
    base: List[List[str]]
    ambiguous: List[int]
    variants: Dict[int, List[List[str]]]
    context: Dict[int, List[int]]
    phrase_length: List[int]
    accent: List[int]
    clause: List[int]
    ambiguous_rate: float = 0.3
    vocab: LabelVocab = field(default_factory=lambda: LabelVocab(PHONEMES))

    @classmethod
    def from_seed(cls, seed: int, radius: int = 1, n_graphemes: int = 40,
                  n_ambiguous: int = 10, n_clause: int = 2,
                  ambiguous_rate: float = 0.3) -> "SyntheticRules":
        """
        Draw a rule set.

        Args:
            seed: Rules seed
            radius: Right-context radius r (>= 1)
            n_graphemes: Grapheme vocabulary size
            n_ambiguous: Number of context-dependent graphemes
            n_clause: Number of clause graphemes (never ambiguous)
            ambiguous_rate: Share of generated positions drawn from the ambiguous set
        """
        if radius < 1:
            raise InputError(f"radius must be >= 1, got {radius}")
        if n_ambiguous + n_clause >= n_graphemes:
            raise InputError("Too many ambiguous/clause graphemes for the vocabulary")
        rng = Rng(seed).stream("init").generator

        def pronunciation() -> List[str]:
            length = int(rng.integers(1, 4))
            out: List[str] = []
            while len(out) < length:
                ph = PHONEMES[int(rng.integers(len(PHONEMES)))]
                if not out or out[-1] != ph:
                    out.append(ph)
            return out

        base = [pronunciation() for _ in range(n_graphemes)]
        order = [int(i) for i in rng.permutation(n_graphemes)]
        ambiguous = sorted(order[:n_ambiguous])
        clause = sorted(order[n_ambiguous:n_ambiguous + n_clause])
        variants: Dict[int, List[List[str]]] = {}
        context: Dict[int, List[int]] = {}
        for g in ambiguous:
            first = base[g]
            second = pronunciation()
            while second == first:
                second = pronunciation()
            variants[g] = [first, second]
            votes = np.zeros(n_graphemes, dtype=int)
            votes[rng.permutation(n_graphemes)[: n_graphemes // 2]] = 1
            context[g] = [int(v) for v in votes]
        phrase_length = [int(v) for v in rng.integers(3, 7, size=n_graphemes)]
        accent = [int(v) for v in rng.integers(0, 4, size=n_graphemes)]
        return cls(
            seed=seed, radius=radius, graphemes=grapheme_names(n_graphemes), base=base,
            ambiguous=ambiguous, variants=variants, context=context,
            phrase_length=phrase_length, accent=accent, clause=clause,
            ambiguous_rate=ambiguous_rate,
        )

    @property
    def grapheme_index(self) -> Dict[str, int]:
        return {g: i for i, g in enumerate(self.graphemes)}

    def encode_graphemes(self, symbols: Sequence[str]) -> List[int]:
        index = self.grapheme_index
        try:
            return [index[s] for s in symbols]
        except KeyError as e:
            raise InputError(f"Unknown grapheme {e}")

    def variant_index(self, graphemes: Sequence[int], position: int) -> int:
        g = graphemes[position]
        votes = 0
        for i in range(1, self.radius + 1):
            if position + i < len(graphemes):
                votes += self.context[g][graphemes[position + i]]
        return votes % 2

    def pronounce(self, graphemes: Sequence[int], position: int) -> List[str]:
        g = graphemes[position]
        if g in self.variants:
            return self.variants[g][self.variant_index(graphemes, position)]
        return self.base[g]


def oracle_alignment(rules: SyntheticRules, graphemes: Sequence[int]) -> Tuple[LabelSequence, List[int]]:
    """
    Apply the rules and keep, for every output symbol, its source token.

    Args:
        rules: Rule tables
        graphemes: Grapheme ids

    Returns:
        (PnP symbols, source token index of each symbol)
    """
    n_graphemes = len(rules.graphemes)
    for g in graphemes:
        if not 0 <= g < n_graphemes:
            raise InputError(f"Grapheme id {g} outside vocabulary of {n_graphemes}")
    clause = set(rules.clause)
    symbols: LabelSequence = []
    spans: List[int] = []
    t = 0
    n = len(graphemes)
    boundary = None
    while t < n:
        first = graphemes[t]
        end = min(n, t + rules.phrase_length[first])
        next_boundary = "/"
        for c in range(t, end):
            if graphemes[c] in clause:
                end = c + 1
                next_boundary = "#"
                break
        if boundary is not None:
            symbols.append(boundary)
            spans.append(t)
        k = rules.accent[first]
        count = 0
        for pos in range(t, end):
            for ph in rules.pronounce(graphemes, pos):
                symbols.append(ph)
                spans.append(pos)
                count += 1
                if count == k:
                    symbols.append("*")
                    spans.append(pos)
        boundary = next_boundary
        t = end
    return symbols, spans


def oracle_g2pnp(rules: SyntheticRules, graphemes: Sequence[int]) -> LabelSequence:
    """Deterministic PnP sequence for a grapheme sentence."""
    return oracle_alignment(rules, graphemes)[0]


def ambiguous_positions(rules: SyntheticRules, graphemes: Sequence[int]) -> List[bool]:
    amb = set(rules.ambiguous)
    return [g in amb for g in graphemes]


def _next_vote_probability(rules: SyntheticRules, g: int) -> float:
    """P(context vote = 1) for grapheme g under the generation distribution."""
    n = len(rules.graphemes)
    amb = set(rules.ambiguous)
    plain = [i for i in range(n) if i not in amb]
    p = 0.0
    for nxt in range(n):
        weight = (rules.ambiguous_rate / len(amb)) if nxt in amb else ((1 - rules.ambiguous_rate) / len(plain))
        p += weight * rules.context[g][nxt]
    return p


def causal_error_floor(rules: SyntheticRules) -> float:
    """
    Expected error of the best causal predictor at interior ambiguous positions.

    The variant is the parity of `radius` independent votes, so
    P(odd) = (1 - (1 - 2p)^r) / 2 and the best causal guess errs with
    probability min(P(odd), 1 - P(odd)). Averaged over the ambiguous set.
    """
    floors = []
    for g in rules.ambiguous:
        p = _next_vote_probability(rules, g)
        odd = (1.0 - (1.0 - 2.0 * p) ** rules.radius) / 2.0
        floors.append(min(odd, 1.0 - odd))
    return float(np.mean(floors)) if floors else 0.0


def causal_best_prediction(rules: SyntheticRules, g: int) -> int:
    """Most likely variant of ambiguous grapheme g without any right context."""
    p = _next_vote_probability(rules, g)
    odd = (1.0 - (1.0 - 2.0 * p) ** rules.radius) / 2.0
    return 1 if odd > 0.5 else 0


@dataclass
class DatasetFile:
    """
    Versioned dataset: header plus (grapheme ids, label ids) records.

    File format (JSON): {"header": {...}, "records": [[graphemes, labels], ...]}
    """

    header: Dict
    records: List[Tuple[List[int], List[int]]]

    def write(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        payload = {"header": self.header, "records": [[list(g), list(l)] for g, l in self.records]}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, separators=(",", ":"), sort_keys=True)
        logger.info(f"dataset_written path={path} records={len(self.records)}")

    @classmethod
    def read(cls, path: str) -> "DatasetFile":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise DatasetError(f"Dataset file not found: {path}")
        except json.JSONDecodeError as e:
            raise DatasetError(f"Corrupted dataset file {path}: {e}")
        header = payload.get("header", {})
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise DatasetError(f"Unsupported dataset version {header.get('format_version')} in {path}")
        records = [(list(g), list(l)) for g, l in payload.get("records", [])]
        return cls(header=header, records=records)

    def rules(self) -> SyntheticRules:
        rules = SyntheticRules.from_seed(self.header["rules_seed"], self.header["radius"])
        if vocab_hash(rules.graphemes) != self.header.get("grapheme_hash") or \
                vocab_hash(rules.vocab.symbols) != self.header.get("label_hash"):
            raise DatasetError("Dataset vocabulary hashes do not match its rules")
        return rules

    def subset(self, fraction: float) -> "DatasetFile":
        """First `fraction` of the records (records are already in random order)."""
        count = max(1, int(round(len(self.records) * fraction))) if self.records else 0
        header = dict(self.header, n_records=count)
        return DatasetFile(header=header, records=self.records[:count])


def generate_sentence(rules: SyntheticRules, rng: np.random.Generator, length: int) -> List[int]:
    """Draw one sentence with at least MIN_AMBIGUOUS_PERCENT% of its positions ambiguous."""
    amb = rules.ambiguous
    amb_set = set(amb)
    plain = [i for i in range(len(rules.graphemes)) if i not in amb_set]
    picks_amb = rng.random(length) < rules.ambiguous_rate
    graphemes = [
        int(amb[rng.integers(len(amb))]) if use_amb else int(plain[rng.integers(len(plain))])
        for use_amb in picks_amb
    ]
    shortfall = -(-MIN_AMBIGUOUS_PERCENT * length // 100) - int(picks_amb.sum())
    if shortfall > 0:
        for pos in rng.choice(np.flatnonzero(~picks_amb), size=shortfall, replace=False):
            graphemes[int(pos)] = int(amb[rng.integers(len(amb))])
    return graphemes


def generate(rules_seed: int, n_sentences: int, len_range: Tuple[int, int] = (4, 32),
             radius: int = 1, split: str = "train") -> DatasetFile:
    """
    Generate a reproducible dataset.

    Args:
        rules_seed: Seed of the rules and of the sentence draws
        n_sentences: Number of records (0 gives a header-only file)
        len_range: Inclusive sentence length range in tokens, within [4, 128]
        radius: Right-context radius of ambiguous graphemes
        split: Name of the split; each split draws from its own stream

    Returns:
        DatasetFile whose labels equal the oracle for every record
    """
    low, high = len_range
    if not 4 <= low <= high <= 128:
        raise InputError(f"len_range must lie within [4, 128], got {len_range}")
    if n_sentences < 0:
        raise InputError("n_sentences must be >= 0")
    rules = SyntheticRules.from_seed(rules_seed, radius)
    split_key = int(hashlib.sha256(split.encode("utf-8")).hexdigest()[:8], 16)
    data_rng = Rng(rules_seed).stream("data").stream(split_key)
    records = []
    for i in range(n_sentences):
        sentence_rng = data_rng.stream(i).generator
        length = int(sentence_rng.integers(low, high + 1))
        graphemes = generate_sentence(rules, sentence_rng, length)
        labels = rules.vocab.encode(oracle_g2pnp(rules, graphemes))
        records.append((graphemes, labels))
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "rules_seed": rules_seed,
        "radius": radius,
        "split": split,
        "len_range": [low, high],
        "n_records": n_sentences,
        "grapheme_hash": vocab_hash(rules.graphemes),
        "label_hash": vocab_hash(rules.vocab.symbols),
    }
    amb_share = np.mean([a for g, _ in records for a in ambiguous_positions(rules, g)]) if records else 0.0
    logger.info(f"dataset_generated split={split} records={n_sentences} ambiguous_share={amb_share:.3f}")
    return DatasetFile(header=header, records=records)
