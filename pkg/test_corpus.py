"""
Tests for the synthetic G2PnP rules, oracle and dataset files
"""

import json

import numpy as np
import pytest

from corpus import (MIN_AMBIGUOUS_PERCENT, DatasetFile, SyntheticRules, ambiguous_positions,
                    causal_best_prediction, causal_error_floor, generate, oracle_alignment, oracle_g2pnp)
from exceptions import DatasetError, InputError


def test_rules_are_deterministic(rules):
    again = SyntheticRules.from_seed(7)
    assert again.base == rules.base
    assert again.ambiguous == rules.ambiguous
    assert again.context == rules.context
    assert SyntheticRules.from_seed(8).base != rules.base


def test_rule_table_shapes(rules):
    assert len(rules.graphemes) == 40
    assert len(rules.ambiguous) == 10
    assert len(rules.clause) == 2
    assert not set(rules.ambiguous) & set(rules.clause)
    assert all(3 <= n <= 6 for n in rules.phrase_length)
    assert all(0 <= k <= 3 for k in rules.accent)
    for g, (first, second) in rules.variants.items():
        assert first != second


def test_ambiguous_grapheme_follows_its_right_neighbour(rules):
    g = rules.ambiguous[0]
    votes = rules.context[g]
    zero = votes.index(0)
    one = votes.index(1)
    assert rules.pronounce([g, zero], 0) == rules.variants[g][0]
    assert rules.pronounce([g, one], 0) == rules.variants[g][1]
    # no right context counts as a zero vote
    assert rules.pronounce([g], 0) == rules.variants[g][0]


def test_alignment_spans_are_monotone(rules):
    rng = np.random.default_rng(0)
    for _ in range(20):
        graphemes = [int(g) for g in rng.integers(0, 40, size=15)]
        symbols, spans = oracle_alignment(rules, graphemes)
        assert len(symbols) == len(spans)
        assert spans == sorted(spans)
        assert set(spans) == set(range(15))
        assert symbols[0] not in ("#", "/", "*")


def test_clause_graphemes_produce_intonation_boundaries(rules):
    rng = np.random.default_rng(1)
    for _ in range(20):
        graphemes = [int(g) for g in rng.integers(0, 40, size=12)]
        expected = sum(g in rules.clause for g in graphemes[:-1])
        assert oracle_g2pnp(rules, graphemes).count("#") == expected


def test_accent_mark_position(rules):
    plain = [g for g in range(40) if g not in rules.ambiguous and g not in rules.clause]
    first = next(g for g in plain if rules.accent[g] >= 1)
    filler = next(g for g in plain if g != first)
    symbols = oracle_g2pnp(rules, [first, filler, filler])
    k = rules.accent[first]
    assert symbols[k] == "*"
    assert symbols.count("*") == 1


def test_oracle_rejects_unknown_graphemes(rules):
    with pytest.raises(InputError):
        oracle_g2pnp(rules, [0, 40])
    with pytest.raises(InputError):
        rules.encode_graphemes(["g00", "zz"])


def test_causal_floor_is_positive_and_bounded(rules):
    floor = causal_error_floor(rules)
    assert 0.0 < floor <= 0.5
    for g in rules.ambiguous:
        assert causal_best_prediction(rules, g) in (0, 1)


def test_generate_matches_oracle_and_is_reproducible():
    first = generate(3, 10, (4, 12))
    second = generate(3, 10, (4, 12))
    assert first.records == second.records
    rules = first.rules()
    for graphemes, labels in first.records:
        assert 4 <= len(graphemes) <= 12
        assert rules.vocab.decode(labels) == oracle_g2pnp(rules, graphemes)
    assert generate(3, 10, (4, 12), split="valid").records != first.records


def test_generate_validates_arguments():
    with pytest.raises(InputError):
        generate(0, 5, (2, 10))
    with pytest.raises(InputError):
        generate(0, -1)
    assert generate(0, 0).records == []


def test_dataset_file_round_trip(tmp_path):
    dataset = generate(5, 6, (4, 8))
    path = str(tmp_path / "nested" / "train.json")
    dataset.write(path)
    loaded = DatasetFile.read(path)
    assert loaded.records == dataset.records
    assert loaded.header == dataset.header


def test_dataset_files_are_byte_identical(tmp_path):
    generate(5, 6).write(str(tmp_path / "a.json"))
    generate(5, 6).write(str(tmp_path / "b.json"))
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_dataset_read_errors(tmp_path):
    with pytest.raises(DatasetError):
        DatasetFile.read(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(DatasetError):
        DatasetFile.read(str(broken))
    old = tmp_path / "old.json"
    old.write_text(json.dumps({"header": {"format_version": 0}, "records": []}))
    with pytest.raises(DatasetError):
        DatasetFile.read(str(old))


def test_tampered_vocabulary_is_detected():
    dataset = generate(5, 2)
    dataset.header["label_hash"] = "0" * 16
    with pytest.raises(DatasetError):
        dataset.rules()


def test_subset_keeps_a_prefix():
    dataset = generate(5, 20)
    part = dataset.subset(0.25)
    assert part.records == dataset.records[:5]
    assert part.header["n_records"] == 5


def test_ambiguous_positions(rules):
    g = rules.ambiguous[0]
    plain = next(x for x in range(40) if x not in rules.ambiguous)
    assert ambiguous_positions(rules, [plain, g, plain]) == [False, True, False]


@pytest.mark.parametrize("seed", range(30))
def test_every_sentence_keeps_the_minimum_ambiguous_share(seed):
    dataset = generate(seed, 3, (4, 6))
    rules = dataset.rules()
    for graphemes, labels in dataset.records:
        share = np.mean(ambiguous_positions(rules, graphemes))
        assert share >= MIN_AMBIGUOUS_PERCENT / 100
        assert rules.vocab.decode(labels) == oracle_g2pnp(rules, graphemes)


def test_causal_predictors_err_at_the_floor_rate():
    dataset = generate(7, 400, (16, 32))
    rules = dataset.rules()
    guesses, truths, sources = [], [], []
    for graphemes, _ in dataset.records:
        for pos, amb in enumerate(ambiguous_positions(rules, graphemes)):
            if amb and pos + rules.radius < len(graphemes):
                guesses.append(causal_best_prediction(rules, graphemes[pos]))
                truths.append(rules.variant_index(graphemes, pos))
                sources.append(graphemes[pos])
    truths = np.array(truths)
    sources = np.array(sources)
    floor = causal_error_floor(rules)
    assert len(truths) > 1000
    assert abs(np.mean(np.array(guesses) != truths) - floor) < 0.05
    # the best causal rule fitted on the data itself does no better
    fitted_errors = sum(min(np.sum(truths[sources == g]), np.sum(1 - truths[sources == g]))
                        for g in np.unique(sources))
    assert fitted_errors / len(truths) > floor - 0.05
