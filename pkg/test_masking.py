"""
Tests for chunk-aware masks, MLA and receptive-field composition
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from config import StreamingConfig
from exceptions import ConfigError
from masking import (build_frame_masks, build_token_mask, effective_lookahead, expand_to_frames,
                     mask_difference, regular_lookahead_mask, render_mask, token_attention_rights)


def streaming(**changes) -> StreamingConfig:
    base = dict(chunk_size=3, past_context=3, lookahead=0, upsample=1, n_layers=2,
                intermediate_layers=(1,), d_model=8, n_heads=2)
    base.update(changes)
    return StreamingConfig(**base)


def test_chunk_mask_without_lookahead():
    mask = build_token_mask(6, streaming(), 1).allowed
    expected = np.array([
        [1, 1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0, 0],
        [1, 1, 1, 0, 0, 0],
        [1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1],
    ], dtype=bool)
    np.testing.assert_array_equal(mask, expected)


def test_mla_adds_one_column_on_the_first_layer_only():
    cfg = streaming(lookahead=1)
    first = build_token_mask(6, cfg, 1).allowed
    second = build_token_mask(6, cfg, 2).allowed
    assert first[:3, 3].all()
    assert not first[:3, 4:].any()
    np.testing.assert_array_equal(second, build_token_mask(6, streaming(), 1).allowed)
    assert mask_difference(build_token_mask(6, cfg, 1), build_token_mask(6, cfg, 2)) == {
        "only_first": 3, "only_second": 0}


def test_past_context_window_is_anchored_at_chunk_start():
    cfg = streaming(chunk_size=2, past_context=1)
    mask = build_token_mask(6, cfg, 2).allowed
    # tokens 4 and 5 (chunk 2) see token 3 and their chunk, not token 2
    assert mask[5, 3] and mask[4, 3]
    assert not mask[5, 2]
    token_anchor = build_token_mask(6, cfg.replace(past_anchor="token"), 2).allowed
    assert token_anchor[4, 3]
    assert not token_anchor[5, 3]


def test_mla_window_is_truncated_at_sequence_end():
    cfg = streaming(chunk_size=2, lookahead=2)
    mask = build_token_mask(5, cfg, 1).allowed
    assert mask[2, 4]
    assert mask.shape == (5, 5)


def test_full_context_mask_is_all_true():
    cfg = streaming(full_context=True)
    for layer_mask in build_frame_masks(7, cfg):
        assert layer_mask.allowed.all()


def test_invalid_layer_index():
    with pytest.raises(ConfigError):
        build_token_mask(4, streaming(), 3)
    with pytest.raises(ConfigError):
        token_attention_rights(np.arange(2), np.arange(2), streaming(), 0)


def test_frame_expansion_repeats_blocks():
    cfg = streaming(lookahead=1)
    token_mask = build_token_mask(5, cfg, 1)
    frames = expand_to_frames(token_mask, 3)
    assert frames.allowed.shape == (15, 15)
    assert frames.granularity == "frame"
    for q in range(15):
        for j in range(15):
            assert frames.allowed[q, j] == token_mask.allowed[q // 3, j // 3]


def test_rights_on_absolute_indices_match_full_mask():
    cfg = streaming(chunk_size=2, past_context=2, lookahead=1)
    full = build_token_mask(9, cfg, 1).allowed
    queries = np.arange(4, 6)
    keys = np.arange(2, 7)
    np.testing.assert_array_equal(token_attention_rights(queries, keys, cfg, 1), full[4:6, 2:7])


@settings(max_examples=60, deadline=None)
@given(chunk=st.sampled_from([2, 3, 5]), past=st.sampled_from([0, 3, 10]),
       lookahead=st.sampled_from([0, 1, 2]), layers=st.sampled_from([2, 4, 8]))
def test_lookahead_is_constant_across_layers(chunk, past, lookahead, layers):
    cfg = StreamingConfig(chunk_size=chunk, past_context=past, lookahead=lookahead, upsample=1,
                          n_layers=layers, intermediate_layers=(1,), d_model=8, n_heads=2)
    report = effective_lookahead(cfg, 3 * chunk + lookahead + 2)
    assert report.per_offset_lookahead == list(range(chunk + lookahead - 1, lookahead - 1, -1))
    assert report.constant_across_layers


@settings(max_examples=40, deadline=None)
@given(chunk=st.sampled_from([1, 2, 3, 5]), past=st.sampled_from([0, 1, 3]),
       lookahead=st.sampled_from([0, 1, 2]), anchor=st.sampled_from(["chunk", "token"]))
def test_past_reach_never_shrinks_with_depth(chunk, past, lookahead, anchor):
    n_tokens = 6 * chunk + lookahead
    reaches = []
    for layers in range(1, 6):
        cfg = StreamingConfig(chunk_size=chunk, past_context=past, lookahead=lookahead, upsample=1,
                              n_layers=layers, intermediate_layers=(), d_model=8, n_heads=2,
                              past_anchor=anchor)
        reaches.append(effective_lookahead(cfg, n_tokens).past_reach)
    for shallow, deep in zip(reaches, reaches[1:]):
        assert np.all(deep >= shallow)
    if past > 0:
        assert reaches[-1][-1] > reaches[0][-1]


@pytest.mark.parametrize("window,layers", [(1, 2), (1, 4), (2, 3)])
def test_regular_lookahead_grows_with_depth(window, layers):
    cfg = StreamingConfig(chunk_size=2, past_context=3, lookahead=0, upsample=1,
                          n_layers=layers, intermediate_layers=(1,), d_model=8, n_heads=2)
    report = effective_lookahead(cfg, layers * window + 6, mode="regular", window=window)
    assert [int(row[0]) for row in report.per_layer_lookahead] == [window * (l + 1) for l in range(layers)]
    assert not report.constant_across_layers


def test_regular_mask_respects_past_limit():
    mask = regular_lookahead_mask(5, 1, past=1)
    assert mask[2].tolist() == [False, True, True, True, False]


def test_receptive_field_table_columns():
    cfg = streaming(lookahead=1)
    table = effective_lookahead(cfg, 9).to_frame()
    assert list(table.columns) == ["token", "chunk_offset", "lookahead", "past_reach"]
    assert table["chunk_offset"].tolist() == [0, 1, 2] * 3


def test_effective_lookahead_needs_a_full_chunk():
    with pytest.raises(ConfigError):
        effective_lookahead(streaming(), 2)
    with pytest.raises(ConfigError):
        effective_lookahead(streaming(), 6, mode="sideways")


def test_render_mask_grid():
    text = render_mask(build_token_mask(3, streaming(chunk_size=2, lookahead=1), 1))
    lines = text.splitlines()
    assert lines[0].startswith("layer 1")
    assert lines[1].endswith("■■■")
    assert lines[3].endswith("■■■")


@pytest.mark.parametrize("chunk,past,lookahead", [(1, 0, 3), (1, 2, 0), (2, 3, 1), (5, 10, 2), (3, 0, 0)])
def test_relative_window_covers_every_attended_offset(chunk, past, lookahead):
    cfg = streaming(chunk_size=chunk, past_context=past, lookahead=lookahead)
    n_tokens = 4 * chunk + past + lookahead
    q, j = np.nonzero(build_token_mask(n_tokens, cfg, 1).allowed)
    assert np.abs(j - q).max() < cfg.rel_window
    assert (j - q).max() == chunk + lookahead - 1
