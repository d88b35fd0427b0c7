"""
Tests for the streaming Conformer encoder
"""

import numpy as np
import pytest

import numerics as nx
from conftest import tiny_config, tiny_model
from ctc import total_loss
from encoder import StreamingConformer, relative_position_ids, upsample
from exceptions import DatasetError, DimensionError
from masking import build_frame_masks
from numerics import Tensor


def test_forward_shapes(model):
    out = model.forward([3, 1, 4, 1, 5])
    assert out.hidden.shape == (10, 8)
    assert out.logits.shape == (10, 28)
    assert set(out.intermediate_logits) == {1}
    assert out.n_frames == 10


def test_upsample_repeats_each_token():
    emb = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(upsample(emb, 3).data[:, 0], [1, 1, 1, 3, 3, 3])


def test_relative_position_ids_are_clipped():
    ids = relative_position_ids(np.array([0, 5]), np.array([0, 1, 9]), window=3)
    np.testing.assert_array_equal(ids, [[3, 4, 6], [0, 0, 6]])


def test_outputs_ignore_tokens_beyond_the_receptive_field():
    model = tiny_model(chunk_size=2, past_context=2, lookahead=1)
    tokens = [5, 9, 2, 7, 7, 1, 3]
    changed = tokens[:3] + [11, 12, 13, 14]
    a = model.log_probs(tokens)
    b = model.log_probs(changed)
    # chunk 0 sees tokens 0..2 (chunk plus one look-ahead token) at most
    np.testing.assert_allclose(a[:4], b[:4], rtol=1e-12, atol=1e-12)
    assert not np.allclose(a[4:], b[4:])


def test_full_context_outputs_depend_on_the_future():
    model = tiny_model(full_context=True)
    a = model.log_probs([5, 9, 2, 7])
    b = model.log_probs([5, 9, 2, 8])
    assert not np.allclose(a[:2], b[:2])


def test_mask_frame_count_mismatch():
    model = tiny_model()
    masks = build_frame_masks(3, model.cfg)
    with pytest.raises(DimensionError):
        model.forward([1, 2, 3, 4], masks)
    with pytest.raises(DimensionError):
        model.forward([1, 2, 3], masks[:1])


def test_same_seed_same_parameters():
    a = tiny_model(seed=3).named_parameters()
    b = tiny_model(seed=3).named_parameters()
    c = tiny_model(seed=4).named_parameters()
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["embedding"].data, c["embedding"].data)


def test_parameter_names_cover_blocks_and_heads(model):
    names = model.named_parameters()
    assert "blocks.1.att.rel_bias" in names
    assert "blocks.2.conv.depthwise" in names
    assert "selfcond.1.proj" in names
    assert names["blocks.1.att.rel_bias"].shape == (2 * model.cfg.rel_window + 1, model.cfg.n_heads)


def test_save_and_load_reproduce_outputs(tmp_path, model):
    path = str(tmp_path / "model.npz")
    model.save(path, extra={"note": "x"})
    loaded = StreamingConformer.load(path)
    assert loaded.cfg == model.cfg
    np.testing.assert_array_equal(loaded.log_probs([1, 2, 3]), model.log_probs([1, 2, 3]))
    single = StreamingConformer.load(path, precision="float32")
    assert single.params["embedding"].dtype == np.float32
    np.testing.assert_allclose(single.log_probs([1, 2, 3]), model.log_probs([1, 2, 3]), atol=1e-3)


def test_load_rejects_mismatched_shapes(tmp_path, model):
    path = str(tmp_path / "model.npz")
    model.save(path)
    arrays, meta = nx.load_checkpoint(path)
    arrays["embedding"] = arrays["embedding"][:5]
    with pytest.raises(DatasetError):
        model.load_parameters(arrays)


def test_full_model_gradients_match_finite_differences():
    model = tiny_model()
    tokens = [4, 8, 15, 16]
    target = [3, 5, 7]
    outputs = model.forward(tokens)
    loss, _, _ = total_loss(outputs, target, model.cfg.intermediate_weight)
    loss.backward()
    params = model.named_parameters()

    for name in ("blocks.1.att.rel_bias", "blocks.2.conv.depthwise", "selfcond.1.proj", "blocks.1.ffn1.w2"):
        tensor = params[name]
        analytic = tensor.grad.copy()

        def fn(arrays, tensor=tensor):
            tensor.data = arrays[0]
            with nx.no_grad():
                value, _, _ = total_loss(model.forward(tokens), target, model.cfg.intermediate_weight)
            return value.item()

        original = tensor.data.copy()
        numeric = nx.numerical_gradient(fn, [original.copy()], 0, eps=1e-6)
        tensor.data = original
        assert nx.gradient_relative_error(analytic, numeric) < 1e-4, name


def test_dropout_changes_training_outputs_only():
    model = tiny_model(dropout=0.5)
    eval_a = model.forward([1, 2, 3]).logits.data
    eval_b = model.forward([1, 2, 3]).logits.data
    np.testing.assert_array_equal(eval_a, eval_b)
    train = model.forward([1, 2, 3], training=True, rng=nx.Rng(0).stream("dropout")).logits.data
    assert not np.allclose(train, eval_a)


def test_config_round_trips_through_metadata(model):
    meta = model.metadata()
    assert meta["streaming"]["intermediate_layers"] == [1]
    assert tiny_config().to_dict() == meta["streaming"]


def test_self_condition_works_frame_by_frame(model):
    rng = np.random.default_rng(5)
    hidden = Tensor(rng.normal(size=(4, 8)))
    logits = rng.normal(size=(4, 28))
    base = model.self_condition(hidden, Tensor(logits), 1).data
    assert base.shape == (4, 8)
    changed = logits.copy()
    changed[2] += rng.normal(size=28)
    out = model.self_condition(hidden, Tensor(changed), 1).data
    np.testing.assert_array_equal(out[[0, 1, 3]], base[[0, 1, 3]])
    assert not np.allclose(out[2], base[2])


def test_zero_feedback_projection_reduces_to_layer_norm(model):
    rng = np.random.default_rng(9)
    hidden = Tensor(rng.normal(size=(5, 8)))
    model.params["selfcond.1.proj"].data[:] = 0.0
    out = model.self_condition(hidden, Tensor(rng.normal(size=(5, 28))), 1).data
    expected = nx.layer_norm(hidden, model.params["selfcond.1.ln.gamma"],
                             model.params["selfcond.1.ln.beta"]).data
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_initial_loss_is_finite(seed):
    model = tiny_model(seed=seed, intermediate_weight=1.0 / 3.0)
    rng = np.random.default_rng(seed)
    tokens = [int(t) for t in rng.integers(0, 40, size=int(rng.integers(3, 9)))]
    target = [int(t) for t in rng.integers(1, 28, size=len(tokens) // 2 + 1)]
    loss, terms, infeasible = total_loss(model.forward(tokens), target, model.cfg.intermediate_weight)
    assert infeasible == 0
    assert np.isfinite(float(loss.data))
    assert all(np.isfinite(v) for v in terms.values())
