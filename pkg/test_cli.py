"""
End-to-end tests for the command line
"""

import io
import os
import struct
import sys

import numpy as np
import pytest

from cli import load_model_and_rules, main
from config import load_run_config
from conftest import tiny_model
from corpus import DatasetFile
from engine import stream_decode

TINY = ["chunk_size=2", "past_context=2", "lookahead=1", "upsample=2", "n_layers=2",
        "intermediate_layers=1", "d_model=8", "n_heads=2", "ff_dim=16", "conv_kernel=3",
        "dropout=0", "steps=2", "warmup_steps=1", "batch_frames=40", "log_every=1",
        "valid_every=1", "valid_size=4"]

TOKENS = ["g01", "g07", "g13", "g02", "g30", "g11", "g05", "g22", "g09"]


def settings(*pairs):
    args = []
    for pair in list(TINY) + list(pairs):
        args += ["--set", pair]
    return args


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """gen-data followed by train in one output directory."""
    out = str(tmp_path_factory.mktemp("run"))
    assert main(["--seed", "7", "--out", out, "gen-data", "--n", "12", "--n-valid", "4",
                 "--len-min", "4", "--len-max", "10"]) == 0
    data = settings(f"train_path={out}/train.json", f"valid_path={out}/valid.json",
                    "checkpoint=model.npz")
    assert main(["--seed", "7", "--out", out] + data + ["train"]) == 0
    return out


def test_gen_data_writes_both_splits(trained):
    train_set = DatasetFile.read(os.path.join(trained, "train.json"))
    valid_set = DatasetFile.read(os.path.join(trained, "valid.json"))
    assert len(train_set.records) == 12
    assert len(valid_set.records) == 4
    assert train_set.header["rules_seed"] == 7


def test_train_writes_run_artifacts(trained):
    for name in ("model.npz", "run.conf", "train_log.csv"):
        assert os.path.exists(os.path.join(trained, name))
    cfg = load_run_config(os.path.join(trained, "run.conf"))
    assert cfg.checkpoint == os.path.join(trained, "model.npz")
    assert cfg.seed == 7
    assert cfg.streaming.chunk_size == 2


def test_eval_checkpoint(trained, tmp_path, capsys):
    out = str(tmp_path)
    code = main(["--out", out, "eval", "--checkpoint", os.path.join(trained, "model.npz"),
                 "--data", os.path.join(trained, "valid.json"), "--offline", "--limit", "3"])
    assert code == 0
    assert "sentences=3" in capsys.readouterr().out
    assert os.path.exists(os.path.join(out, "report.txt"))
    assert os.path.exists(os.path.join(out, "results.csv"))


def test_eval_identical_symbol_files_score_zero(tmp_path, capsys):
    path = tmp_path / "refs.txt"
    path.write_text("k a # t o\ns * u /\n")
    code = main(["--out", str(tmp_path), "eval", "--hyps", str(path), "--refs", str(path)])
    assert code == 0
    text = capsys.readouterr().out
    for view in ("pnp", "norm_pnp", "phoneme"):
        assert f"view={view} cer=0.0000 ser=0.0000" in text


def test_eval_needs_both_symbol_files(tmp_path):
    path = tmp_path / "refs.txt"
    path.write_text("a\n")
    assert main(["--out", str(tmp_path), "eval", "--hyps", str(path)]) == 3


def expected_stream_lines(checkpoint, precision="float32"):
    model, rules = load_model_and_rules(checkpoint, precision)
    ids = [rules.grapheme_index[t] for t in TOKENS]
    return [rules.vocab.symbols[s] for s in stream_decode(model, ids)]


def emitted_symbols(output):
    lines = [line for line in output.splitlines() if line.startswith("arrival=")]
    return [line.split("symbol=")[1] for line in lines]


def test_stream_text_tokens(trained, monkeypatch, capsys):
    checkpoint = os.path.join(trained, "model.npz")
    monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(TOKENS) + "\n"))
    assert main(["stream", "--checkpoint", checkpoint]) == 0
    assert emitted_symbols(capsys.readouterr().out) == expected_stream_lines(checkpoint)


def test_stream_binary_tokens(trained, monkeypatch, capsys):
    checkpoint = os.path.join(trained, "model.npz")
    payload = b"".join(struct.pack(">H", len(t)) + t.encode("utf-8") for t in TOKENS)
    monkeypatch.setattr(sys, "stdin", io.TextIOWrapper(io.BytesIO(payload)))
    assert main(["stream", "--checkpoint", checkpoint, "--binary"]) == 0
    assert emitted_symbols(capsys.readouterr().out) == expected_stream_lines(checkpoint)


def test_inference_loads_cast_to_float32_unless_asked(trained, monkeypatch, capsys):
    checkpoint = os.path.join(trained, "model.npz")
    model, _ = load_model_and_rules(checkpoint)
    assert model.cfg.precision == "float32"
    assert all(p.data.dtype == np.float32 for p in model.named_parameters().values())
    wide, _ = load_model_and_rules(checkpoint, "float64")
    assert all(p.data.dtype == np.float64 for p in wide.named_parameters().values())
    monkeypatch.setattr(sys, "stdin", io.StringIO("\n".join(TOKENS) + "\n"))
    assert main(["stream", "--checkpoint", checkpoint, "--float64"]) == 0
    assert emitted_symbols(capsys.readouterr().out) == expected_stream_lines(checkpoint, "float64")


def test_stream_rejects_bad_input(trained, monkeypatch):
    checkpoint = os.path.join(trained, "model.npz")
    monkeypatch.setattr(sys, "stdin", io.StringIO("g01\nnot-a-grapheme\n"))
    assert main(["stream", "--checkpoint", checkpoint]) == 3
    monkeypatch.setattr(sys, "stdin", io.TextIOWrapper(io.BytesIO(b"\x00\x05g0")))
    assert main(["stream", "--checkpoint", checkpoint, "--binary"]) == 3


def test_checkpoint_without_dataset_metadata(tmp_path):
    path = str(tmp_path / "bare.npz")
    tiny_model().save(path)
    assert main(["bench", "--checkpoint", path]) == 3


def test_analyze_mask(tmp_path, capsys):
    code = main(["--out", str(tmp_path)] + settings() + ["analyze-mask", "--tokens", "6",
                                                         "--regular-window", "1"])
    assert code == 0
    text = capsys.readouterr().out
    assert "layer 1" in text
    assert "layer 2" in text
    assert "constant_across_layers=True" in text
    assert "regular_window=1 lookahead_per_layer=[1, 2]" in text
    assert os.path.exists(tmp_path / "receptive_field.tsv")


def test_bench_reports_tokens_waited(capsys):
    code = main(settings() + ["bench", "--tokens", "10", "--tau", "0.01", "--repeats", "1"])
    assert code == 0
    text = capsys.readouterr().out
    assert "tokens_waited=3" in text
    assert "start=3τ + " in text


def test_config_errors_exit_with_code_2(tmp_path):
    assert main(["--set", "chunk_size=zero", "analyze-mask"]) == 2
    assert main(["--set", "no_such_key=1", "analyze-mask"]) == 2
    assert main(["--config", str(tmp_path / "missing.conf"), "analyze-mask"]) == 2


def test_missing_dataset_exits_with_code_3(tmp_path):
    args = settings(f"train_path={tmp_path}/absent.json", f"valid_path={tmp_path}/absent.json")
    assert main(["--out", str(tmp_path)] + args + ["train"]) == 3
