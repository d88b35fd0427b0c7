"""Shared tiny-scale fixtures for the test suite."""

import pytest

from config import RunConfig, StreamingConfig
from corpus import SyntheticRules, generate
from encoder import StreamingConformer


def tiny_config(**changes) -> StreamingConfig:
    base = dict(chunk_size=2, past_context=2, lookahead=1, upsample=2, n_layers=2,
                intermediate_layers=(1,), d_model=8, n_heads=2, ff_dim=16,
                conv_kernel=3, dropout=0.0)
    base.update(changes)
    return StreamingConfig(**base)


def tiny_model(seed: int = 0, n_graphemes: int = 40, n_labels: int = 28, **changes) -> StreamingConformer:
    return StreamingConformer(tiny_config(**changes), n_graphemes, n_labels, seed=seed)


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture(scope="session")
def rules():
    return SyntheticRules.from_seed(7)


@pytest.fixture
def datasets(tmp_path):
    """Small train/valid files written to a temporary directory."""
    train = generate(7, 12, (4, 10), split="train")
    valid = generate(7, 4, (4, 10), split="valid")
    train_path = tmp_path / "train.json"
    valid_path = tmp_path / "valid.json"
    train.write(str(train_path))
    valid.write(str(valid_path))
    return train_path, valid_path


@pytest.fixture
def run_config(datasets, tmp_path):
    train_path, valid_path = datasets
    return RunConfig(
        streaming=tiny_config(),
        steps=3,
        warmup_steps=1,
        batch_frames=40,
        log_every=1,
        valid_every=2,
        valid_size=4,
        checkpoint=str(tmp_path / "model.npz"),
        train_path=str(train_path),
        valid_path=str(valid_path),
    )
