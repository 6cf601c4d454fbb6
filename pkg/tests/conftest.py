import numpy as np
import pytest

from app.data import synth_dataset
from app.diffcore import precision
from app.schemas import DiscConfig, HypernetConfig, MlpShape, PatchGridSpec, RunConfig, SynthConfig, TrainConfig


def tiny_synth(**overrides) -> SynthConfig:
    values = dict(
        height=16, width=16, train_samples=8, test_samples=5,
        class_a=(1, 1), class_b=(0, 1), radius=(2.0, 3.5), seed=3,
    )
    values.update(overrides)
    return SynthConfig(**values)


def tiny_train(**overrides) -> TrainConfig:
    values = dict(
        crop_height=16, crop_width=16, grid=PatchGridSpec(rows=2, cols=2), bands=2,
        epochs=2, batch_size=4, val_samples=4, seed=7,
        global_mlp=MlpShape(hidden=8, layers=3), local_mlp=MlpShape(hidden=8, layers=3),
        hypernet=HypernetConfig(width=4, trunk_blocks=1),
        disc=DiscConfig(widths=(4, 4, 1), strides=(2, 1, 1)),
    )
    values.update(overrides)
    return TrainConfig(**values)


def tiny_run(**overrides) -> RunConfig:
    return RunConfig(
        data=tiny_synth(),
        train=tiny_train(**overrides),
        sweep={"grids": [{"rows": 1, "cols": 1}, {"rows": 2, "cols": 2}]},
    )


@pytest.fixture
def synth_cfg() -> SynthConfig:
    return tiny_synth()


@pytest.fixture
def train_cfg() -> TrainConfig:
    return tiny_train()


@pytest.fixture
def toy_pairs(synth_cfg):
    train_set, _ = synth_dataset(synth_cfg, "train")
    test_set, _ = synth_dataset(synth_cfg, "test")
    return train_set, test_set


@pytest.fixture
def float64():
    with precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
