import numpy as np
import pytest
import torch

from caseforge.data import GeneratorConfig, generate_dataset
from caseforge.models import ModelConfig

torch.set_num_threads(1)

TINY_DATA = dict(ids_train=6, ids_test=4, clothing_variants=3, poses=3, views=2, height=32, width=16,
                 palette_hues=4)
TINY_MODEL = dict(height=32, width=16, num_classes=6, feature_dim=16, color_dim=8,
                  encoder_channels=(8, 8, 16, 16), encoder_strides=(2, 2, 1, 1), color_channels=(8, 8, 8),
                  generator_channels=8, generator_blocks=2, disc_channels=(8, 8, 8), feature_disc_hidden=16)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    return generate_dataset(GeneratorConfig(**TINY_DATA), seed=3, out_dir=out)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
