import numpy as np
import pytest

from sciqa.data import load_manifest, normalize_scores, write_synthetic_corpus
from sciqa.model import ModelConfig, QualityNet


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 references x 3 types x 3 levels of 96x96 synthetic pages."""
    out = tmp_path_factory.mktemp("corpus")
    write_synthetic_corpus(out, refs=4, types=("GN", "GB", "CC"), levels=3, size=96, seed=3)
    return normalize_scores(load_manifest(out / "manifest.csv"))


@pytest.fixture
def tiny_config(small_corpus):
    return ModelConfig(stage_channels=(4, 4, 4, 4, 4), feature_dim=16,
                       class_names=small_corpus.distortion_types)


@pytest.fixture
def tiny_model(tiny_config):
    return QualityNet(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
