import logging
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from hybridsynth.conditioning import GradientEdge, LuminanceDepth  # noqa: E402
from hybridsynth.core import ConditionTriplet, Role, unit_plane  # noqa: E402
from hybridsynth.ingest import Sample, load_samples, scan  # noqa: E402
from hybridsynth.toydata import bundled_toy_root  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")
torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


@pytest.fixture(scope="session")
def toy_root() -> Path:
    return bundled_toy_root()


@pytest.fixture(scope="session")
def toy_index(toy_root):
    return scan(toy_root, "mvtec_layout")


@pytest.fixture(scope="session")
def toy_samples(toy_index):
    return load_samples(toy_index.refs(), GradientEdge(), LuminanceDepth(), 64)


@pytest.fixture(scope="session")
def toy_train(toy_samples):
    return [s for s in toy_samples if s.id.split("/")[1] == "train"]


def make_triplet(h=16, w=16, seed=0, depth=None, edge=None) -> ConditionTriplet:
    rng = np.random.default_rng(seed)
    d = rng.random((h, w, 1)) if depth is None else np.full((h, w, 1), depth)
    e = rng.random((h, w, 1)) if edge is None else np.full((h, w, 1), edge)
    return ConditionTriplet(unit_plane(rng.random((h, w, 3)), Role.COLOR), unit_plane(d, Role.DEPTH),
                            unit_plane(e, Role.EDGE))


def make_sample(sample_id="cat/train/good/000", h=16, w=16, seed=0, label="good", **kw) -> Sample:
    return Sample(sample_id, make_triplet(h, w, seed, **kw), label, "cat")


@pytest.fixture
def quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    return caplog


@pytest.fixture(scope="session")
def overfit_checkpoint(toy_train):
    """Desk generator trained for 200 steps on eight 64x64 toy images."""
    from hybridsynth.core import GenerationMode
    from hybridsynth.network import GeneratorConfig
    from hybridsynth.training import TrainConfig, train

    return train(toy_train[:8], GenerationMode.RGB_LEVEL, GeneratorConfig.desk(64), TrainConfig.desk(200, 4, seed=0))
