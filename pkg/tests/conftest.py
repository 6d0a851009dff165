import numpy as np
import pytest

from cefusion.dataio import FeatureSequence, ModalityBundle
from cefusion.model import ModelConfig

SMALL_DIMS = {"vit": 6, "resnet": 4, "audio": 3, "text": 5}


def small_config(**overrides) -> ModelConfig:
    kw = dict(num_classes=4, d_model=5, fused_dim=6, window=1, dropout=0.0,
              modality_dims=tuple(SMALL_DIMS.items()))
    kw.update(overrides)
    return ModelConfig(**kw)


def random_bundle(rng, T, dims=SMALL_DIMS, label=0, video_id="v0", scale=1.0) -> ModalityBundle:
    seqs = {m: FeatureSequence(m, scale * rng.standard_normal((T, d))) for m, d in dims.items()}
    return ModalityBundle(video_id, **seqs, label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
