import pytest
import torch

from uacgan.models import LabelSpec
from uacgan.synthbench import MoGSpec, default_mog_config
from uacgan.trainer import SamplerDataset


@pytest.fixture
def mog_data():
    spec = MoGSpec()
    return SamplerDataset(spec.sampler(), spec.label_spec, (1,))


@pytest.fixture
def small_config():
    def make(kind="uac", **kw):
        base = dict(steps=5, batch_size=16, width=16, feature_dim=8)
        base.update(kw)
        return default_mog_config(kind, **base)
    return make


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True, warn_only=True)
    yield


def three_class():
    return LabelSpec(3)
