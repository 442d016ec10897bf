import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import Config
from core.diffusion.sde import SdeSpec
from core.models.score_net import ScoreNetConfig, init_model


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end protocols')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-protocol run, skipped unless --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_environment(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, 'LOG_FILE', str(tmp_path / 'logs' / 'rdm-ood.log'))
    monkeypatch.setattr(Config, 'ENABLE_PROGRESS', False)
    torch.set_num_threads(1)


@pytest.fixture
def vp():
    return SdeSpec(kind='vp')


@pytest.fixture
def subvp():
    return SdeSpec(kind='subvp')


@pytest.fixture
def ve():
    return SdeSpec(kind='ve')


def make_small_model(dim=2, sde=None, seed=0, num_classes=None, head_scale=0.1, dtype=torch.float64):
    """Small network with a nonzero head so the score is not identically zero"""
    config = ScoreNetConfig(
        input_dim=dim, hidden_dim=16, num_blocks=2, time_embed_dim=8, class_embed_dim=8,
        num_classes=num_classes, embed_seed=seed,
    )
    model = init_model(config, sde or SdeSpec(), seed=seed).to(dtype)
    generator = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        model.head.weight.copy_(head_scale * torch.randn(model.head.weight.shape, generator=generator, dtype=dtype))
    return model


@pytest.fixture
def small_model():
    return make_small_model()
