import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from vlgrasp.adapter import AdapterConfig  # noqa: E402
from vlgrasp.backbone import BackboneConfig  # noqa: E402
from vlgrasp.datasynth import SceneSpec, generate_dataset  # noqa: E402
from vlgrasp.decoder import DecoderConfig  # noqa: E402
from vlgrasp.heads import HeadConfig  # noqa: E402
from vlgrasp.model import ModelConfig  # noqa: E402

ACCEPTANCE_LINES = []


def tiny_model_config(task="res", use_depth=False, **adapter):
    """A small but complete model for fast unit tests (64x64 input)."""
    return ModelConfig(
        task=task,
        backbone=BackboneConfig(stage_channels=(8, 12, 16, 16), text_channels=16, text_heads=2, sentence_dim=16),
        adapter=AdapterConfig(dim=8, heads=2, use_depth=use_depth, **adapter),
        decoder=DecoderConfig(dim=16, heads=2, layers=1, ffn_ratio=2),
        heads=HeadConfig(proj_dim=8, fcn_hidden=8),
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config


@pytest.fixture(scope="session")
def small_samples():
    return generate_dataset(SceneSpec(num_objects=4), 8, seed=3)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])
