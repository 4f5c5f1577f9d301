from __future__ import annotations

import os
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from dentage import synth
from dentage.backbones import BackboneSpec, FeatureExtractor, count_trainable_parameters
from dentage.regressor import RegressionModel

SLOW = os.environ.get("DENTAGE_SLOW", "0") not in ("", "0")


def pytest_configure(config):
    config.addinivalue_line("markers", "opt_in: only runs with DENTAGE_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if SLOW:
        return
    skip = pytest.mark.skip(reason="set DENTAGE_SLOW=1 to run")
    for item in items:
        if "opt_in" in item.keywords:
            item.add_marker(skip)


def toy_model(channels=2, size=4, seed=0, kernel=1, dtype=torch.float32) -> RegressionModel:
    """RegressionModel over a single conv layer; small enough to check by hand."""
    torch.manual_seed(seed)
    conv = nn.Conv2d(3, channels, kernel, padding=kernel // 2)
    module = nn.Sequential(OrderedDict(conv=conv))
    spec = BackboneSpec("InceptionV3", pretrained=False, input_shape=(size, size, 3))
    ext = FeatureExtractor(spec, module, (size, size, channels), count_trainable_parameters(module))
    return RegressionModel(ext).to(dtype)


@pytest.fixture(scope="session")
def tiny_synth_dir(tmp_path_factory) -> Path:
    """40 synthetic radiographs at 96x96 with manifest.csv."""
    out = tmp_path_factory.mktemp("synth")
    synth.generate(synth.SynthConfig(count=40, seed=3, image_size=(96, 96)), out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
