import numpy as np
import pytest
import torch
from torch import nn

from imc_io import CANONICAL_CHANNELS, ChannelStack, Patch
from synthgen import TissueParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_tissue():
    return TissueParams(image_size=96, fiber_count=8, mean_fiber_diameter=24.0, noise_sd=20.0)


@pytest.fixture
def make_stack(rng):
    def _make(subject="S01", label="control", size=(16, 16), names=CANONICAL_CHANNELS):
        channels = {n: rng.integers(0, 4000, size=size).astype(np.uint16) for n in names}
        return ChannelStack(subject_id=subject, class_label=label, channels=channels)

    return _make


def make_patch(data, label="control", subject="S01", origin=(0, 0), names=None):
    data = np.asarray(data, dtype=np.float32)
    names = names or [f"ch{k}" for k in range(data.shape[2])]
    return Patch(source_subject=subject, class_label=label, origin=origin, data=data, channel_names=names)


def dense_net(*weights, relu_between=True):
    """Bias-free stack of dense layers with the given (out x in) weight matrices."""
    layers = []
    for k, w in enumerate(weights):
        w = torch.as_tensor(np.asarray(w, dtype=np.float32))
        layer = nn.Linear(w.shape[1], w.shape[0], bias=False)
        with torch.no_grad():
            layer.weight.copy_(w)
        layers.append(layer)
        if relu_between and k < len(weights) - 1:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def tiny_cnn(channels=1, pool="avg", bias=False, seed=0):
    torch.manual_seed(seed)
    pool_layer = nn.AvgPool2d(2) if pool == "avg" else nn.MaxPool2d(2)
    return nn.Sequential(
        nn.Conv2d(channels, 4, 3, padding=1, bias=bias),
        nn.ReLU(),
        pool_layer,
        nn.Conv2d(4, 6, 3, padding=1, bias=bias),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(6, 2, bias=bias),
    ).eval()
