import numpy as np
import pytest

from advprobe.models import ArchDescriptor


def toy_arch(input_side=8, channels=3, num_classes=4, name="toy"):
    """Small conv/pool/dense net used across test modules."""
    return ArchDescriptor(
        name=name,
        input_side=input_side,
        channels=channels,
        num_classes=num_classes,
        layers=[
            {"kind": "conv", "filters": 4, "size": 3, "stride": 1},
            {"kind": "relu"},
            {"kind": "maxpool", "window": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": num_classes},
        ],
    )


def linear_arch(input_side=1, channels=2, num_classes=2, name="linear"):
    """Flatten + dense only: probabilities have a closed form."""
    return ArchDescriptor(
        name=name,
        input_side=input_side,
        channels=channels,
        num_classes=num_classes,
        layers=[{"kind": "flatten"}, {"kind": "dense", "units": num_classes}],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
