import numpy as np
import pytest

from guidedpert.netcore import BilinearUpsample, Flatten, MaxPool2d, Network, ReLU
from guidedpert.trainer import conv, linear


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_dense_net(seed, c_in=2, size=9, num_classes=3):
    """Tiny labeling net touching conv (strided + padded), relu, pool, upsample."""
    r = np.random.default_rng(seed)
    layers = [
        conv(r, "c1", c_in, 3, 3, stride=1, padding=1), ReLU("r1"), MaxPool2d("p1", 2),
        conv(r, "c2", 3, 4, 3, stride=2, padding=1), ReLU("r2"),
        conv(r, "score", 4, num_classes, 1),
        BilinearUpsample("up", size, size),
    ]
    for l in layers:
        if "bias" in l.params:
            l.params["bias"][:] = r.normal(0, 0.1, size=l.params["bias"].shape)
    return Network(layers, (c_in, size, size), num_classes)


def micro_classifier(seed, c_in=1, size=8, num_classes=4):
    r = np.random.default_rng(seed)
    layers = [
        conv(r, "c1", c_in, 3, 3), MaxPool2d("p1", 2, 1), ReLU("r1"),
        Flatten("flat"), linear(r, "fc1", 3 * (size - 3) ** 2, 6), ReLU("r2"),
        linear(r, "fc2", 6, num_classes),
    ]
    for l in layers:
        if "bias" in l.params:
            l.params["bias"][:] = r.normal(0, 0.1, size=l.params["bias"].shape)
    return Network(layers, (c_in, size, size), num_classes)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0][1:])):
            terminalreporter.write_line(line)
