import struct

import numpy as np
import pytest

from guidedpert import modelio
from guidedpert.knn import FeatureIndex
from guidedpert.netcore import forward
from guidedpert.trainer import ARCHS, build_arch

from conftest import micro_classifier, micro_dense_net


def assert_same_net(a, b):
    assert a.input_shape == b.input_shape and a.num_classes == b.num_classes
    np.testing.assert_array_equal(a.channel_mean, b.channel_mean)
    assert [l.name for l in a.layers] == [l.name for l in b.layers]
    for la, lb in zip(a.layers, b.layers):
        assert la.kind == lb.kind and la.config() == lb.config()
        for k in la.params:
            assert la.params[k].tobytes() == lb.params[k].tobytes()


@pytest.mark.parametrize("make", [micro_dense_net, micro_classifier])
def test_roundtrip_bit_exact(make, tmp_path, rng):
    net = make(7)
    path = tmp_path / "m.gpn"
    modelio.save(path, net)
    back, index = modelio.load(path)
    assert index is None
    assert_same_net(net, back)
    x = rng.normal(size=(2,) + net.input_shape)
    assert forward(net, x)[0].tobytes() == forward(back, x)[0].tobytes()
    assert modelio.dumps(back) == path.read_bytes()


@pytest.mark.parametrize("arch", ARCHS)
def test_roundtrip_archs(arch):
    net = build_arch(arch, seed=3)
    back, _ = modelio.loads(modelio.dumps(net))
    assert_same_net(net, back)


def test_knn_section_roundtrip(rng):
    net = micro_classifier(1)
    idx = FeatureIndex(rng.normal(size=(5, 6)), [0, 3, 1, 1, 2], ["a", "b", "c", "dé", "e"], "r2")
    back, index = modelio.loads(modelio.dumps(net, idx))
    assert_same_net(net, back)
    assert index.feature_layer == "r2" and index.ids == idx.ids
    assert index.features.tobytes() == idx.features.tobytes()
    np.testing.assert_array_equal(index.labels, idx.labels)


def test_header_layout():
    net = micro_classifier(0)
    blob = modelio.dumps(net)
    assert blob[:4] == b"GPN1"
    assert struct.unpack_from("<I3I", blob, 4) == (3,) + net.input_shape
    assert struct.unpack_from("<I", blob, 20) == (net.num_classes,)


def test_unknown_section_is_skipped():
    net = micro_classifier(0)
    blob = modelio.dumps(net) + b"XTRA" + struct.pack("<Q", 3) + b"abc"
    back, index = modelio.loads(blob)
    assert index is None
    assert_same_net(net, back)


def test_bad_inputs():
    blob = modelio.dumps(micro_classifier(0))
    with pytest.raises(modelio.FormatError):
        modelio.loads(b"NOPE" + blob[4:])
    with pytest.raises(modelio.FormatError):
        modelio.loads(blob[:-5])
    with pytest.raises(modelio.FormatError):
        modelio.loads(blob + b"KN")
    with pytest.raises(modelio.FormatError):
        modelio.layer_from_parts("softmax", "s", [], {})
