"""GPN1 binary model container.

All integers and floats are little-endian.

    magic        4 bytes  b"GPN1"
    in_ndim      u32, then in_ndim x u32 input dims
    num_classes  u32
    n_mean       u32, then n_mean x f64 per-channel input means
    n_layers     u32, then per layer:
        kind     u8   index into KIND_TAGS
        name     u16 byte length + UTF-8 bytes
        n_cfg    u32, then n_cfg x i64 integer config (see Layer.config)
        n_params u32, then per parameter (in Layer.param_names order):
            ndim u8, ndim x u32 dims, prod(dims) x f64 values
    sections     zero or more optional sections until EOF:
        tag      4 bytes (b"KNN1" for a feature index)
        length   u64 payload byte count
        payload

KNN1 payload:
    layer name   u16 length + UTF-8
    n, dim       u64, u64
    features     n*dim x f64
    labels       n x i64
    ids          n x (u16 length + UTF-8)
"""
import io
import struct

import numpy as np

from . import netcore
from .netcore import BilinearUpsample, Conv2d, Flatten, Linear, MaxPool2d, Network, ReLU

MAGIC = b"GPN1"
KIND_TAGS = netcore.KINDS


class FormatError(ValueError):
    pass


def layer_from_parts(kind, name, cfg, params):
    cfg = [int(c) for c in cfg]
    if kind == "conv2d":
        return Conv2d(name, params["weight"], params["bias"], stride=cfg[0], padding=cfg[1])
    if kind == "maxpool2d":
        return MaxPool2d(name, window=cfg[0], stride=cfg[1])
    if kind == "relu":
        return ReLU(name)
    if kind == "linear":
        return Linear(name, params["weight"], params["bias"])
    if kind == "bilinear_upsample":
        return BilinearUpsample(name, cfg[0], cfg[1])
    if kind == "flatten":
        return Flatten(name)
    raise FormatError(f"unknown layer kind {kind!r}")


def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _read(f, n):
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated GPN1 file")
    return b


def _unpack(f, fmt):
    return struct.unpack(fmt, _read(f, struct.calcsize(fmt)))


def _read_str(f):
    (n,) = _unpack(f, "<H")
    return _read(f, n).decode("utf-8")


def _f64(f, count):
    return np.frombuffer(_read(f, 8 * count), dtype="<f8").astype(np.float64)


def encode_index(index):
    feats = np.ascontiguousarray(index.features, dtype="<f8")
    n, dim = feats.shape
    out = [_str(index.feature_layer), struct.pack("<QQ", n, dim), feats.tobytes(),
           np.ascontiguousarray(index.labels, dtype="<i8").tobytes()]
    out.extend(_str(str(i)) for i in index.ids)
    return b"".join(out)


def decode_index(payload):
    from .knn import FeatureIndex
    f = io.BytesIO(payload)
    layer = _read_str(f)
    n, dim = _unpack(f, "<QQ")
    feats = _f64(f, n * dim).reshape(n, dim)
    labels = np.frombuffer(_read(f, 8 * n), dtype="<i8").astype(np.int64)
    ids = [_read_str(f) for _ in range(n)]
    return FeatureIndex(feats, labels, ids, layer)


def dumps(net, index=None):
    out = [MAGIC]
    out.append(struct.pack("<I", len(net.input_shape)))
    out.append(struct.pack(f"<{len(net.input_shape)}I", *net.input_shape))
    out.append(struct.pack("<I", net.num_classes))
    mean = np.ascontiguousarray(net.channel_mean, dtype="<f8").reshape(-1)
    out.append(struct.pack("<I", mean.size) + mean.tobytes())
    out.append(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        out.append(struct.pack("<B", KIND_TAGS.index(layer.kind)))
        out.append(_str(layer.name))
        cfg = layer.config()
        out.append(struct.pack(f"<I{len(cfg)}q", len(cfg), *cfg))
        out.append(struct.pack("<I", len(layer.param_names)))
        for pname in layer.param_names:
            p = np.ascontiguousarray(layer.params[pname], dtype="<f8")
            out.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
            out.append(p.tobytes())
    if index is not None:
        payload = encode_index(index)
        out.append(b"KNN1" + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def loads(data):
    """Parse a GPN1 blob; returns ``(network, index_or_None)``."""
    f = io.BytesIO(data)
    if f.read(4) != MAGIC:
        raise FormatError("not a GPN1 file (bad magic)")
    (ndim,) = _unpack(f, "<I")
    input_shape = _unpack(f, f"<{ndim}I")
    (num_classes,) = _unpack(f, "<I")
    (n_mean,) = _unpack(f, "<I")
    mean = _f64(f, n_mean)
    (n_layers,) = _unpack(f, "<I")
    layers = []
    for _ in range(n_layers):
        (tag,) = _unpack(f, "<B")
        if tag >= len(KIND_TAGS):
            raise FormatError(f"bad layer kind tag {tag}")
        kind = KIND_TAGS[tag]
        name = _read_str(f)
        (n_cfg,) = _unpack(f, "<I")
        cfg = _unpack(f, f"<{n_cfg}q")
        (n_params,) = _unpack(f, "<I")
        params = {}
        pnames = {"conv2d": ("weight", "bias"), "linear": ("weight", "bias")}.get(kind, ())
        if n_params != len(pnames):
            raise FormatError(f"layer {name!r}: expected {len(pnames)} parameters, found {n_params}")
        for pname in pnames:
            (pdim,) = _unpack(f, "<B")
            shape = _unpack(f, f"<{pdim}I")
            params[pname] = _f64(f, int(np.prod(shape))).reshape(shape)
        layers.append(layer_from_parts(kind, name, cfg, params))
    net = Network(layers, input_shape, num_classes, mean)
    index = None
    while True:
        tag = f.read(4)
        if not tag:
            break
        if len(tag) != 4:
            raise FormatError("truncated section header")
        (length,) = _unpack(f, "<Q")
        payload = _read(f, length)
        if tag == b"KNN1":
            index = decode_index(payload)
    return net, index


def save(path, net, index=None):
    with open(path, "wb") as fh:
        fh.write(dumps(net, index))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
