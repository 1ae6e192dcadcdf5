"""VGG-pattern network at configurable scale.

Weighted layers are numbered from 1 in forward order: the convolutions first
(grouped in blocks, each block followed by a 2x2 max-pool), then three fully
connected layers. With the default block layout ``(2, 2, 4, 4, 4)`` that is 16
convolutions plus 3 fc layers, i.e. layers 1..19.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"NNCK"
CHECKPOINT_VERSION = 1
ROLE_TAGS = {"weight": 0, "bias": 1}
ROLE_NAMES = {v: k for k, v in ROLE_TAGS.items()}


@dataclass(frozen=True)
class ScaleConfig:
    input_side: int = 64
    base_width: int = 8
    width_cap: int = 64
    block_convs: tuple = (2, 2, 4, 4, 4)
    fc_widths: tuple = (64, 64)

    def __post_init__(self):
        pools = len(self.block_convs)
        if self.input_side <= 0 or self.input_side % (2 ** pools):
            raise ConfigError(
                f"input_side={self.input_side} must be a positive multiple of {2 ** pools}")
        if len(self.fc_widths) != 2:
            raise ConfigError("fc_widths must hold the two hidden fc widths")

    @property
    def block_widths(self):
        return [min(self.base_width * 2 ** i, self.width_cap) for i in range(len(self.block_convs))]

    def to_dict(self):
        return {"input_side": self.input_side, "base_width": self.base_width,
                "width_cap": self.width_cap, "block_convs": list(self.block_convs),
                "fc_widths": list(self.fc_widths)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_side"], d["base_width"], d["width_cap"],
                   tuple(d["block_convs"]), tuple(d["fc_widths"]))


@dataclass(frozen=True)
class LayerInfo:
    index: int
    kind: str  # "conv" | "fc"
    fan_in: int
    fan_out: int
    pool_after: bool = False

    def shapes(self):
        if self.kind == "conv":
            return (self.fan_out, self.fan_in, 3, 3), (self.fan_out,)
        return (self.fan_out, self.fan_in), (self.fan_out,)


def layer_layout(scale, num_classes):
    layers = []
    idx = 1
    channels = 3
    for convs, width in zip(scale.block_convs, scale.block_widths):
        for i in range(convs):
            layers.append(LayerInfo(idx, "conv", channels, width, pool_after=(i == convs - 1)))
            channels = width
            idx += 1
    side = scale.input_side // 2 ** len(scale.block_convs)
    dims = [channels * side * side, *scale.fc_widths, num_classes]
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layers.append(LayerInfo(idx, "fc", d_in, d_out))
        idx += 1
    return layers


@dataclass
class NetworkSpec:
    scale: ScaleConfig
    class_names: list
    params: dict  # (layer, role) -> array
    mean_rgb: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=T.DTYPE))
    lr_map: dict | None = None

    @property
    def layers(self):
        return layer_layout(self.scale, len(self.class_names))

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def num_classes(self):
        return len(self.class_names)

    def copy(self):
        return NetworkSpec(self.scale, list(self.class_names),
                           {k: v.copy() for k, v in self.params.items()},
                           self.mean_rgb.copy(),
                           dict(self.lr_map) if self.lr_map is not None else None)

    def astype(self, dtype):
        net = self.copy()
        net.params = {k: v.astype(dtype) for k, v in net.params.items()}
        return net

    def parameter_count(self):
        return sum(v.size for v in self.params.values())


def init_layer(info, seed, dtype=T.DTYPE, last=False, stream=0):
    """He-normal weights (variance 2/fan_in; 1/fan_in for the output layer), zero bias.

    Each layer draws from its own generator keyed by ``(seed, layer index,
    stream)``; builds use stream 0 and policy resets stream 1, so a reset never
    hands back the weights a same-seed build started from.
    """
    rng = np.random.default_rng([seed, info.index, stream])
    wshape, bshape = info.shapes()
    fan_in = info.fan_in * (9 if info.kind == "conv" else 1)
    std = np.sqrt((1.0 if last else 2.0) / fan_in)
    w = (rng.standard_normal(wshape) * std).astype(dtype)
    return w, np.zeros(bshape, dtype=dtype)


def build_network(scale=None, num_classes=None, class_names=None, seed=0):
    scale = scale or ScaleConfig()
    if class_names is None:
        if num_classes is None:
            raise ConfigError("need num_classes or class_names")
        class_names = [f"class{i}" for i in range(num_classes)]
    class_names = list(class_names)
    if num_classes is not None and num_classes != len(class_names):
        raise ConfigError(f"num_classes={num_classes} but {len(class_names)} class names given")
    if len(class_names) < 2:
        raise ConfigError("a classifier needs at least 2 classes")
    layers = layer_layout(scale, len(class_names))
    params = {}
    for info in layers:
        w, b = init_layer(info, seed, last=info.index == len(layers))
        params[(info.index, "weight")] = w
        params[(info.index, "bias")] = b
    return NetworkSpec(scale, class_names, params)


# -- forward / backward ------------------------------------------------------

def forward(net, images, train=False, rng=None, dropout_p=0.5):
    """Run a batch ``[N, 3, S, S]`` (or one image ``[3, S, S]``) through the net.

    Returns ``(logits, cache)``. ``cache["fc_out"][i]`` is the post-ReLU output
    of fc layer ``i`` (0-based among the fc layers, last one excluded).
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    s = net.scale.input_side
    if x.ndim != 4 or x.shape[1:] != (3, s, s):
        raise ShapeError(f"expected images of shape [3, {s}, {s}], got {x.shape[1:]}")
    if train and dropout_p and rng is None:
        raise ConfigError("train mode with dropout needs an rng")
    x = np.ascontiguousarray(x.astype(next(iter(net.params.values())).dtype).transpose(1, 0, 2, 3))
    cache = {"conv": [], "fc": [], "fc_out": []}
    layers = net.layers
    for info in layers:
        w = net.params[(info.index, "weight")]
        b = net.params[(info.index, "bias")]
        if info.kind == "conv":
            out, cols = T.conv2d_forward(x, w, b)
            out = T.relu(out)
            entry = {"cols": cols, "shape": x.shape, "out": out, "arg": None}
            x = out
            if info.pool_after:
                x, entry["arg"] = T.maxpool2_forward(x)
            cache["conv"].append(entry)
            continue
        if x.ndim == 4:
            cache["flat_shape"] = x.shape
            x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        inp = x
        z = T.linear(x, w, b)
        if info.index == layers[-1].index:
            cache["fc"].append({"in": inp, "out": None, "mask": None})
            x = z
            break
        a = T.relu(z)
        cache["fc_out"].append(a)
        x, mask = T.dropout(a, dropout_p, train, rng)
        cache["fc"].append({"in": inp, "out": a, "mask": mask})
    logits = x[0] if single else x
    return logits, cache


def backward(net, cache, dlogits):
    grads = {}
    layers = net.layers
    fc_layers = [l for l in layers if l.kind == "fc"]
    conv_layers = [l for l in layers if l.kind == "conv"]
    d = dlogits
    for info, entry in reversed(list(zip(fc_layers, cache["fc"]))):
        if entry["out"] is not None:
            if entry["mask"] is not None:
                d = d * entry["mask"]
            d = T.relu_backward(d, entry["out"])
        w = net.params[(info.index, "weight")]
        grads[(info.index, "weight")] = d.T @ entry["in"]
        grads[(info.index, "bias")] = d.sum(axis=0)
        d = d @ w
    c, n, h, w = cache["flat_shape"]
    d = d.reshape(n, c, h, w).transpose(1, 0, 2, 3)
    for info, entry in reversed(list(zip(conv_layers, cache["conv"]))):
        if entry["arg"] is not None:
            d = T.maxpool2_backward(d, entry["arg"])
        d = T.relu_backward(d, entry["out"])
        w = net.params[(info.index, "weight")]
        d, gw, gb = T.conv2d_backward(d, entry["cols"], entry["shape"], w,
                                      need_dx=info.index != conv_layers[0].index)
        grads[(info.index, "weight")] = gw
        grads[(info.index, "bias")] = gb
    return grads


def backprop(net, batch_inputs, batch_labels, train=True, rng=None, dropout_p=0.5):
    """Mean softmax cross-entropy over the batch and its exact gradients.

    ``batch_labels`` are integer class indices or one-hot rows. Weight decay is
    not part of the returned loss; ``sgd_step`` applies it.
    """
    x = np.asarray(batch_inputs)
    labels = np.asarray(batch_labels)
    if labels.ndim == 1:
        labels = T.one_hot(labels, net.num_classes)
    if labels.shape != (x.shape[0], net.num_classes):
        raise ShapeError(f"labels {labels.shape} do not match batch of {x.shape[0]} x {net.num_classes}")
    logits, cache = forward(net, x, train=train, rng=rng, dropout_p=dropout_p)
    probs = T.softmax(logits)
    loss = T.cross_entropy(probs, labels)
    dlogits = (probs - labels.astype(probs.dtype)) / probs.dtype.type(x.shape[0])
    return loss, backward(net, cache, dlogits)


def predict_proba(net, images, batch_size=64):
    x = np.asarray(images)
    out = []
    for i in range(0, len(x), batch_size):
        logits, _ = forward(net, x[i:i + batch_size], train=False)
        out.append(T.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


def rank_classes(scores):
    """Class indices by descending score; ties keep ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def predict_topk(net, image, k):
    """Top-k ``(class_name, probability)`` pairs for one preprocessed image."""
    if not 1 <= k <= net.num_classes:
        raise ConfigError(f"k must be in [1, {net.num_classes}], got {k}")
    logits, _ = forward(net, image, train=False)
    probs = T.softmax(np.asarray(logits, dtype=np.float64))
    order = rank_classes(probs)[:k]
    return [(net.class_names[i], float(probs[i])) for i in order]


# -- neural codes ------------------------------------------------------------

@dataclass
class NeuralCodes:
    matrix: np.ndarray
    ids: list

    def __post_init__(self):
        if len(self.matrix) != len(self.ids):
            raise ShapeError(f"{len(self.matrix)} code rows for {len(self.ids)} ids")

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for id_, row in zip(self.ids, self.matrix):
                fh.write(id_ + "\t" + "\t".join(f"{v:.9g}" for v in row) + "\n")

    @classmethod
    def read_tsv(cls, path):
        ids, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 2:
                    raise FormatError(f"{path}:{lineno}: expected id and values")
                ids.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
        if len({len(r) for r in rows}) > 1:
            raise FormatError(f"{path}: rows of unequal width")
        return cls(np.asarray(rows, dtype=np.float64).reshape(len(rows), -1), ids)


def codes_from_images(net, images, batch_size=64):
    """Post-ReLU fc2 activations in eval mode, one row per image."""
    x = np.asarray(images)
    rows = []
    for i in range(0, len(x), batch_size):
        _, cache = forward(net, x[i:i + batch_size], train=False)
        rows.append(cache["fc_out"][-1])
    width = net.scale.fc_widths[-1]
    return np.concatenate(rows) if rows else np.zeros((0, width), dtype=T.DTYPE)


def extract_neural_codes(net, manifest, records=None, root=None):
    """Neural codes for manifest records (all records when ``records`` is None)."""
    from .dataset import load_images

    records = manifest.records if records is None else records
    images = load_images(manifest, records, net.mean_rgb, net.scale.input_side, root=root)
    return NeuralCodes(codes_from_images(net, images), [r.image_id for r in records])


# -- checkpoints -------------------------------------------------------------

def _metadata(net):
    return {
        "scale": net.scale.to_dict(),
        "class_names": list(net.class_names),
        "mean_rgb": [float(v) for v in np.asarray(net.mean_rgb, dtype=np.float32)],
        "num_weighted_layers": len(net.layers),
    }


def checkpoint_bytes(net):
    buf = io.BytesIO()
    meta = json.dumps(_metadata(net), sort_keys=True).encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
    buf.write(meta)
    for info in net.layers:
        for role in ("weight", "bias"):
            arr = np.ascontiguousarray(net.params[(info.index, role)], dtype="<f4")
            buf.write(struct.pack("<IBB", info.index, ROLE_TAGS[role], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(net, path):
    Path(path).write_bytes(checkpoint_bytes(net))


def read_checkpoint_header(data):
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if 12 + meta_len > len(data):
        raise FormatError("truncated checkpoint metadata")
    try:
        meta = json.loads(data[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from None
    return meta, 12 + meta_len


def load_checkpoint(path):
    data = Path(path).read_bytes()
    meta, pos = read_checkpoint_header(data)
    try:
        scale = ScaleConfig.from_dict(meta["scale"])
        class_names = meta["class_names"]
        mean_rgb = np.asarray(meta["mean_rgb"], dtype=T.DTYPE)
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"inconsistent checkpoint metadata: {exc}") from None
    layers = layer_layout(scale, len(class_names))
    if meta.get("num_weighted_layers") != len(layers):
        raise FormatError("header layer count disagrees with the scale config")
    params = {}
    for info in layers:
        for role, shape in zip(("weight", "bias"), info.shapes()):
            if pos + 6 > len(data):
                raise FormatError(f"truncated checkpoint at layer {info.index}")
            index, tag, rank = struct.unpack_from("<IBB", data, pos)
            pos += 6
            if index != info.index or ROLE_NAMES.get(tag) != role or rank != len(shape):
                raise FormatError(f"unexpected tensor header at layer {info.index} {role}")
            if pos + 4 * rank > len(data):
                raise FormatError(f"truncated checkpoint at layer {info.index}")
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            if tuple(dims) != shape:
                raise FormatError(f"layer {info.index} {role} has dims {dims}, expected {shape}")
            nbytes = 4 * int(np.prod(dims))
            if pos + nbytes > len(data):
                raise FormatError(f"truncated payload at layer {info.index}")
            params[(index, role)] = np.frombuffer(data, "<f4", int(np.prod(dims)), pos).reshape(dims).astype(T.DTYPE)
            pos += nbytes
    if pos != len(data):
        raise FormatError("trailing bytes after the last tensor")
    return NetworkSpec(scale, list(class_names), params, mean_rgb)
