"""Layer primitives for the VGG-pattern network, the softmax cross-entropy
loss and SGD with momentum.

Tensors are plain ``numpy`` arrays. Training runs in float32; every op keeps
the dtype of its inputs, so a float64 copy of a network gives the
verification mode used by gradient checks.

Batched ops take a leading batch axis (``[N, C, H, W]`` for feature maps,
``[N, D]`` for vectors). ``conv2d``, ``maxpool2`` and ``linear`` also accept a
single unbatched sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

DTYPE = np.float32
LOG_CLAMP = 1e-12

# (layer index, "weight" | "bias") -> array
GradientSet = dict


@dataclass
class TrainConfig:
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout_p: float = 0.5
    base_lr: float = 1e-2
    max_epochs: int = 40
    seed: int = 0
    patience: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be non-negative, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")


def _batched(x, rank):
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected a rank-{rank - 1} sample or rank-{rank} batch, got shape {x.shape}")
    return x, False


# -- convolution -------------------------------------------------------------
# The batched kernels work channel-major ([C, N, H, W]) so that every copy runs
# along contiguous image rows and conv outputs need no transpose. Weights keep
# the [F, C, 3, 3] layout and are flattened to [F, 9*C] in (ky, kx, c) order.

def _flat_weight(weight):
    f, c = weight.shape[:2]
    return weight.transpose(0, 2, 3, 1).reshape(f, 9 * c)


def _im2col(x):
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((9, c, n, h, w), dtype=x.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[k] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(9 * c, n * h * w)


def conv2d_forward(x, weight, bias):
    """3x3 same-padded stride-1 convolution of a channel-major batch.

    Returns the ``[F, N, H, W]`` output and the im2col matrix, which
    ``conv2d_backward`` reuses.
    """
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv weight must be [F, C, 3, 3], got {weight.shape}")
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [C, N, H, W], got {x.shape}")
    f, c = weight.shape[:2]
    if x.shape[0] != c:
        raise ShapeError(f"conv input has {x.shape[0]} channels but weight expects C={c}")
    if bias.shape != (f,):
        raise ShapeError(f"conv bias must be [{f}], got {bias.shape}")
    _, n, h, w = x.shape
    cols = _im2col(x)
    out = _flat_weight(weight) @ cols
    out += bias[:, None]
    return out.reshape(f, n, h, w), cols


def conv2d_backward(dout, cols, x_shape, weight, need_dx=True):
    """Gradients ``(dx, dweight, dbias)``; ``dx`` is None when not requested."""
    c, n, h, w = x_shape
    f = weight.shape[0]
    dmat = dout.reshape(f, -1)
    dweight = (dmat @ cols.T).reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
    dbias = dmat.sum(axis=1)
    dweight = np.ascontiguousarray(dweight)
    if not need_dx:
        return None, dweight, dbias
    dcols = (_flat_weight(weight).T @ dmat).reshape(9, c, n, h, w)
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dout.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, :, i:i + h, j:j + w] += dcols[k]
    return dxp[:, :, 1:-1, 1:-1], dweight, dbias


def conv2d(x, weight, bias):
    """Convolve ``[C, H, W]`` (or ``[N, C, H, W]``) with a ``[F, C, 3, 3]`` kernel, padding 1."""
    xb, single = _batched(x, 4)
    weight = np.asarray(weight)
    if weight.ndim == 4 and xb.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv input has {xb.shape[1]} channels but weight expects C={weight.shape[1]}")
    out, _ = conv2d_forward(xb.transpose(1, 0, 2, 3), weight, np.asarray(bias))
    out = out.transpose(1, 0, 2, 3)
    return out[0] if single else out


# -- pooling -----------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 stride-2 max pooling over the last two axes; returns ``(out, argmax)``."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    corners = [x[..., i::2, j::2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    arg = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        arg[corners[k] == out] = k
    return out, arg


def maxpool2_backward(dout, arg):
    h2, w2 = dout.shape[-2:]
    dx = np.zeros((*dout.shape[:-2], 2 * h2, 2 * w2), dtype=dout.dtype)
    zero = dout.dtype.type(0)
    for k in range(4):
        i, j = divmod(k, 2)
        dx[..., i::2, j::2] = np.where(arg == k, dout, zero)
    return dx


def maxpool2(x):
    """2x2 stride-2 max pooling of ``[C, H, W]`` (or ``[N, C, H, W]``).

    Returns ``(pooled, argmax)`` where ``argmax`` holds the row-major offset
    (0..3) of the winner inside each window; ``divmod(offset, 2)`` gives
    ``(row, col)``. Ties go to the first offset.
    """
    return maxpool2_forward(np.asarray(x))


# -- pointwise ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, out):
    return np.where(out > 0, dout, dout.dtype.type(0))


def linear(x, weight, bias):
    """``y = W x + b`` for ``x`` of shape ``[D_in]`` or ``[N, D_in]``."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input has D_in={x.shape[-1]} but weight is {weight.shape}")
    if np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"linear bias must be [{weight.shape[0]}], got {np.shape(bias)}")
    return x @ weight.T + bias


def softmax(logits):
    """Softmax along the last axis, shifted by the max for stability."""
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dropout(x, p, train, rng):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None in eval mode.

    ``rng`` is a ``numpy.random.Generator``; the same generator state yields the
    same mask.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


# -- loss --------------------------------------------------------------------

def cross_entropy(probs, labels):
    """Mean over the batch of ``-sum_k L_k log S_k`` (S clamped at 1e-12)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if probs.shape != labels.shape:
        raise ShapeError(f"probs {probs.shape} and labels {labels.shape} differ")
    if probs.shape[0] == 0:
        raise ShapeError("cross_entropy of an empty batch")
    per_sample = -(labels * np.log(np.maximum(probs, LOG_CLAMP))).sum(axis=1)
    return float(max(per_sample.mean(), 0.0))


def one_hot(indices, num_classes, dtype=DTYPE):
    out = np.zeros((len(indices), num_classes), dtype=dtype)
    out[np.arange(len(indices)), indices] = 1
    return out


# -- optimizer ---------------------------------------------------------------

def sgd_step(params, grads, lr_by_layer, cfg, velocity):
    """One momentum SGD update, in place.

    ``v <- momentum * v + grad + weight_decay * param`` (decay on weights only),
    then ``param <- param - lr[layer] * v``. Missing velocity entries start at
    zero. Returns ``(params, velocity)``.
    """
    for key, g in grads.items():
        layer, role = key
        if layer not in lr_by_layer:
            raise ConfigError(f"no learning rate for layer {layer}")
        p = params[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(key)
        if v is None:
            v = np.zeros_like(p)
        v *= p.dtype.type(cfg.momentum)
        v += g
        if role == "weight" and cfg.weight_decay:
            v += p.dtype.type(cfg.weight_decay) * p
        velocity[key] = v
        lr = lr_by_layer[layer]
        if lr:
            p -= p.dtype.type(lr) * v
    return params, velocity
