"""Adaptive layer-based optimization: restart chosen layers, give every layer
its own learning rate, and fine-tune on the target domain."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .network import backprop, build_network, init_layer, predict_proba

DEFAULT_RESET = frozenset(range(1, 11)) | frozenset(range(17, 20))
DEFAULT_LR_RESET = 1e-2
DEFAULT_LR_KEEP = 1e-4
DEFAULT_POLICY_TEXT = "reset=1-10,17-19; lr.reset=1e-2; lr.keep=1e-4"


@dataclass(frozen=True)
class AdaptivePolicy:
    reset_layers: frozenset
    lr_map: dict

    def check_covers(self, num_layers):
        missing = [l for l in range(1, num_layers + 1) if l not in self.lr_map]
        if missing:
            raise ConfigError(f"learning-rate map misses layers {missing}")
        bad = [l for l in self.reset_layers if not 1 <= l <= num_layers]
        if bad:
            raise ConfigError(f"reset layers {bad} outside 1..{num_layers}")

    def to_text(self):
        groups = {}
        for layer in sorted(self.lr_map):
            groups.setdefault(self.lr_map[layer], []).append(layer)
        parts = []
        if self.reset_layers:
            parts.append("reset=" + _format_ranges(sorted(self.reset_layers)))
        for lr, layers in groups.items():
            parts.append(f"lr.{_format_ranges(layers)}={lr!r}")
        return "; ".join(parts)


def default_policy(num_layers=19):
    if num_layers != 19:
        raise ConfigError("the default policy is defined for 19-layer networks; pass an explicit one")
    lr = {l: DEFAULT_LR_RESET if l in DEFAULT_RESET else DEFAULT_LR_KEEP for l in range(1, 20)}
    return AdaptivePolicy(DEFAULT_RESET, lr)


def uniform_policy(num_layers, lr):
    return AdaptivePolicy(frozenset(), {l: lr for l in range(1, num_layers + 1)})


def _parse_ranges(text):
    layers = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if not m:
            raise ConfigError(f"bad layer range {part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2) or lo)
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad layer range {part!r}")
        layers.update(range(lo, hi + 1))
    return layers


def _format_ranges(layers):
    out = []
    start = prev = None
    for l in layers:
        if start is None:
            start = prev = l
        elif l == prev + 1:
            prev = l
        else:
            out.append(f"{start}-{prev}" if prev > start else str(start))
            start = prev = l
    if start is not None:
        out.append(f"{start}-{prev}" if prev > start else str(start))
    return ",".join(out)


def parse_policy(text, num_layers=19):
    """Parse ``reset=1-10,17-19; lr.reset=1e-2; lr.keep=1e-4``.

    ``lr.reset`` applies to reset layers and ``lr.keep`` to the others;
    ``lr.<ranges>=<value>`` entries override both, in order of appearance.
    """
    reset = set()
    lr_reset = lr_keep = None
    overrides = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"policy entry {item!r} is not key=value")
        if key == "reset":
            reset = _parse_ranges(value)
            continue
        if not key.startswith("lr."):
            raise ConfigError(f"unknown policy key {key!r}")
        try:
            lr = float(value)
        except ValueError:
            raise ConfigError(f"learning rate {value!r} is not a number") from None
        if lr < 0 or not math.isfinite(lr):
            raise ConfigError(f"learning rate must be finite and non-negative, got {lr}")
        target = key[3:]
        if target == "reset":
            lr_reset = lr
        elif target == "keep":
            lr_keep = lr
        else:
            overrides.append((_parse_ranges(target), lr))
    lr_map = {}
    for layer in range(1, num_layers + 1):
        lr = lr_reset if layer in reset else lr_keep
        if lr is not None:
            lr_map[layer] = lr
    for layers, lr in overrides:
        for layer in layers:
            lr_map[layer] = lr
    policy = AdaptivePolicy(frozenset(reset), lr_map)
    policy.check_covers(num_layers)
    return policy


def apply_policy(net, policy, seed, class_names=None):
    """Copy of ``net`` with the policy's reset layers re-initialized.

    Layers outside the reset set keep their bytes. When ``class_names`` differs
    from the net's, the classifier layer must be in the reset set and is
    rebuilt at the new width.
    """
    policy.check_covers(net.num_layers)
    out = net.copy()
    if class_names is not None and list(class_names) != list(net.class_names):
        if net.num_layers not in policy.reset_layers:
            raise ConfigError("changing the class set requires resetting the classifier layer")
        out.class_names = list(class_names)
    layers = out.layers
    last = layers[-1].index
    for info in layers:
        if info.index in policy.reset_layers:
            w, b = init_layer(info, seed, dtype=net.params[(info.index, "weight")].dtype,
                              last=info.index == last, stream=1)
            out.params[(info.index, "weight")] = w
            out.params[(info.index, "bias")] = b
    out.lr_map = dict(policy.lr_map)
    return out


# -- training ----------------------------------------------------------------

@dataclass
class FinetuneReport:
    train_loss: list = field(default_factory=list)  # per epoch, epoch 1 first
    val_top1: list = field(default_factory=list)    # index 0 is before any update
    epochs_run: int = 0
    stop_reason: str = "max_epochs"
    best_epoch: int = 0

    def to_tsv(self):
        lines = ["epoch\ttrain_loss\tval_top1"]
        for epoch, acc in enumerate(self.val_top1):
            loss = self.train_loss[epoch - 1] if epoch else float("nan")
            lines.append(f"{epoch}\t{loss:.6f}\t{acc:.2f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text):
        rows = [l.split("\t") for l in text.strip().split("\n")[1:]]
        rep = cls()
        for epoch, loss, acc in rows:
            if int(epoch):
                rep.train_loss.append(float(loss))
            rep.val_top1.append(float(acc))
        rep.epochs_run = len(rep.train_loss)
        return rep


def top1_percent(net, images, labels):
    if len(images) == 0:
        raise DataError("cannot score an empty split")
    pred = predict_proba(net, images).argmax(axis=1)
    return 100.0 * float(np.mean(pred == np.asarray(labels)))


def _check_split(name, split, num_classes):
    images, labels = split
    if len(images) == 0:
        raise DataError(f"{name} split is empty")
    if len(images) != len(labels):
        raise DataError(f"{name} split has {len(images)} images but {len(labels)} labels")
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"{name} split has labels outside the network's {num_classes} classes")
    return np.asarray(images), labels


def finetune(net, train, val, cfg, policy=None, log=None):
    """Mini-batch SGD with per-layer learning rates and early stopping.

    ``train`` and ``val`` are ``(images, label_indices)`` pairs. ``policy``
    defaults to the net's attached ``lr_map``. Stops once validation top-1 has
    not improved for ``cfg.patience`` epochs; returns a copy of the best net
    (earliest epoch on ties) and the report.
    """
    lr_map = policy.lr_map if policy is not None else net.lr_map
    if lr_map is None:
        raise ConfigError("finetune needs a policy or a net with an lr_map")
    AdaptivePolicy(frozenset(), lr_map).check_covers(net.num_layers)
    x_tr, y_tr = _check_split("train", train, net.num_classes)
    x_val, y_val = _check_split("val", val, net.num_classes)

    net = net.copy()
    net.lr_map = dict(lr_map)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    velocity = {}
    report = FinetuneReport()
    best_acc = top1_percent(net, x_val, y_val)
    report.val_top1.append(best_acc)
    best = net.copy()
    stale = 0
    n = len(x_tr)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backprop(net, x_tr[idx], y_tr[idx], train=True, rng=rng,
                                   dropout_p=cfg.dropout_p)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            T.sgd_step(net.params, grads, lr_map, cfg, velocity)
            losses.append(loss * len(idx))
        report.train_loss.append(sum(losses) / n)
        acc = top1_percent(net, x_val, y_val)
        report.val_top1.append(acc)
        report.epochs_run = epoch
        if log:
            log(f"epoch {epoch}: loss {report.train_loss[-1]:.4f} val top-1 {acc:.2f}")
        if acc > best_acc:
            best_acc, best, stale = acc, net.copy(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stop_reason = "converged"
                break
    return best, report


def train_from_scratch(scale, train, val, cfg, class_names, mean_rgb=None, log=None):
    """Fresh network trained with a uniform learning rate of ``cfg.base_lr``."""
    net = build_network(scale, class_names=class_names, seed=cfg.seed)
    if mean_rgb is not None:
        net.mean_rgb = np.asarray(mean_rgb, dtype=T.DTYPE)
    return finetune(net, train, val, cfg, uniform_policy(net.num_layers, cfg.base_lr), log=log)
