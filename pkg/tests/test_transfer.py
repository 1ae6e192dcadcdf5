import numpy as np
import pytest

from illutransfer import network as N
from illutransfer.errors import ConfigError, DataError
from illutransfer.tensor import TrainConfig
from illutransfer.transfer import (AdaptivePolicy, FinetuneReport, apply_policy, default_policy, finetune,
                                   parse_policy, train_from_scratch, uniform_policy)

DEFAULT_TEXT = "reset=1-10,17-19; lr.reset=1e-2; lr.keep=1e-4"
SMALL = N.ScaleConfig(input_side=32, base_width=4, width_cap=16, fc_widths=(16, 16))


def params_equal(a, b, layer):
    return all(np.array_equal(a.params[(layer, r)], b.params[(layer, r)]) for r in ("weight", "bias"))


def random_split(n, num_classes, side, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 3, side, side)).astype(np.float32), rng.integers(0, num_classes, n)


def learnable_split(n, side, seed):
    """Three classes, each brightening its own color channel."""
    x, y = random_split(n, 3, side, seed)
    x[np.arange(n), y] += 2.0
    return x, y


# -- policy ------------------------------------------------------------------

def test_default_policy_layers_and_rates():
    pol = default_policy()
    assert pol.reset_layers == frozenset(range(1, 11)) | {17, 18, 19}
    assert all(pol.lr_map[l] == 1e-2 for l in pol.reset_layers)
    assert all(pol.lr_map[l] == 1e-4 for l in range(11, 17))
    assert pol.lr_map[1] / pol.lr_map[11] == pytest.approx(100)


def test_policy_text_parses_to_default():
    assert parse_policy(DEFAULT_TEXT) == default_policy()


def test_policy_text_round_trip():
    pol = default_policy()
    assert parse_policy(pol.to_text()) == pol


def test_policy_range_override():
    pol = parse_policy("reset=17-19; lr.reset=1e-2; lr.keep=1e-4; lr.1-3=0")
    assert [pol.lr_map[l] for l in (1, 3, 4, 17)] == [0.0, 0.0, 1e-4, 1e-2]


@pytest.mark.parametrize("text", [
    "reset=1-10; lr.reset=1e-2",          # keep layers uncovered
    "reset=1-10,17-19; lr.reset=x; lr.keep=1e-4",
    "reset=1-25; lr.reset=1e-2; lr.keep=1e-4",
    "reset=5-2; lr.reset=1; lr.keep=1",
    "bogus=1; lr.reset=1; lr.keep=1",
    "reset=1-10; lr.reset=-1; lr.keep=1e-4",
])
def test_bad_policy_text(text):
    with pytest.raises(ConfigError):
        parse_policy(text)


# -- apply_policy ------------------------------------------------------------

def test_apply_policy_default_changes_exactly_reset_layers():
    net = N.build_network(num_classes=6, seed=3)
    out = apply_policy(net, default_policy(), seed=3)
    for layer in range(1, 20):
        assert params_equal(net, out, layer) == (11 <= layer <= 16), layer
    assert out.lr_map == default_policy().lr_map


def test_apply_policy_empty_reset_is_identity():
    net = N.build_network(num_classes=3, seed=0)
    out = apply_policy(net, uniform_policy(19, 1e-3), seed=9)
    assert N.checkpoint_bytes(out) == N.checkpoint_bytes(net)


def test_apply_policy_deterministic():
    net = N.build_network(num_classes=3, seed=0)
    a = apply_policy(net, default_policy(), seed=5)
    b = apply_policy(net, default_policy(), seed=5)
    assert N.checkpoint_bytes(a) == N.checkpoint_bytes(b)


def test_apply_policy_does_not_mutate_input():
    net = N.build_network(num_classes=3, seed=0)
    before = N.checkpoint_bytes(net)
    apply_policy(net, default_policy(), seed=1)
    assert N.checkpoint_bytes(net) == before


def test_apply_policy_rebuilds_classifier_for_new_classes():
    net = N.build_network(num_classes=3, seed=0)
    out = apply_policy(net, default_policy(), seed=1, class_names=list("abcde"))
    assert out.params[(19, "weight")].shape == (5, 64)
    assert out.class_names == list("abcde")


def test_apply_policy_class_change_needs_classifier_reset():
    net = N.build_network(num_classes=3, seed=0)
    with pytest.raises(ConfigError):
        apply_policy(net, parse_policy("reset=1-10; lr.reset=1; lr.keep=1"), seed=1, class_names=list("ab"))


def test_apply_policy_missing_rate():
    net = N.build_network(num_classes=3)
    with pytest.raises(ConfigError):
        apply_policy(net, AdaptivePolicy(frozenset(), {1: 0.1}), seed=0)


# -- finetune ----------------------------------------------------------------

def test_zero_rates_keep_parameters():
    net = N.build_network(SMALL, num_classes=3, seed=0)
    train = random_split(24, 3, 32, 1)
    cfg = TrainConfig(batch_size=8, max_epochs=2, seed=0)
    out, rep = finetune(net, train, train, cfg, uniform_policy(net.num_layers, 0.0))
    assert N.checkpoint_bytes(out) == N.checkpoint_bytes(net)
    assert rep.epochs_run == 2 and len(rep.train_loss) == 2


def test_zero_rate_layer_frozen_bit_exactly():
    net = N.build_network(SMALL, num_classes=3, seed=0)
    pol = parse_policy("lr.1-19=2e-2; lr.4=0; lr.18=0", net.num_layers)
    cfg = TrainConfig(batch_size=8, max_epochs=10, seed=0, patience=10, dropout_p=0.0)
    data = learnable_split(24, 32, 2)
    out, rep = finetune(net, data, data, cfg, pol)
    assert rep.best_epoch > 0
    assert params_equal(out, net, 4) and params_equal(out, net, 18)
    assert not params_equal(out, net, 5)


def test_single_class_training_saturates():
    net = N.build_network(SMALL, num_classes=2, seed=0)
    x, _ = random_split(32, 2, 32, 3)
    y = np.zeros(32, dtype=np.int64)
    cfg = TrainConfig(batch_size=8, max_epochs=5, seed=0, dropout_p=0.0, base_lr=1e-2)
    _, rep = finetune(net, (x, y), (x, y), cfg, uniform_policy(net.num_layers, 1e-2))
    assert rep.train_loss[-1] < 0.01


def test_max_epochs_zero_returns_initial_net():
    net, rep = train_from_scratch(SMALL, random_split(6, 2, 32, 0), random_split(6, 2, 32, 1),
                                  TrainConfig(max_epochs=0, seed=4), ["a", "b"])
    assert N.checkpoint_bytes(net) == N.checkpoint_bytes(N.build_network(SMALL, class_names=["a", "b"], seed=4))
    assert rep.stop_reason == "max_epochs" and rep.epochs_run == 0


def test_early_stop_reports_converged():
    net = N.build_network(SMALL, num_classes=2, seed=0)
    data = random_split(8, 2, 32, 5)
    cfg = TrainConfig(batch_size=8, max_epochs=20, seed=0, patience=2)
    _, rep = finetune(net, data, data, cfg, uniform_policy(net.num_layers, 0.0))
    assert rep.stop_reason == "converged" and rep.epochs_run == 2


def test_empty_and_mismatched_splits():
    net = N.build_network(SMALL, num_classes=2)
    good = random_split(4, 2, 32, 0)
    cfg = TrainConfig(max_epochs=1)
    pol = uniform_policy(net.num_layers, 1e-3)
    with pytest.raises(DataError):
        finetune(net, (good[0][:0], good[1][:0]), good, cfg, pol)
    with pytest.raises(DataError):
        finetune(net, (good[0], np.array([0, 1, 2, 0])), good, cfg, pol)


def test_report_tsv_round_trip():
    rep = FinetuneReport([0.9, 0.5], [20.0, 40.0, 55.5], 2, "max_epochs", 2)
    back = FinetuneReport.from_tsv(rep.to_tsv())
    assert back.train_loss == rep.train_loss and back.val_top1 == rep.val_top1
    assert rep.to_tsv().splitlines()[0] == "epoch\ttrain_loss\tval_top1"


# threshold fixed from the first seeded run (best val top-1 89.6% at epoch 38)
def test_train_from_scratch_reaches_threshold(small_baseline):
    _, rep = small_baseline
    assert max(rep.val_top1) >= 80.0
    assert rep.epochs_run <= 40


def test_train_from_scratch_is_seed_deterministic(small_domains):
    d = small_domains
    scale = N.ScaleConfig(input_side=d.side)
    cfg = TrainConfig(batch_size=16, base_lr=3e-3, dropout_p=0.0, max_epochs=1, seed=7)
    train = tuple(a[:64] for a in d.split("natural", "train"))
    val = tuple(a[:32] for a in d.split("natural", "val"))
    a, _ = train_from_scratch(scale, train, val, cfg, d.class_names, d.mean)
    b, _ = train_from_scratch(scale, train, val, cfg, d.class_names, d.mean)
    assert N.checkpoint_bytes(a) == N.checkpoint_bytes(b)


def test_default_policy_improves_on_transfer_task(small_domains, small_baseline):
    d = small_domains
    base, _ = small_baseline
    pol = default_policy()
    opt = apply_policy(base, pol, seed=42)
    cfg = TrainConfig(batch_size=16, dropout_p=0.0, max_epochs=6, seed=42)
    _, rep = finetune(opt, d.split("illustration", "train"), d.split("illustration", "val"), cfg, pol)
    assert max(rep.val_top1[1:]) > rep.val_top1[0]
