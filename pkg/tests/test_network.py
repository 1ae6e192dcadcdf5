import numpy as np
import pytest

from illutransfer import network as N
from illutransfer import tensor as T
from illutransfer.errors import ConfigError, FormatError, ShapeError

from gradcheck import TINY, gradient_check, tiny_net


# -- build -------------------------------------------------------------------

def test_default_scale_has_19_layers():
    net = N.build_network(num_classes=6, seed=0)
    kinds = [l.kind for l in net.layers]
    assert net.num_layers == 19
    assert kinds == ["conv"] * 16 + ["fc"] * 3
    assert [l.fan_out for l in net.layers if l.pool_after] == [8, 16, 32, 64, 64]


def test_parameter_count_closed_form():
    widths = [3, 8, 8, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64, 64, 64, 64, 64]
    conv = sum(f_out * f_in * 9 + f_out for f_in, f_out in zip(widths[:-1], widths[1:]))
    fc = (64 * 2 * 2) * 64 + 64 + 64 * 64 + 64 + 64 * 6 + 6
    assert N.build_network(num_classes=6).parameter_count() == conv + fc


def test_build_is_deterministic():
    a = N.build_network(num_classes=2, seed=4)
    b = N.build_network(num_classes=2, seed=4)
    assert N.checkpoint_bytes(a) == N.checkpoint_bytes(b)
    c = N.build_network(num_classes=2, seed=5)
    assert N.checkpoint_bytes(a) != N.checkpoint_bytes(c)


def test_init_scale_and_zero_bias():
    net = N.build_network(num_classes=6, seed=0)
    w = net.params[(9, "weight")]
    assert abs(w.std() - np.sqrt(2 / (32 * 9))) < 0.01
    assert all(not net.params[(i, "bias")].any() for i in range(1, 20))


def test_input_side_must_divide_by_32():
    with pytest.raises(ConfigError):
        N.ScaleConfig(input_side=60)


def test_needs_two_classes():
    with pytest.raises(ConfigError):
        N.build_network(num_classes=1)


# -- forward -----------------------------------------------------------------

def test_zero_image_zero_bias_gives_uniform_softmax():
    net = N.build_network(num_classes=4, seed=0)
    logits, _ = N.forward(net, np.zeros((3, 64, 64), np.float32))
    np.testing.assert_allclose(T.softmax(logits), np.full(4, 0.25), atol=1e-7)


def test_eval_forward_is_deterministic():
    net = N.build_network(num_classes=3, seed=1)
    x = np.random.default_rng(0).standard_normal((3, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(N.forward(net, x)[0], N.forward(net, x)[0])


def test_train_forward_replays_with_seed():
    net = N.build_network(num_classes=3, seed=1)
    x = np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)
    a = N.forward(net, x, train=True, rng=np.random.default_rng(9), dropout_p=0.5)[0]
    b = N.forward(net, x, train=True, rng=np.random.default_rng(9), dropout_p=0.5)[0]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, N.forward(net, x)[0])


def test_wrong_input_side():
    net = N.build_network(num_classes=3)
    with pytest.raises(ShapeError):
        N.forward(net, np.zeros((3, 32, 32), np.float32))


# -- backprop ----------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences_64bit(seed):
    assert gradient_check(np.float64, 1e-5, seed) <= 1e-4
    assert gradient_check(np.float64, 1e-5, seed, elementwise=False) <= 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences_32bit(seed):
    assert gradient_check(np.float32, 1e-3, seed, elementwise=False) <= 1e-2


def test_gradient_shapes_cover_every_parameter():
    net = tiny_net()
    _, grads = N.backprop(net, np.zeros((2, 3, 8, 8)), [0, 1], train=False)
    assert grads.keys() == net.params.keys()
    for k, g in grads.items():
        assert g.shape == net.params[k].shape


def test_logit_gradient_is_probs_minus_labels():
    net = tiny_net()
    last = net.num_layers
    net.params[(last, "weight")][:] = 0
    net.params[(last, "bias")][:] = 0
    x = np.random.default_rng(3).standard_normal((2, 3, 8, 8))
    _, grads = N.backprop(net, x, [1, 1], train=False)
    _, cache = N.forward(net, x)
    h = cache["fc_out"][-1]
    dlogits = (np.full((2, 2), 0.5) - T.one_hot([1, 1], 2)) / 2
    np.testing.assert_allclose(grads[(last, "weight")], dlogits.T @ h, atol=1e-12)
    np.testing.assert_allclose(grads[(last, "bias")], dlogits.sum(axis=0), atol=1e-12)


def test_duplicated_sample_leaves_gradients_unchanged():
    net = tiny_net()
    a = np.random.default_rng(5).standard_normal((1, 3, 8, 8))
    _, g1 = N.backprop(net, a, [1], train=False)
    _, g2 = N.backprop(net, np.concatenate([a, a]), [1, 1], train=False)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-10, atol=1e-14)


def test_label_shape_mismatch():
    with pytest.raises(ShapeError):
        N.backprop(tiny_net(), np.zeros((2, 3, 8, 8)), np.zeros((2, 3)))


# -- prediction --------------------------------------------------------------

def test_predict_topk_full_permutation():
    net = N.build_network(num_classes=5, seed=21)
    x = np.random.default_rng(21).standard_normal((3, 64, 64)).astype(np.float32)
    top = N.predict_topk(net, x, 5)
    assert sorted(n for n, _ in top) == sorted(net.class_names)
    assert abs(sum(p for _, p in top) - 1) <= 1e-5
    probs = T.softmax(N.forward(net, x)[0].astype(np.float64))
    expected = sorted(range(5), key=lambda i: (-probs[i], i))
    assert [n for n, _ in top] == [net.class_names[i] for i in expected]
    assert N.predict_topk(net, x, 2) == top[:2]


def test_predict_topk_forced_logits():
    net = N.build_network(num_classes=4, seed=0)
    net.params[(19, "weight")][:] = 0
    net.params[(19, "bias")][:] = np.array([0, 0, 1000, 0])
    name, p = N.predict_topk(net, np.zeros((3, 64, 64), np.float32), 1)[0]
    assert name == net.class_names[2] and p >= 0.999


def test_predict_topk_ties_by_class_index():
    net = N.build_network(num_classes=4, seed=0)
    top = N.predict_topk(net, np.zeros((3, 64, 64), np.float32), 4)
    assert [n for n, _ in top] == net.class_names


def test_predict_topk_range():
    net = N.build_network(num_classes=3)
    with pytest.raises(ConfigError):
        N.predict_topk(net, np.zeros((3, 64, 64), np.float32), 4)


# -- codes -------------------------------------------------------------------

def test_codes_nonnegative_and_match_cache():
    net = N.build_network(num_classes=3, seed=2)
    x = np.random.default_rng(2).standard_normal((4, 3, 64, 64)).astype(np.float32)
    x[3] = x[1]
    codes = N.codes_from_images(net, x)
    assert codes.shape == (4, 64)
    assert (codes >= 0).all()
    np.testing.assert_array_equal(codes[3], codes[1])
    _, cache = N.forward(net, x)
    np.testing.assert_array_equal(codes, cache["fc_out"][-1])


def test_codes_tsv_round_trip(tmp_path):
    codes = N.NeuralCodes(np.array([[0.0, 1.5], [2.25, 1e-7]]), ["a", "b"])
    codes.write_tsv(tmp_path / "c.tsv")
    back = N.NeuralCodes.read_tsv(tmp_path / "c.tsv")
    assert back.ids == ["a", "b"]
    np.testing.assert_array_equal(back.matrix, codes.matrix)


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    net = N.build_network(num_classes=6, seed=3)
    net.mean_rgb = np.array([0.1, 0.2, 0.3], np.float32)
    N.save_checkpoint(net, tmp_path / "a.nnck")
    back = N.load_checkpoint(tmp_path / "a.nnck")
    N.save_checkpoint(back, tmp_path / "b.nnck")
    assert (tmp_path / "a.nnck").read_bytes() == (tmp_path / "b.nnck").read_bytes()
    for k, v in net.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    np.testing.assert_array_equal(back.mean_rgb, net.mean_rgb)
    assert back.class_names == net.class_names


def test_checkpoint_header_reports_19_layers():
    meta, _ = N.read_checkpoint_header(N.checkpoint_bytes(N.build_network(num_classes=3)))
    assert meta["num_weighted_layers"] == 19


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_corrupt_checkpoints_are_rejected(tmp_path, damage):
    data = bytearray(N.checkpoint_bytes(N.build_network(TINY, num_classes=2)))
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "version":
        data[4] = 9
    elif damage == "truncate":
        data = data[:-10]
    else:
        data += b"\0"
    (tmp_path / "bad.nnck").write_bytes(bytes(data))
    with pytest.raises(FormatError):
        N.load_checkpoint(tmp_path / "bad.nnck")
