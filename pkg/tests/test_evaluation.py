from fractions import Fraction

import numpy as np
import pytest

from illutransfer import evaluation as E
from illutransfer.errors import ConfigError, DataError, FormatError

from oracles import enumerate_knn_purity, topk_fraction


def preds_from_hit_ranks(ranks, num_classes, seed=0):
    """Prediction set whose true class sits at each given 0-based rank."""
    rng = np.random.default_rng(seed)
    rows, truths = [], []
    for r in ranks:
        perm = rng.permutation(num_classes)
        rows.append(perm)
        truths.append(perm[r])
    return E.PredictionSet(np.array(rows), truths, [f"c{i}" for i in range(num_classes)])


def blob_points(centers, per, spread, seed):
    rng = np.random.default_rng(seed)
    pts = np.concatenate([np.asarray(c) + spread * rng.standard_normal((per, len(c))) for c in centers])
    return pts, np.repeat(np.arange(len(centers)), per)


# -- top-k -------------------------------------------------------------------

def test_all_correct_is_100_for_every_k():
    p = preds_from_hit_ranks([0] * 7, 6)
    assert [E.topk_precision(p, k) for k in range(1, 7)] == [100.0] * 6


def test_hand_enumerated_ranks():
    p = preds_from_hit_ranks([0, 1, 5], 6)
    assert E.topk_precision(p, 1) == pytest.approx(33.33, abs=0.005)
    assert E.topk_precision(p, 5) == pytest.approx(66.67, abs=0.005)
    assert E.topk_precision(p, 6) == 100.0


def test_topk_matches_fraction_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k_cls = int(rng.integers(2, 9))
        p = preds_from_hit_ranks(rng.integers(0, k_cls, int(rng.integers(1, 40))), k_cls, int(rng.integers(1000)))
        for k in range(1, k_cls + 1):
            assert E.topk_precision(p, k) == float(100 * topk_fraction(p.rankings, p.truths, k))


def test_topk_errors():
    p = preds_from_hit_ranks([0], 3)
    with pytest.raises(ConfigError):
        E.topk_precision(p, 4)
    with pytest.raises(ConfigError):
        E.topk_precision(p, 0)
    with pytest.raises(DataError):
        E.topk_precision(E.PredictionSet(np.zeros((0, 3)), [], list("abc")), 1)


def test_ranking_must_be_permutation():
    with pytest.raises(DataError):
        E.PredictionSet([[0, 0, 1]], [0], list("abc"))


def test_from_scores_breaks_ties_by_index():
    p = E.PredictionSet.from_scores([[0.2, 0.9, 0.9, 0.1]], [2], list("abcd"))
    np.testing.assert_array_equal(p.rankings, [[1, 2, 0, 3]])
    assert p.hit_ranks()[0] == 1


def test_predictions_tsv_round_trip(tmp_path):
    p = preds_from_hit_ranks([0, 2, 1, 3], 4, seed=5)
    p.ids = ["w", "x", "y", "z"]
    p.write_tsv(tmp_path / "p.tsv")
    back = E.PredictionSet.read_tsv(tmp_path / "p.tsv", p.class_names)
    np.testing.assert_array_equal(back.rankings, p.rankings)
    np.testing.assert_array_equal(back.truths, p.truths)
    assert back.ids == p.ids


def test_predictions_tsv_unknown_class(tmp_path):
    (tmp_path / "p.tsv").write_text("id\ttrue\tranking\n1\tzebra\ta,b\n")
    with pytest.raises(FormatError):
        E.PredictionSet.read_tsv(tmp_path / "p.tsv", ["a", "b"])


# -- reports -----------------------------------------------------------------

def test_known_confusion_fixture():
    # A predicted as B twice and as A once; B always right
    p = E.PredictionSet([[1, 0], [1, 0], [0, 1], [1, 0]], [0, 0, 0, 1], ["A", "B"])
    rep = E.per_class_report(p)
    assert rep.rows["A"][1] == pytest.approx(100 / 3)
    assert rep.rows["B"][1] == 100.0
    np.testing.assert_array_equal(rep.confusion, [[1, 2], [0, 1]])
    assert rep.global_top1 == 50.0


def test_single_class_test_set():
    p = E.PredictionSet([[2, 0, 1], [0, 2, 1]], [2, 2], list("abc"))
    rep = E.per_class_report(p)
    assert list(rep.rows) == ["c"] and rep.absent == ["a", "b"]
    assert (rep.global_top1, rep.global_top5) == rep.rows["c"][1:]


def test_global_is_image_weighted_mean_of_classes():
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = preds_from_hit_ranks(rng.integers(0, 7, 60), 7, int(rng.integers(1000)))
        rep = E.per_class_report(p)
        n = len(p.truths)
        for col, glob in ((1, rep.global_top1), (2, rep.global_top5)):
            weighted = sum(Fraction(rep.rows[k][0]) * Fraction(rep.rows[k][col]) for k in rep.rows) / n
            assert float(weighted) == pytest.approx(glob, rel=1e-12)
        assert rep.global_top5 >= rep.global_top1


def test_report_tsv_round_trip():
    rep = E.per_class_report(preds_from_hit_ranks([0, 1, 2, 0, 5, 0], 6, seed=2))
    text = rep.to_tsv()
    back = E.read_report_tsv(text)
    assert text.splitlines()[0] == "class\ttop1\ttop5"
    for name, (_, t1, t5) in rep.rows.items():
        assert back[name] == (round(t1, 2), round(t5, 2))
    assert back["global"] == (round(rep.global_top1, 2), round(rep.global_top5, 2))


def test_comparison_table_row_order():
    text = E.comparison_table({"Optimized+SVM": (90.0, 99.0), "Baseline": (40.0, 95.5)})
    assert text.splitlines() == ["model\ttop1\ttop5", "Baseline\t40.00\t95.50", "Optimized+SVM\t90.00\t99.00"]


# -- t-SNE -------------------------------------------------------------------

def test_three_identical_points_have_uniform_affinities():
    P = E.joint_affinities(np.ones((3, 4)), perplexity=1.0)
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_allclose(P[off], 1 / 6)
    np.testing.assert_allclose(P + P.T, np.where(off, 1 / 3, 0))
    assert P.sum() == pytest.approx(1.0)


def test_conditional_affinities_hit_target_perplexity():
    x = np.random.default_rng(1).standard_normal((60, 5))
    p = E.conditional_affinities(x, 10.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.nansum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    np.testing.assert_allclose(np.exp(h), 10.0, rtol=1e-4)


def test_infeasible_perplexity():
    with pytest.raises(ConfigError):
        E.tsne_embed(np.zeros((20, 3)), perplexity=10.0)
    with pytest.raises(ConfigError):
        E.tsne_embed(np.zeros((20, 3)), perplexity=0.0)


def test_tsne_blobs_kl_decreases_and_is_deterministic():
    rng = np.random.default_rng(7)
    x, labels = blob_points(4 * rng.standard_normal((4, 16)), 40, 1.0, seed=7)
    emb = E.tsne_embed(x, perplexity=10.0, iterations=1000, seed=7)
    kl = emb.kl_trace
    assert len(kl) == 1000 and min(kl) > 0
    assert kl[999] < kl[299]
    for t in range(250, 950):
        assert kl[t + 50] <= kl[t] + 1e-9
    assert E.neighbor_purity(emb, labels) >= 0.9
    again = E.tsne_embed(x, perplexity=10.0, iterations=1000, seed=7)
    np.testing.assert_array_equal(again.coords, emb.coords)


# -- neighbor purity ---------------------------------------------------------

def test_purity_single_label_is_one():
    pts = np.random.default_rng(0).standard_normal((30, 2))
    assert E.neighbor_purity(pts, np.zeros(30)) == 1.0


def test_purity_separated_blobs():
    pts, labels = blob_points([(0, 0), (20, 0), (0, 20)], 40, 1.0, seed=1)
    assert E.neighbor_purity(pts, labels) >= 0.9


def test_purity_random_labels_near_half():
    pts = np.random.default_rng(2).standard_normal((200, 2))
    for seed in range(5):
        labels = np.random.default_rng(seed).permutation(np.repeat([0, 1], 100))
        assert abs(E.neighbor_purity(pts, labels) - 0.5) <= 0.1


def test_purity_matches_enumeration_oracle():
    pts, labels = blob_points([(0, 0), (2, 1)], 15, 1.5, seed=4)
    assert E.neighbor_purity(pts, labels, k=5) == pytest.approx(enumerate_knn_purity(pts, labels, 5), abs=1e-12)


def test_purity_needs_more_points_than_k():
    with pytest.raises(ConfigError):
        E.neighbor_purity(np.zeros((10, 2)), np.zeros(10), k=10)
