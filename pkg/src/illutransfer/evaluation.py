"""Top-k precision, per-class reports, exact t-SNE and neighbor purity."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

MODEL_ROWS = ("Baseline", "Baseline+SVM", "Optimized", "Optimized+SVM")


# -- predictions -------------------------------------------------------------

@dataclass
class PredictionSet:
    rankings: np.ndarray  # [N, K] class indices, best first
    truths: np.ndarray    # [N] class indices
    class_names: list
    ids: list | None = None

    def __post_init__(self):
        self.rankings = np.atleast_2d(np.asarray(self.rankings, dtype=np.int64))
        self.truths = np.asarray(self.truths, dtype=np.int64)
        k = len(self.class_names)
        if len(self.truths) and self.rankings.shape != (len(self.truths), k):
            raise DataError(f"rankings have shape {self.rankings.shape}, expected ({len(self.truths)}, {k})")
        if len(self.truths) and not np.array_equal(np.sort(self.rankings, axis=1),
                                                   np.broadcast_to(np.arange(k), self.rankings.shape)):
            raise DataError("every ranking must be a permutation of the classes")

    @classmethod
    def from_scores(cls, scores, truths, class_names, ids=None):
        order = np.argsort(-np.atleast_2d(scores), axis=1, kind="stable")
        return cls(order, truths, class_names, ids)

    def hit_ranks(self):
        """0-based position of the true class in each ranking."""
        return np.argmax(self.rankings == self.truths[:, None], axis=1)

    def write_tsv(self, path):
        ids = self.ids or [str(i) for i in range(len(self.truths))]
        lines = ["id\ttrue\tranking", "#classes\t" + ",".join(self.class_names)]
        for id_, t, r in zip(ids, self.truths, self.rankings):
            lines.append(f"{id_}\t{self.class_names[t]}\t{','.join(self.class_names[i] for i in r)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read_tsv(cls, path, class_names=None):
        try:
            lines = Path(path).read_text(encoding="utf-8").strip("\n").split("\n")
        except OSError as exc:
            raise DataError(f"cannot read predictions {path}: {exc.strerror}") from None
        if not lines or lines[0] != "id\ttrue\tranking":
            raise FormatError(f"{path}: bad predictions header")
        body = lines[1:]
        if body and body[0].startswith("#classes\t"):
            stored = body.pop(0).split("\t", 1)[1].split(",")
            class_names = stored if class_names is None else class_names
        rows = [l.split("\t") for l in body if l]
        if class_names is None:
            class_names = rows[0][2].split(",") if rows else []
        index = {c: i for i, c in enumerate(class_names)}
        try:
            ranks = [[index[c] for c in r[2].split(",")] for r in rows]
            truths = [index[r[1]] for r in rows]
        except (KeyError, IndexError) as exc:
            raise FormatError(f"{path}: unknown class or malformed row ({exc})") from None
        return cls(np.array(ranks, dtype=np.int64).reshape(len(rows), len(class_names)),
                   truths, list(class_names), [r[0] for r in rows])


def topk_precision(preds, k):
    """Percentage of samples whose true class is in the first ``k`` ranks."""
    n = len(preds.truths)
    if n == 0:
        raise DataError("top-k precision of an empty prediction set")
    if not 1 <= k <= len(preds.class_names):
        raise ConfigError(f"k must be in [1, {len(preds.class_names)}], got {k}")
    hits = int(np.count_nonzero(preds.hit_ranks() < k))
    return 100.0 * hits / n


# -- reports -----------------------------------------------------------------

@dataclass
class MetricsReport:
    class_names: list
    rows: dict  # class name -> (count, top1 %, top5 %)
    global_top1: float
    global_top5: float
    confusion: np.ndarray
    absent: list = field(default_factory=list)

    def to_tsv(self):
        lines = ["class\ttop1\ttop5"]
        for name, (_, t1, t5) in self.rows.items():
            lines.append(f"{name}\t{t1:.2f}\t{t5:.2f}")
        lines.append(f"global\t{self.global_top1:.2f}\t{self.global_top5:.2f}")
        return "\n".join(lines) + "\n"

    def confusion_tsv(self):
        lines = ["true\\pred\t" + "\t".join(self.class_names)]
        for name, row in zip(self.class_names, self.confusion):
            lines.append(name + "\t" + "\t".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def read_report_tsv(text):
    """Parse a report table back into ``{row name: (top1, top5)}``."""
    lines = text.strip("\n").split("\n")
    if not lines or lines[0].split("\t")[1:] != ["top1", "top5"]:
        raise FormatError("report header must end with top1, top5")
    out = {}
    for line in lines[1:]:
        name, t1, t5 = line.split("\t")
        out[name] = (float(t1), float(t5))
    return out


def per_class_report(preds, top=5):
    """Per-class and global top-1 / top-k precision plus the top-1 confusion matrix."""
    n_cls = len(preds.class_names)
    k5 = min(top, n_cls)
    ranks = preds.hit_ranks()
    rows, absent = {}, []
    for c, name in enumerate(preds.class_names):
        sel = preds.truths == c
        count = int(sel.sum())
        if count == 0:
            absent.append(name)
            continue
        rows[name] = (count, 100.0 * np.count_nonzero(ranks[sel] < 1) / count,
                      100.0 * np.count_nonzero(ranks[sel] < k5) / count)
    confusion = np.zeros((n_cls, n_cls), dtype=np.int64)
    if len(preds.truths):
        np.add.at(confusion, (preds.truths, preds.rankings[:, 0]), 1)
    return MetricsReport(list(preds.class_names), rows, topk_precision(preds, 1),
                         topk_precision(preds, k5), confusion, absent)


def comparison_table(results):
    """``results`` maps row name -> (top1, top5); rows in the fixed model order."""
    lines = ["model\ttop1\ttop5"]
    for name in MODEL_ROWS:
        if name in results:
            t1, t5 = results[name]
            lines.append(f"{name}\t{t1:.2f}\t{t5:.2f}")
    return "\n".join(lines) + "\n"


# -- t-SNE -------------------------------------------------------------------

@dataclass
class Embedding2D:
    coords: np.ndarray
    kl_trace: list
    perplexity: float
    seed: int

    def write_tsv(self, path, ids, labels):
        lines = ["id\tx\ty\tlabel"]
        for id_, (x, y), lab in zip(ids, self.coords, labels):
            lines.append(f"{id_}\t{x:.9g}\t{y:.9g}\t{lab}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sq_distances(x):
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_affinities(x, perplexity, tol=1e-5, max_iter=100):
    """Row-stochastic Gaussian affinities whose entropy matches log(perplexity).

    The precision of each row's kernel is found by bisection, all rows at once.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    d = _sq_distances(x)
    target = np.log(perplexity)
    beta = np.ones(n)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    off = ~np.eye(n, dtype=bool)
    for _ in range(max_iter):
        # shift by the row minimum off-diagonal distance for stability
        dmin = np.where(off, d, np.inf).min(axis=1, keepdims=True)
        p = np.where(off, np.exp(-(d - dmin) * beta[:, None]), 0.0)
        s = p.sum(axis=1, keepdims=True)
        p /= s
        h = np.log(s[:, 0]) + beta * ((d - dmin) * p).sum(axis=1)
        diff = h - target
        if np.all(np.abs(diff) < tol):
            break
        up = diff > 0  # entropy too high: sharpen
        lo = np.where(up, beta, lo)
        hi = np.where(up, hi, beta)
        beta = np.where(up, np.where(np.isinf(hi), beta * 2, (beta + hi) / 2),
                        np.where(np.isinf(lo), beta / 2, (beta + lo) / 2))
    return p


def joint_affinities(x, perplexity):
    p = conditional_affinities(x, perplexity)
    p = (p + p.T) / (2.0 * len(p))
    return p


def tsne_embed(codes, perplexity=30.0, iterations=1000, seed=0, learning_rate=None,
               exaggeration=12.0, exaggeration_iters=250, momentum_switch=250):
    """Exact t-SNE to 2-D.

    ``learning_rate=None`` picks ``max(n / (4 * exaggeration), 50)``; the
    classic 200 overshoots on a few hundred points. KL(P || Q) against the
    unexaggerated P is recorded after every iteration.
    """
    x = np.asarray(getattr(codes, "matrix", codes), dtype=np.float64)
    n = len(x)
    if n > 5000:
        raise ConfigError(f"exact t-SNE is limited to 5000 points, got {n}")
    if perplexity <= 0 or n < 3 * perplexity:
        raise ConfigError(f"perplexity {perplexity} infeasible for {n} points (need n >= 3 * perplexity)")
    if learning_rate is None:
        learning_rate = max(n / (4.0 * exaggeration), 50.0)
    P = np.maximum(joint_affinities(x, perplexity), 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    kl = []
    for it in range(iterations):
        ex = exaggeration if it < exaggeration_iters else 1.0
        mom = 0.5 if it < momentum_switch else 0.8
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        pq = (ex * P - Q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)
        gains = np.where((grad > 0) != (velocity > 0), gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        velocity = mom * velocity - learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        kl.append(float(np.sum(P * np.log(P / Q))))
    return Embedding2D(y, kl, float(perplexity), seed)


def neighbor_purity(embedding, labels, k=10):
    """Mean fraction of each point's k nearest neighbors that share its label."""
    pts = np.asarray(getattr(embedding, "coords", embedding), dtype=np.float64)
    labels = np.asarray(labels)
    n = len(pts)
    if n <= k:
        raise ConfigError(f"neighbor purity needs more than k={k} points, got {n}")
    d = _sq_distances(pts)
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))
