"""Kernel SVMs on neural codes.

Binary soft-margin machines are trained with SMO (maximal-violating-pair
selection with second-order choice of the partner, as in LIBSVM) on a
precomputed kernel matrix. Multiclass uses one-vs-rest; hyperparameters come
from a stratified k-fold grid search.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, ShapeError

KERNELS = ("rbf", "sigmoid", "linear")
MODEL_MAGIC = b"NNSV"
MODEL_VERSION = 1
ALPHA_TOL = 1e-8
TAU = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float = 1e-4
    coef0: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"kernel must be one of {KERNELS}, got {self.kind!r}")
        if self.kind != "linear" and not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")


def kernel_eval(spec, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    if spec.kind == "rbf":
        d = x - y
        return float(np.exp(-spec.gamma * np.dot(d, d)))
    if spec.kind == "sigmoid":
        return float(np.tanh(spec.gamma * np.dot(x, y) + spec.coef0))
    return float(np.dot(x, y))


def kernel_matrix(spec, a, b):
    """``K[i, j] = k(a_i, b_j)`` for row sets ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"kernel rows have dimension {a.shape[1]} and {b.shape[1]}")
    dots = a @ b.T
    if spec.kind == "linear":
        return dots
    if spec.kind == "sigmoid":
        return np.tanh(spec.gamma * dots + spec.coef0)
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * dots
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


# -- binary machine ----------------------------------------------------------

@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for each support vector
    bias: float
    kernel: KernelSpec
    C: float
    support_index: np.ndarray | None = None
    alpha: np.ndarray | None = None  # full dual vector; only set right after training
    iterations: int = 0


def dual_objective(alpha, y, K):
    """``sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij`` (to be maximized)."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def _snap(a, C):
    # rounding must not leave a variable a hair inside its bound
    eps = 1e-12 * C
    if a < eps:
        return 0.0
    if a > C - eps:
        return C
    return a


def smo_solve(K, y, C, tol=1e-3, max_iter=None):
    """Solve the SVM dual on a precomputed kernel matrix.

    Returns ``(alpha, bias, iterations)``. Stops once the maximal KKT
    violation ``max_{I_up} -y G - min_{I_low} -y G`` drops below ``tol``.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if max_iter is None:
        max_iter = max(100_000, 200 * n)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a with Q_ij = y_i y_j K_ij
    diag = np.diag(K).copy()
    pos = y > 0
    it = 0
    while it < max_iter:
        it += 1
        below_c = alpha < C
        above_0 = alpha > 0
        up = np.where(pos, below_c, above_0)
        low = np.where(pos, above_0, below_c)
        score = -y * grad
        masked = np.where(up, score, -np.inf)
        i = int(masked.argmax())
        m_up = masked[i]
        low_score = np.where(low, score, np.inf)
        if m_up - low_score.min() < tol:
            break
        # second-order partner choice among violating I_low members
        b = m_up - score
        cand = low & (b > 0)
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, TAU)
        gain = np.where(cand, -(b * b) / a, np.inf)
        j = int(gain.argmin())

        yi, yj = y[i], y[j]
        ai, aj = alpha[i], alpha[j]
        eta = diag[i] + diag[j] - 2.0 * K[i, j]
        if eta <= 0:
            eta = TAU
        ei, ej = yi * grad[i], yj * grad[j]
        if yi != yj:
            lo, hi = max(0.0, aj - ai), min(C, C + aj - ai)
        else:
            lo, hi = max(0.0, ai + aj - C), min(C, ai + aj)
        aj_new = _snap(min(max(aj + yj * (ei - ej) / eta, lo), hi), C)
        ai_new = _snap(ai + yi * yj * (aj - aj_new), C)
        di, dj = ai_new - ai, aj_new - aj
        if di == 0.0 and dj == 0.0:
            break
        alpha[i], alpha[j] = ai_new, aj_new
        grad += y * (yi * di * K[i] + yj * dj * K[j])

    score = -y * grad
    free = (alpha > ALPHA_TOL) & (alpha < C - ALPHA_TOL)
    if free.any():
        bias = float(score[free].mean())
    else:
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        hi_ = score[up].max() if up.any() else 0.0
        lo_ = score[low].min() if low.any() else 0.0
        bias = float((hi_ + lo_) / 2.0)
    return alpha, bias, it


def _check_binary_labels(labels):
    y = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("binary labels must be +1 or -1")
    if not (y > 0).any() or not (y < 0).any():
        raise DataError("binary SVM training needs samples of both signs")
    return y


def train_binary(codes, labels, spec, C, tol=1e-3, max_passes=None, K=None):
    """Soft-margin binary SVM on ``codes`` with labels in {-1, +1}."""
    x = np.asarray(codes, dtype=np.float64)
    y = _check_binary_labels(labels)
    if C <= 0:
        raise ConfigError(f"C must be positive, got {C}")
    if not np.all(np.isfinite(x)):
        raise DataError("codes contain non-finite values")
    if K is None:
        K = kernel_matrix(spec, x, x)
    max_iter = None if max_passes is None else max_passes * len(y)
    alpha, bias, it = smo_solve(K, y, C, tol, max_iter)
    sv = np.flatnonzero(alpha > ALPHA_TOL)
    return BinarySvm(x[sv].copy(), alpha[sv] * y[sv], bias, spec, float(C), sv, alpha, it)


def decision_values(svm, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if svm.support_vectors.shape[0] and x.shape[1] != svm.support_vectors.shape[1]:
        raise ShapeError(f"input dimension {x.shape[1]} != {svm.support_vectors.shape[1]}")
    if not len(svm.dual_coef):
        return np.full(len(x), svm.bias)
    return kernel_matrix(svm.kernel, x, svm.support_vectors) @ svm.dual_coef + svm.bias


def decision_value(svm, x):
    return float(decision_values(svm, np.asarray(x)[None])[0])


# -- one-vs-rest -------------------------------------------------------------

@dataclass
class SvmModel:
    class_names: list
    machines: list
    kernel: KernelSpec
    C: float
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    def transform(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.feature_mean is not None:
            x = (x - self.feature_mean) / self.feature_scale
        return x

    def scores(self, x):
        """``[N, num_classes]`` decision values."""
        x = self.transform(x)
        return np.stack([decision_values(m, x) for m in self.machines], axis=1)


def _ovr_labels(labels, num_classes):
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) > num_classes or (counts == 0).any():
        empty = [i for i in range(num_classes) if i >= len(counts) or counts[i] == 0]
        raise DataError(f"one-vs-rest needs every class populated; empty: {empty}")
    return labels


def _solve_ovr(K, labels, num_classes, C, tol):
    out = []
    for k in range(num_classes):
        y = np.where(labels == k, 1.0, -1.0)
        out.append(smo_solve(K, y, C, tol))
    return out


def standardizer(x):
    """Per-feature mean and spread; constant features keep a unit scale."""
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def train_ovr(codes, labels, spec, C, class_names=None, tol=1e-3, standardize=False):
    """One binary machine per class (that class +1, the rest -1)."""
    x = np.asarray(codes, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if class_names is None else len(class_names)
    if class_names is None:
        class_names = [str(i) for i in range(num_classes)]
    if num_classes < 2:
        raise DataError("one-vs-rest needs at least 2 classes")
    labels = _ovr_labels(labels, num_classes)
    mean = scale = None
    if standardize:
        mean, scale = standardizer(x)
        x = (x - mean) / scale
    K = kernel_matrix(spec, x, x)
    machines = []
    for k, (alpha, bias, it) in enumerate(_solve_ovr(K, labels, num_classes, C, tol)):
        y = np.where(labels == k, 1.0, -1.0)
        sv = np.flatnonzero(alpha > ALPHA_TOL)
        machines.append(BinarySvm(x[sv].copy(), alpha[sv] * y[sv], bias, spec, float(C), sv, alpha, it))
    return SvmModel(list(class_names), machines, spec, float(C), mean, scale)


def rank_scores(scores):
    """Per-row class ranking by descending score, ties by ascending class index."""
    return np.argsort(-np.atleast_2d(scores), axis=1, kind="stable")


def predict_topk(model, x, k):
    n = len(model.class_names)
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    order = rank_scores(model.scores(np.asarray(x)[None]))[0][:k]
    return [model.class_names[i] for i in order]


# -- grid search -------------------------------------------------------------

DEFAULT_GRID = [
    (kind, C, gamma)
    for kind in ("rbf", "sigmoid")
    for C in (1.0, 10.0, 100.0)
    for gamma in (1e-4, 1e-3, 1e-2, 1e-1)
]


@dataclass
class GridSearchResult:
    scores: dict  # (kernel, C, gamma) -> mean held-out top-1 (fraction)
    best: tuple
    folds: int
    fold_scores: dict = field(default_factory=dict)

    def to_text(self):
        lines = ["kernel\tC\tgamma\tmean_top1"]
        for (kind, C, gamma), s in self.scores.items():
            lines.append(f"{kind}\t{C!r}\t{gamma!r}\t{100 * s:.2f}")
        kind, C, gamma = self.best
        lines.append(f"# best\t{kind}\t{C!r}\t{gamma!r}")
        return "\n".join(lines) + "\n"


def read_grid(path):
    cells = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read grid file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'kernel C gamma'")
        try:
            cell = (parts[0], float(parts[1]), float(parts[2]))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: C and gamma must be numbers") from None
        KernelSpec(cell[0], cell[2])
        cells.append(cell)
    if not cells:
        raise FormatError(f"{path}: empty grid")
    return cells


def write_grid(cells, path):
    Path(path).write_text("".join(f"{k} {C!r} {g!r}\n" for k, C, g in cells), encoding="utf-8")


def stratified_folds(labels, folds, seed):
    """Fold index per sample: each class shuffled, then dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    assign = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < folds:
            raise DataError(f"class {c} has {len(idx)} samples; {folds}-fold CV needs at least {folds}")
        assign[idx[rng.permutation(len(idx))]] = np.arange(len(idx)) % folds
    return assign


def _cell_key(cell):
    kind, C, gamma = cell
    return (-C, -gamma, -KERNELS.index(kind))


def grid_search(codes, labels, grid=None, folds=3, seed=0, tol=1e-3, num_classes=None,
                standardize=False):
    """Mean held-out top-1 per grid cell over stratified folds.

    With ``standardize`` the codes are scaled exactly as ``train_ovr`` would
    scale them, so the chosen cell transfers to the final model.

    The best cell maximizes the mean; ties go to smaller C, then smaller
    gamma, then kernel order rbf < sigmoid < linear.
    """
    grid = list(DEFAULT_GRID if grid is None else grid)
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    x = np.asarray(codes, dtype=np.float64)
    if standardize:
        mean, scale = standardizer(x)
        x = (x - mean) / scale
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    _ovr_labels(labels, num_classes)
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    assign = stratified_folds(labels, folds, seed)
    kernels = {}
    scores, fold_scores = {}, {}
    for cell in grid:
        kind, C, gamma = cell
        spec = KernelSpec(kind, gamma)
        kkey = (kind, 0.0 if kind == "linear" else gamma)
        if kkey not in kernels:
            kernels[kkey] = kernel_matrix(spec, x, x)
        K = kernels[kkey]
        accs = []
        for f in range(folds):
            tr = np.flatnonzero(assign != f)
            te = np.flatnonzero(assign == f)
            Ktr = K[np.ix_(tr, tr)]
            Kte = K[np.ix_(te, tr)]
            dec = np.empty((len(te), num_classes))
            for k, (alpha, bias, _) in enumerate(_solve_ovr(Ktr, labels[tr], num_classes, C, tol)):
                y = np.where(labels[tr] == k, 1.0, -1.0)
                dec[:, k] = Kte @ (alpha * y) + bias
            pred = rank_scores(dec)[:, 0]
            accs.append(float(np.mean(pred == labels[te])))
        fold_scores[cell] = accs
        scores[cell] = float(np.mean(accs))
    top = max(scores.values())
    best = max((c for c in grid if scores[c] == top), key=_cell_key)
    return GridSearchResult(scores, best, folds, fold_scores)


# -- persistence -------------------------------------------------------------

def model_bytes(model):
    buf = io.BytesIO()
    k = model.kernel
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<IBddd", MODEL_VERSION, KERNELS.index(k.kind), k.gamma, k.coef0, model.C))
    buf.write(struct.pack("<I", len(model.class_names)))
    for name in model.class_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
    dim = 0
    for m in model.machines:
        if len(m.support_vectors):
            dim = m.support_vectors.shape[1]
    std = model.feature_mean is not None
    buf.write(struct.pack("<IB", dim, int(std)))
    if std:
        buf.write(np.asarray(model.feature_mean, "<f8").tobytes())
        buf.write(np.asarray(model.feature_scale, "<f8").tobytes())
    for m in model.machines:
        n = len(m.dual_coef)
        buf.write(struct.pack("<I", n))
        buf.write(np.asarray(m.dual_coef, "<f8").tobytes())
        buf.write(struct.pack("<d", m.bias))
        buf.write(np.ascontiguousarray(m.support_vectors, "<f4").reshape(n, dim).tobytes())
    return buf.getvalue()


def save_model(model, path):
    Path(path).write_bytes(model_bytes(model))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated SVM model file")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def array(self, dtype, count):
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise FormatError("truncated SVM model file")
        out = np.frombuffer(self.data, dtype, count, self.pos)
        self.pos += size
        return out


def load_model(path):
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an SVM model file")
    r = _Reader(data)
    r.pos = 4
    version, kind, gamma, coef0, C = r.take("<IBddd")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported SVM model version {version}")
    if kind >= len(KERNELS):
        raise FormatError(f"unknown kernel tag {kind}")
    spec = KernelSpec(KERNELS[kind], gamma, coef0)
    (n_classes,) = r.take("<I")
    names = []
    for _ in range(n_classes):
        (ln,) = r.take("<I")
        names.append(bytes(r.array("u1", ln)).decode("utf-8"))
    dim, std = r.take("<IB")
    mean = scale = None
    if std:
        mean = r.array("<f8", dim).astype(np.float64)
        scale = r.array("<f8", dim).astype(np.float64)
    machines = []
    for _ in range(n_classes):
        (n,) = r.take("<I")
        coef = r.array("<f8", n).astype(np.float64)
        (bias,) = r.take("<d")
        sv = r.array("<f4", n * dim).astype(np.float64).reshape(n, dim)
        machines.append(BinarySvm(sv, coef, bias, spec, C))
    if r.pos != len(data):
        raise FormatError("trailing bytes in SVM model file")
    return SvmModel(names, machines, spec, C, mean, scale)
