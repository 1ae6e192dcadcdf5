"""Manifests, filename-to-class mapping, stratified splits, preprocessing and
the synthetic two-domain shape generator."""

from __future__ import annotations

import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.64, 0.16, 0.20)
IMAGE_EXTENSIONS = {"png", "jpg", "jpeg", "gif", "svg", "bmp", "tif", "tiff", "webp", "eps", "wmf", "ai"}
SHAPE_KINDS = ("disk", "triangle", "cross", "ring", "bar", "star", "square", "crescent")
DOMAINS = ("natural", "illustration")
MANIFEST_HEADER = "id\tpath\tclass\tsplit"

_DELIMS = re.compile(r"[-_ .]+|\d+")


def load_stopwords(path=None):
    if path is None:
        text = resources.files("illutransfer").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        try:
            text = Path(path).read_text("utf-8")
        except OSError as exc:
            raise DataError(f"cannot read stopword file {path}: {exc.strerror}") from None
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


DEFAULT_STOPWORDS = load_stopwords()


# -- records and manifests ---------------------------------------------------

@dataclass
class Record:
    image_id: str
    path: str
    class_name: str
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list
    class_names: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = set()
        known = set(self.class_names)
        for r in self.records:
            if r.image_id in ids:
                raise DataError(f"duplicate image id {r.image_id!r}")
            ids.add(r.image_id)
            if r.class_name not in known:
                raise DataError(f"record {r.image_id!r} has unknown class {r.class_name!r}")

    def subset(self, split):
        return [r for r in self.records if r.split == split]

    def resolve(self, record):
        return Path(self.root) / record.path

    def write(self, path):
        path = Path(path)
        lines = [MANIFEST_HEADER]
        for r in self.records:
            if r.split not in SPLITS:
                raise DataError(f"record {r.image_id!r} has no split assigned")
            lines.append(f"{r.image_id}\t{r.path}\t{r.class_name}\t{r.split}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
        except UnicodeDecodeError:
            raise FormatError(f"{path}: manifest is not UTF-8 text") from None
        lines = text.split("\n")
        if not lines or lines[0] != MANIFEST_HEADER:
            raise FormatError(f"{path}: manifest header must be {MANIFEST_HEADER!r}")
        records, classes = [], []
        for lineno, line in enumerate(lines[1:], 2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            image_id, rel, cls_name, split = parts
            if split not in SPLITS:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            if cls_name not in classes:
                classes.append(cls_name)
            records.append(Record(image_id, rel, cls_name, split))
        return cls(records, classes, path.parent)


# -- name mapping ------------------------------------------------------------

def tokenize_name(s, stopwords=DEFAULT_STOPWORDS):
    """Lowercased word tokens of an image or class name.

    A known image extension is dropped; ``-``, ``_``, space, ``.`` and digit
    runs separate tokens; stopwords are removed and duplicates collapsed.
    """
    s = s.lower()
    stem, dot, ext = s.rpartition(".")
    if dot and ext in IMAGE_EXTENSIONS:
        s = stem
    out = []
    for tok in _DELIMS.split(s):
        if tok and tok not in stopwords and tok not in out:
            out.append(tok)
    return out


@dataclass
class ClassMapping:
    matches: dict  # image name -> list of class names, in class order
    unmatched: list

    def multi_matches(self):
        return {k: v for k, v in self.matches.items() if len(v) > 1}

    def to_text(self):
        lines = []
        for name, classes in self.matches.items():
            lines.append(f"match\t{name}\t{','.join(classes)}")
        for name in self.unmatched:
            lines.append(f"unmatched\t{name}\t")
        for name, classes in self.multi_matches().items():
            lines.append(f"multi\t{name}\t{','.join(classes)}")
        return "\n".join(lines) + "\n"


def map_to_classes(image_names, class_names, stopwords=DEFAULT_STOPWORDS):
    """Assign every image to each class sharing at least one token with it."""
    class_names = list(class_names)
    if not class_names:
        raise ConfigError("map_to_classes needs at least one class name")
    class_tokens = [set(tokenize_name(c, stopwords)) for c in class_names]
    matches, unmatched = {}, []
    for name in image_names:
        toks = set(tokenize_name(name, stopwords))
        hit = [c for c, ct in zip(class_names, class_tokens) if toks & ct]
        if hit:
            matches[name] = hit
        else:
            unmatched.append(name)
    return ClassMapping(matches, unmatched)


def records_from_mapping(mapping, directory=""):
    """One record per (image, matched class); copies of one image get distinct ids."""
    records = []
    for name, classes in mapping.matches.items():
        for cls_name in classes:
            image_id = name if len(classes) == 1 else f"{cls_name}/{name}"
            records.append(Record(image_id, os.path.join(directory, name) if directory else name, cls_name))
    return records


# -- splits ------------------------------------------------------------------

def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_counts(n, fractions):
    n_val = _round_half_up(n * fractions[1])
    n_test = _round_half_up(n * fractions[2])
    return n - n_val - n_test, n_val, n_test


def split_manifest(records, fractions=DEFAULT_FRACTIONS, seed=0, class_names=None, root="."):
    """Stratified train/val/test assignment.

    Per class, val and test sizes are the rounded fractions and train takes
    the remainder. Records are shuffled per class with a generator seeded by
    ``seed``, classes visited in ``class_names`` order.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    if class_names is None:
        class_names = []
        for r in records:
            if r.class_name not in class_names:
                class_names.append(r.class_name)
    by_class = {c: [] for c in class_names}
    for r in records:
        if r.class_name not in by_class:
            raise DataError(f"record {r.image_id!r} has unknown class {r.class_name!r}")
        by_class[r.class_name].append(r)
    rng = np.random.default_rng(seed)
    out = []
    for c in class_names:
        group = by_class[c]
        if len(group) < 3:
            raise DataError(f"class {c!r} has {len(group)} records; splitting needs at least 3")
        n_train, n_val, _ = split_counts(len(group), fractions)
        order = rng.permutation(len(group))
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            out.append(replace(group[idx], split=split))
    out.sort(key=lambda r: (class_names.index(r.class_name), r.image_id))
    return DatasetManifest(out, list(class_names), Path(root))


# -- images ------------------------------------------------------------------

def _threads():
    try:
        return max(1, int(os.environ.get("ILLU_THREADS", "1")))
    except ValueError:
        raise ConfigError("ILLU_THREADS must be an integer") from None


def read_rgb(path):
    """8-bit RGB pixels ``[H, W, 3]`` as float32 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return arr / np.float32(255.0)


def compute_mean_rgb(manifest, records=None):
    """Per-channel mean in [0, 1] units over the training records."""
    records = manifest.subset("train") if records is None else records
    if not records:
        raise DataError("cannot compute the mean RGB of an empty training split")
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for r in records:
        px = read_rgb(manifest.resolve(r)).astype(np.float64)
        total += px.reshape(-1, 3).sum(axis=0)
        count += px.shape[0] * px.shape[1]
    return (total / count).astype(np.float32)


def preprocess(pixels, mean_rgb):
    """``[H, W, 3]`` pixels in [0, 1] -> mean-subtracted ``[3, H, W]`` float32."""
    x = np.asarray(pixels, dtype=np.float32) - np.asarray(mean_rgb, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def load_images(manifest, records, mean_rgb, side, root=None):
    """Preprocessed ``[N, 3, side, side]`` batch for ``records``, in record order."""
    base = Path(root) if root is not None else Path(manifest.root)

    def one(r):
        path = base / r.path
        px = read_rgb(path)
        if px.shape[:2] != (side, side):
            raise DataError(f"image {path} is {px.shape[1]}x{px.shape[0]}, expected {side}x{side}")
        return preprocess(px, mean_rgb)

    out = np.empty((len(records), 3, side, side), dtype=np.float32)
    with ThreadPoolExecutor(_threads()) as pool:
        for i, img in enumerate(pool.map(one, records)):
            out[i] = img
    return out


def label_indices(records, class_names):
    index = {c: i for i, c in enumerate(class_names)}
    try:
        return np.array([index[r.class_name] for r in records], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"class {exc.args[0]!r} is not one of the network's classes") from None


# -- synthetic generator -----------------------------------------------------

@dataclass
class SyntheticConfig:
    num_classes: int = 6
    per_class: int = 200
    side: int = 64
    domain: str = "natural"
    label_noise: float = 0.0
    seed: int = 0
    fractions: tuple = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.side <= 0 or self.side % 32:
            raise ConfigError(f"image side {self.side} must be a positive multiple of 32")
        if not 2 <= self.num_classes <= len(SHAPE_KINDS):
            raise ConfigError(f"num_classes must be in [2, {len(SHAPE_KINDS)}]")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ConfigError(f"label noise rate must be in [0, 1], got {self.label_noise}")
        if self.per_class < 3:
            raise ConfigError("need at least 3 images per class")

    @property
    def class_names(self):
        return list(SHAPE_KINDS[: self.num_classes])


def _polygon_inside(px, py, verts):
    """Even-odd point-in-polygon test, vectorized over pixel coordinates."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for k in range(n):
        x0, y0 = verts[k]
        x1, y1 = verts[(k + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < xint)
    return inside


def _regular(n, radius, phase=-math.pi / 2):
    return [(radius * math.cos(phase + 2 * math.pi * k / n), radius * math.sin(phase + 2 * math.pi * k / n))
            for k in range(n)]


def _star(points=5, outer=0.95, inner=0.42):
    verts = []
    for k in range(2 * points):
        r = outer if k % 2 == 0 else inner
        a = -math.pi / 2 + math.pi * k / points
        verts.append((r * math.cos(a), r * math.sin(a)))
    return verts


def shape_mask(kind, side, geometry):
    """Binary mask of one shape; ``geometry`` = (angle, radius_px, cx, cy)."""
    angle, radius, cx, cy = geometry
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = (ca * dx + sa * dy) / radius
    v = (-sa * dx + ca * dy) / radius
    r = np.hypot(u, v)
    if kind == "disk":
        return r <= 0.8
    if kind == "ring":
        return (r <= 0.9) & (r >= 0.55)
    if kind == "triangle":
        return _polygon_inside(u, v, _regular(3, 1.0))
    if kind == "cross":
        return ((np.abs(u) <= 0.28) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.28) & (np.abs(u) <= 0.9))
    if kind == "bar":
        return (np.abs(u) <= 0.95) & (np.abs(v) <= 0.3)
    if kind == "star":
        return _polygon_inside(u, v, _star())
    if kind == "square":
        return (np.abs(u) <= 0.65) & (np.abs(v) <= 0.65)
    if kind == "crescent":
        return (r <= 0.85) & (np.hypot(u - 0.4, v) > 0.65)
    raise ConfigError(f"unknown shape kind {kind!r}")


def sample_geometry(rng, side):
    angle = rng.uniform(-math.pi / 6, math.pi / 6)
    radius = side * rng.uniform(0.26, 0.38)
    cx = side / 2 + rng.uniform(-0.08, 0.08) * side
    cy = side / 2 + rng.uniform(-0.08, 0.08) * side
    return angle, radius, cx, cy


def _contrasting_color(rng, against, min_dist=0.45):
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, 3)
        if np.linalg.norm(c - against) >= min_dist:
            return c
    return 1.0 - against


def render_natural(mask, rng):
    side = mask.shape[0]
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    # light-to-mid backgrounds, nearer the illustrations' white ground
    c0, c1 = rng.uniform(0.55, 1.0, 3), rng.uniform(0.55, 1.0, 3)
    gx, gy = rng.uniform(0, side, 2)
    t = np.clip(np.hypot(xx - gx, yy - gy) / (0.9 * side), 0.0, 1.0)[..., None]
    bg = c0 * (1 - t) + c1 * t
    fill = _contrasting_color(rng, bg.reshape(-1, 3).mean(axis=0))
    texture = fill + rng.normal(0.0, 0.12, (side, side, 3))
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 1.0)[..., None]
    img = bg * (1 - soft) + texture * soft + rng.normal(0.0, 0.02, (side, side, 3))
    return np.clip(img, 0.0, 1.0)


def render_illustration(mask, rng):
    side = mask.shape[0]
    fill = rng.uniform(0.35, 1.0, 3)
    img = np.ones((side, side, 3))
    img[mask] = fill
    outline = mask & ~ndimage.binary_erosion(mask)
    img[outline] = rng.uniform(0.0, 0.15)
    return img


def _to_u8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _render_one(cfg, kind, class_idx, i):
    geo_rng = np.random.default_rng([cfg.seed, class_idx, i, 0])
    mask = shape_mask(kind, cfg.side, sample_geometry(geo_rng, cfg.side))
    style_rng = np.random.default_rng([cfg.seed, class_idx, i, 1 + DOMAINS.index(cfg.domain)])
    render = render_natural if cfg.domain == "natural" else render_illustration
    return _to_u8(render(mask, style_rng))


def generate_synthetic(cfg, out_dir):
    """Render ``cfg.per_class`` images per class into ``out_dir`` and write
    ``out_dir/manifest.tsv``.

    Shape geometry depends only on (seed, class, index), so both domains
    generated with one seed draw identical masks.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for kind in cfg.class_names:
            (out_dir / kind).mkdir(exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc.strerror}") from None
    jobs = [(kind, ci, i) for ci, kind in enumerate(cfg.class_names) for i in range(cfg.per_class)]

    def work(job):
        kind, ci, i = job
        rel = f"{kind}/{kind}-{i:04d}.png"
        try:
            Image.fromarray(_render_one(cfg, kind, ci, i), "RGB").save(out_dir / rel, format="PNG")
        except OSError as exc:
            raise DataError(f"cannot write image {out_dir / rel}: {exc.strerror}") from None
        return Record(f"{kind}-{i:04d}", rel, kind)

    with ThreadPoolExecutor(_threads()) as pool:
        records = list(pool.map(work, jobs))
    manifest = split_manifest(records, cfg.fractions, cfg.seed, cfg.class_names, out_dir)
    if cfg.label_noise > 0:
        manifest = inject_label_noise(manifest, cfg.label_noise, cfg.seed)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def inject_label_noise(manifest, rate, seed):
    """Relabel a ``rate`` fraction of train records uniformly at random over all classes."""
    rng = np.random.default_rng([seed, 0x4E01])
    train_idx = [i for i, r in enumerate(manifest.records) if r.split == "train"]
    n_noisy = _round_half_up(rate * len(train_idx))
    chosen = rng.choice(len(train_idx), size=n_noisy, replace=False) if n_noisy else []
    records = list(manifest.records)
    for j in sorted(int(c) for c in chosen):
        i = train_idx[j]
        records[i] = replace(records[i], class_name=manifest.class_names[rng.integers(len(manifest.class_names))])
    return DatasetManifest(records, list(manifest.class_names), manifest.root)
