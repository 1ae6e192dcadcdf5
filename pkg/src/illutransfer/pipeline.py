"""End-to-end four-model comparison on synthetic natural/illustration data.

Every stage writes its artifact under one output directory; a rerun with the
same settings reproduces each file byte for byte.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import svm as S
from .dataset import SyntheticConfig, generate_synthetic, compute_mean_rgb, label_indices, load_images
from .network import ScaleConfig, NeuralCodes, codes_from_images, predict_proba, save_checkpoint
from .tensor import TrainConfig
from .transfer import apply_policy, finetune, parse_policy, train_from_scratch

DEFAULT_POLICY = "reset=1-10,17-19; lr.reset=1e-2; lr.keep=1e-4"
# desk-scale recipe: small batches and no dropout let the plain 19-layer net
# leave the chance plateau within a few epochs
BASELINE_TRAIN = TrainConfig(batch_size=16, base_lr=3e-3, dropout_p=0.0, max_epochs=10, patience=8)
FINETUNE_TRAIN = TrainConfig(batch_size=16, base_lr=1e-2, dropout_p=0.0, max_epochs=10, patience=8)


@dataclass
class PipelineSettings:
    seed: int = 1
    num_classes: int = 6
    per_class: int = 200
    side: int = 64
    label_noise: float = 0.0
    baseline: TrainConfig = BASELINE_TRAIN
    finetune: TrainConfig = FINETUNE_TRAIN
    policy: str = DEFAULT_POLICY
    grid: list = field(default_factory=lambda: list(S.DEFAULT_GRID))
    folds: int = 3
    standardize: bool = False
    tsne_iterations: int = 1000
    perplexity: float = 30.0


@dataclass
class PipelineResult:
    illustration: dict  # model row -> (top1, top5) on the illustration test split
    natural: dict       # "Baseline" / "Optimized" -> (top1, top5) on the natural test split
    purity: dict        # "Baseline" / "Optimized" / "Random" -> neighbor purity
    kl_trace: list
    timings: dict


def _split(manifest, name, mean, side):
    rec = manifest.subset(name)
    return load_images(manifest, rec, mean, side), label_indices(rec, manifest.class_names), rec


def _softmax_preds(net, images, labels, class_names, ids):
    return E.PredictionSet.from_scores(predict_proba(net, images), labels, class_names, ids)


def _svm_stage(codes_tr, y_tr, codes_te, y_te, class_names, ids_te, st, out, tag):
    grid = S.grid_search(codes_tr, y_tr, st.grid, folds=st.folds, seed=st.seed,
                         num_classes=len(class_names), standardize=st.standardize) if len(st.grid) > 1 else None
    kind, C, gamma = grid.best if grid else st.grid[0]
    if grid:
        (out / f"grid_{tag}.tsv").write_text(grid.to_text(), encoding="utf-8")
    model = S.train_ovr(codes_tr, y_tr, S.KernelSpec(kind, gamma), C, class_names,
                        standardize=st.standardize)
    S.save_model(model, out / f"svm_{tag}.nnsv")
    return E.PredictionSet.from_scores(model.scores(codes_te), y_te, class_names, ids_te)


def _score(preds):
    return (E.topk_precision(preds, 1), E.topk_precision(preds, min(5, len(preds.class_names))))


def run_pipeline(settings, out_dir, log=None):
    """Baseline on natural data, adaptive fine-tune on illustrations, SVMs on both
    sets of neural codes, then the comparison table and t-SNE diagnostics."""
    st = settings
    say = log or (lambda s: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()

    def lap(name):
        nonlocal t0
        now = time.perf_counter()
        timings[name] = now - t0
        t0 = now

    nat = generate_synthetic(SyntheticConfig(st.num_classes, st.per_class, st.side, "natural",
                                             0.0, st.seed), out / "natural")
    ill = generate_synthetic(SyntheticConfig(st.num_classes, st.per_class, st.side, "illustration",
                                             st.label_noise, st.seed), out / "illustration")
    classes = nat.class_names
    mean = compute_mean_rgb(nat, nat.subset("train"))
    n_tr, n_y, _ = _split(nat, "train", mean, st.side)
    n_va, n_vy, _ = _split(nat, "val", mean, st.side)
    n_te, n_ty, n_rec = _split(nat, "test", mean, st.side)
    i_tr, i_y, i_trrec = _split(ill, "train", mean, st.side)
    i_va, i_vy, _ = _split(ill, "val", mean, st.side)
    i_te, i_ty, i_rec = _split(ill, "test", mean, st.side)
    lap("data")

    scale = ScaleConfig(input_side=st.side)
    base, rep = train_from_scratch(scale, (n_tr, n_y), (n_va, n_vy), replace(st.baseline, seed=st.seed),
                                   classes, mean, log=lambda s: say("baseline " + s))
    save_checkpoint(base, out / "baseline.nnck")
    (out / "baseline_train.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    lap("baseline")

    policy = parse_policy(st.policy, base.num_layers)
    opt = apply_policy(base, policy, st.seed, classes)
    opt, rep = finetune(opt, (i_tr, i_y), (i_va, i_vy), replace(st.finetune, seed=st.seed), policy,
                        log=lambda s: say("finetune " + s))
    save_checkpoint(opt, out / "optimized.nnck")
    (out / "finetune.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    lap("finetune")

    ids_te = [r.image_id for r in i_rec]
    codes = {}
    for tag, net in (("baseline", base), ("optimized", opt)):
        codes[tag] = (codes_from_images(net, i_tr), codes_from_images(net, i_te))
        NeuralCodes(codes[tag][0], [r.image_id for r in i_trrec]).write_tsv(out / f"codes_{tag}_train.tsv")
        NeuralCodes(codes[tag][1], ids_te).write_tsv(out / f"codes_{tag}_test.tsv")
    lap("codes")

    preds = {
        "Baseline": _softmax_preds(base, i_te, i_ty, classes, ids_te),
        "Baseline+SVM": _svm_stage(*codes["baseline"][:1], i_y, codes["baseline"][1], i_ty,
                                   classes, ids_te, st, out, "baseline"),
        "Optimized": _softmax_preds(opt, i_te, i_ty, classes, ids_te),
        "Optimized+SVM": _svm_stage(*codes["optimized"][:1], i_y, codes["optimized"][1], i_ty,
                                    classes, ids_te, st, out, "optimized"),
    }
    lap("svm")
    for name, p in preds.items():
        slug = name.lower().replace("+", "_")
        p.write_tsv(out / f"predictions_{slug}.tsv")
        rep = E.per_class_report(p)
        (out / f"report_{slug}.tsv").write_text(rep.to_tsv(), encoding="utf-8")
        (out / f"confusion_{slug}.tsv").write_text(rep.confusion_tsv(), encoding="utf-8")
    illu = {name: _score(p) for name, p in preds.items()}
    (out / "comparison.tsv").write_text(E.comparison_table(illu), encoding="utf-8")

    nat_ids = [r.image_id for r in n_rec]
    natural = {
        "Baseline": _score(_softmax_preds(base, n_te, n_ty, classes, nat_ids)),
        "Optimized": _score(_softmax_preds(opt, n_te, n_ty, classes, nat_ids)),
    }
    (out / "natural.tsv").write_text(E.comparison_table(natural), encoding="utf-8")
    lap("eval")

    purity, kl = {}, []
    for tag, name in (("baseline", "Baseline"), ("optimized", "Optimized")):
        emb = E.tsne_embed(codes[tag][1], st.perplexity, st.tsne_iterations, st.seed)
        emb.write_tsv(out / f"embedding_{tag}.tsv", ids_te, [classes[i] for i in i_ty])
        purity[name] = E.neighbor_purity(emb, i_ty)
        if tag == "optimized":
            kl = emb.kl_trace
            shuffled = np.random.default_rng([st.seed, 0xC0]).permutation(i_ty)
            purity["Random"] = E.neighbor_purity(emb, shuffled)
    (out / "purity.tsv").write_text(
        "model\tpurity\n" + "".join(f"{k}\t{v:.6f}\n" for k, v in purity.items()), encoding="utf-8")
    lap("tsne")
    return PipelineResult(illu, natural, purity, kl, timings)
