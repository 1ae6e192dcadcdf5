"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation as E
from . import svm as S
from .dataset import (DatasetManifest, SyntheticConfig, compute_mean_rgb, generate_synthetic,
                      label_indices, load_images, map_to_classes, preprocess, read_rgb,
                      records_from_mapping, split_manifest)
from .errors import ConfigError, DataError, IlluError
from .network import (NeuralCodes, ScaleConfig, codes_from_images, load_checkpoint, predict_proba,
                      save_checkpoint)
from .pipeline import BASELINE_TRAIN, DEFAULT_POLICY, FINETUNE_TRAIN, PipelineSettings, run_pipeline
from .transfer import apply_policy, finetune, parse_policy, train_from_scratch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _manifest(path):
    return DatasetManifest.read(_existing(path, "manifest"))


def _checkpoint(path):
    return load_checkpoint(_existing(path, "checkpoint"))


def _fractions(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"fractions must be comma-separated numbers, got {text!r}") from None


def _split_data(net, manifest, split):
    rec = manifest.subset(split)
    if not rec:
        raise ConfigError(f"manifest has no {split!r} records")
    images = load_images(manifest, rec, net.mean_rgb, net.scale.input_side)
    return images, label_indices(rec, net.class_names), rec


def _train_cfg(args, base):
    cfg = replace(base, seed=args.seed)
    for flag, name in (("epochs", "max_epochs"), ("lr", "base_lr"), ("batch_size", "batch_size"),
                       ("dropout", "dropout_p"), ("patience", "patience")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    return cfg


def _log(args):
    return None if args.quiet else (lambda s: print(s, file=sys.stderr, flush=True))


# -- subcommands -------------------------------------------------------------

def cmd_gen(args):
    out = Path(args.out)
    for domain in ("natural", "illustration"):
        noise = args.label_noise if domain == "illustration" else 0.0
        cfg = SyntheticConfig(args.classes, args.per_class, args.side, domain, noise, args.seed,
                              _fractions(args.fractions))
        m = generate_synthetic(cfg, out / domain)
        print(f"{domain}\t{len(m.records)} images\t{len(m.class_names)} classes\t{out / domain / 'manifest.tsv'}")


def cmd_map(args):
    names_path = _existing(args.names, "image name list")
    classes_path = _existing(args.classes, "class list")
    names = [l.strip() for l in names_path.read_text(encoding="utf-8").splitlines() if l.strip()]
    classes = [l.strip() for l in classes_path.read_text(encoding="utf-8").splitlines() if l.strip()]
    mapping = map_to_classes(names, classes)
    text = mapping.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.manifest_out:
        records = records_from_mapping(mapping, args.image_dir or "")
        used = [c for c in classes if any(r.class_name == c for r in records)]
        split_manifest(records, _fractions(args.fractions), args.seed, used,
                       Path(args.manifest_out).parent).write(args.manifest_out)


def cmd_split(args):
    m = _manifest(args.manifest)
    out = split_manifest(m.records, _fractions(args.fractions), args.seed, m.class_names, m.root)
    out.write(args.out)


def cmd_train(args):
    m = _manifest(args.manifest)
    scale = ScaleConfig(input_side=args.side, base_width=args.base_width)
    mean = compute_mean_rgb(m, m.subset("train"))
    side = scale.input_side
    tr = load_images(m, m.subset("train"), mean, side), label_indices(m.subset("train"), m.class_names)
    va = load_images(m, m.subset("val"), mean, side), label_indices(m.subset("val"), m.class_names)
    net, rep = train_from_scratch(scale, tr, va, _train_cfg(args, BASELINE_TRAIN), m.class_names, mean,
                                  log=_log(args))
    save_checkpoint(net, args.out)
    if args.report:
        Path(args.report).write_text(rep.to_tsv(), encoding="utf-8")


def cmd_finetune(args):
    net = _checkpoint(args.checkpoint)
    m = _manifest(args.manifest)
    policy = parse_policy(args.policy, net.num_layers)
    net = apply_policy(net, policy, args.seed, m.class_names)
    tr = _split_data(net, m, "train")[:2]
    va = _split_data(net, m, "val")[:2]
    net, rep = finetune(net, tr, va, _train_cfg(args, FINETUNE_TRAIN), policy, log=_log(args))
    save_checkpoint(net, args.out)
    if args.report:
        Path(args.report).write_text(rep.to_tsv(), encoding="utf-8")


def cmd_codes(args):
    net = _checkpoint(args.checkpoint)
    m = _manifest(args.manifest)
    images, _, rec = _split_data(net, m, args.split)
    NeuralCodes(codes_from_images(net, images), [r.image_id for r in rec]).write_tsv(args.out)


def _codes_labels(codes_path, manifest):
    codes = NeuralCodes.read_tsv(_existing(codes_path, "codes file"))
    by_id = {r.image_id: r for r in manifest.records}
    missing = [i for i in codes.ids if i not in by_id]
    if missing:
        raise DataError(f"code id {missing[0]!r} not in manifest")
    return codes, label_indices([by_id[i] for i in codes.ids], manifest.class_names)


def cmd_svm(args):
    m = _manifest(args.manifest)
    codes, labels = _codes_labels(args.codes, m)
    if args.grid:
        grid = S.read_grid(_existing(args.grid, "grid file"))
        result = S.grid_search(codes.matrix, labels, grid, folds=args.folds, seed=args.seed,
                               num_classes=len(m.class_names), standardize=args.standardize)
        kind, C, gamma = result.best
        if args.grid_report:
            Path(args.grid_report).write_text(result.to_text(), encoding="utf-8")
    else:
        kind, C, gamma = args.kernel, args.C, args.gamma
    model = S.train_ovr(codes.matrix, labels, S.KernelSpec(kind, gamma), C, m.class_names,
                        standardize=args.standardize)
    S.save_model(model, args.out)
    print(f"{kind}\tC={C!r}\tgamma={gamma!r}")


def cmd_predict(args):
    net = _checkpoint(args.checkpoint)
    model = S.load_model(_existing(args.svm, "SVM model")) if args.svm else None

    def scores(images):
        return model.scores(codes_from_images(net, images)) if model else predict_proba(net, images)

    if args.image:
        img = preprocess(read_rgb(_existing(args.image, "image")), net.mean_rgb)[None]
        order = S.rank_scores(scores(img))[0][: args.k]
        for rank, i in enumerate(order, 1):
            print(f"{rank}\t{net.class_names[i]}")
        return
    if not (args.manifest and args.out):
        raise ConfigError("predict needs --image, or --manifest and --out")
    m = _manifest(args.manifest)
    images, labels, rec = _split_data(net, m, args.split)
    E.PredictionSet.from_scores(scores(images), labels, net.class_names,
                                [r.image_id for r in rec]).write_tsv(args.out)


def cmd_eval(args):
    preds = E.PredictionSet.read_tsv(_existing(args.predictions, "predictions file"))
    rep = E.per_class_report(preds, top=args.k)
    if args.out:
        Path(args.out).write_text(rep.to_tsv(), encoding="utf-8")
    if args.confusion:
        Path(args.confusion).write_text(rep.confusion_tsv(), encoding="utf-8")
    print(f"top1\t{E.topk_precision(preds, 1):.2f}")
    print(f"top{args.k}\t{E.topk_precision(preds, args.k):.2f}")


def cmd_embed(args):
    m = _manifest(args.manifest)
    codes, labels = _codes_labels(args.codes, m)
    emb = E.tsne_embed(codes.matrix, args.perplexity, args.iterations, args.seed)
    emb.write_tsv(args.out, codes.ids, [m.class_names[i] for i in labels])
    print(f"kl\t{emb.kl_trace[-1]:.6f}")
    print(f"purity\t{E.neighbor_purity(emb, labels, args.k):.6f}")


def cmd_report(args):
    results = {}
    for name, path in (("Baseline", args.baseline), ("Baseline+SVM", args.baseline_svm),
                       ("Optimized", args.optimized), ("Optimized+SVM", args.optimized_svm)):
        if path:
            p = E.PredictionSet.read_tsv(_existing(path, "predictions file"))
            results[name] = (E.topk_precision(p, 1), E.topk_precision(p, min(5, len(p.class_names))))
    if not results:
        raise ConfigError("report needs at least one predictions file")
    text = E.comparison_table(results)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_pipeline(args):
    st = PipelineSettings(seed=args.seed, num_classes=args.classes, per_class=args.per_class,
                          side=args.side, label_noise=args.label_noise, policy=args.policy,
                          tsne_iterations=args.tsne_iterations)
    if args.epochs is not None:
        st.baseline = replace(st.baseline, max_epochs=args.epochs)
        st.finetune = replace(st.finetune, max_epochs=args.epochs)
    if args.grid:
        st.grid = S.read_grid(_existing(args.grid, "grid file"))
    result = run_pipeline(st, args.out, log=_log(args))
    sys.stdout.write(E.comparison_table(result.illustration))


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="illu", description="Cross-domain transfer learning pipeline.")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def training_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--dropout", type=float)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--report", help="per-epoch training report TSV")

    sp = add("gen", cmd_gen, "render the synthetic natural and illustration datasets")
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--side", type=int, default=64)
    sp.add_argument("--label-noise", type=float, default=0.0)
    sp.add_argument("--fractions", default="0.64,0.16,0.20")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("map", cmd_map, "map image names to classes by shared words")
    sp.add_argument("--names", required=True, help="file with one image name per line")
    sp.add_argument("--classes", required=True, help="file with one class name per line")
    sp.add_argument("--out")
    sp.add_argument("--manifest-out")
    sp.add_argument("--image-dir")
    sp.add_argument("--fractions", default="0.64,0.16,0.20")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("split", cmd_split, "reassign stratified train/val/test splits")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--fractions", default="0.64,0.16,0.20")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the baseline network from scratch")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--side", type=int, default=64)
    sp.add_argument("--base-width", type=int, default=8)
    training_flags(sp)

    sp = add("finetune", cmd_finetune, "adapt a checkpoint to a new domain")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--policy", default=DEFAULT_POLICY)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    training_flags(sp)

    sp = add("codes", cmd_codes, "extract neural codes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out", required=True)

    sp = add("svm", cmd_svm, "train a one-vs-rest SVM on neural codes")
    sp.add_argument("--codes", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--grid", help="grid file, one 'kernel C gamma' per line")
    sp.add_argument("--grid-report")
    sp.add_argument("--folds", type=int, default=3)
    sp.add_argument("--kernel", default="rbf", choices=S.KERNELS)
    sp.add_argument("--C", type=float, default=1.0)
    sp.add_argument("--gamma", type=float, default=1e-4)
    sp.add_argument("--standardize", action="store_true", help="z-score code features before training")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "rank classes for images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--svm")
    sp.add_argument("--image")
    sp.add_argument("--manifest")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out")

    sp = add("eval", cmd_eval, "top-k precision and per-class report")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out")
    sp.add_argument("--confusion")

    sp = add("embed", cmd_embed, "t-SNE embedding and neighbor purity")
    sp.add_argument("--codes", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--perplexity", type=float, default=30.0)
    sp.add_argument("--iterations", type=int, default=1000)
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("report", cmd_report, "merge predictions into the four-model comparison table")
    sp.add_argument("--baseline")
    sp.add_argument("--baseline-svm")
    sp.add_argument("--optimized")
    sp.add_argument("--optimized-svm")
    sp.add_argument("--out")

    sp = add("pipeline", cmd_pipeline, "run the whole four-model comparison")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--side", type=int, default=64)
    sp.add_argument("--label-noise", type=float, default=0.0)
    sp.add_argument("--policy", default=DEFAULT_POLICY)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--grid")
    sp.add_argument("--tsne-iterations", type=int, default=1000)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except IlluError as exc:
        print(f"illu: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"illu: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
