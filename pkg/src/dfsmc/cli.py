"""``dfsmc`` command line.

Every subcommand reads its inputs, writes only to the paths it is given and
exits 0 on success, 2 on a usage error and 3 on a data or contract error
(one line on stderr). A ``--config`` key=value file supplies defaults; flags
given on the command line win.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from dfsmc import synth
from dfsmc.augment import augment_split
from dfsmc.config import RunConfig, load_config
from dfsmc.errors import DfsmcError
from dfsmc.ingest import (TEST, TRAIN, bytes_to_image, build_manifest, read_image, read_manifest,
                          stratified_split, write_image, write_manifest)
from dfsmc.models import (ARCHS, ModelConfig, TrainHyper, build_model, load_inputs, load_weights,
                          predict_logits, replace_head, save_weights, train_model)
from dfsmc.pipeline import (ARCH_SOURCE, compare_report, dfsmc_evaluate, dfsmc_predict, evaluate,
                            feature_matrix, fuse_matrices, read_cache, write_cache, write_report)
from dfsmc.svm import load_svm, save_svm, train_multiclass

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.override(**{k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__})


def _need(value, flag: str):
    if value in (None, ""):
        raise DfsmcError(f"{flag} is required (on the command line or in the config file)")
    return value


def _out(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_convert(args, cfg: RunConfig) -> int:
    src, dst = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise DfsmcError(f"{src}: not a directory")
    count = 0
    for path in sorted(p for p in src.rglob("*") if p.is_file()):
        rel = path.relative_to(src)
        try:
            img = bytes_to_image(path.read_bytes())
        except DfsmcError as exc:
            raise DfsmcError(f"{path}: {exc}") from None
        target = dst / rel.parent / (rel.name + ".pgm")
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(img, target)
        count += 1
    print(f"converted {count} files into {dst}")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    data = _need(args.data or cfg.data, "--data")
    manifest = stratified_split(build_manifest(data), cfg.ratio, cfg.seed)
    write_manifest(manifest, _out(args.out))
    print(f"{len(manifest.subset(TRAIN))} train / {len(manifest.subset(TEST))} test "
          f"over {manifest.family_count} families -> {args.out}")
    return EXIT_OK


def cmd_augment(args, cfg: RunConfig) -> int:
    src = Path(args.manifest)
    out = Path(args.out) if args.out else src.with_name(src.stem + ".augmented.tsv")
    if out.resolve() == src.resolve():
        raise DfsmcError("--out must differ from --manifest")
    manifest = augment_split(read_manifest(src), cfg.copies, cfg.seed)
    write_manifest(manifest, _out(out))
    print(f"{len(manifest.subset(TRAIN))} train records after augmentation -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = read_manifest(args.manifest)
    hyper = TrainHyper(cfg.lr, cfg.momentum, cfg.epochs, cfg.batch_size, cfg.seed)
    if args.scheme == "scratch":
        if args.source_weights or args.freeze:
            raise DfsmcError("--source-weights/--freeze only apply to --scheme finetune")
        model = build_model(args.arch, ModelConfig(input_size=cfg.input_size, classes=manifest.family_count,
                                                   feature_dim=cfg.feature_dim, seed=cfg.seed))
    else:
        source = load_weights(_need(args.source_weights, "--source-weights"), arch=args.arch)
        model = replace_head(source, manifest.family_count, freeze=args.freeze, seed=cfg.seed)
        hyper = TrainHyper(cfg.lr * cfg.finetune_lr_factor, cfg.momentum, cfg.epochs,
                           cfg.batch_size, cfg.seed)
    result = train_model(model, manifest, hyper)
    save_weights(model, _out(args.out))
    for epoch, loss in enumerate(result.loss_curve, start=1):
        print(f"epoch {epoch} loss {loss:.6f}")
    print(f"train accuracy {result.train_accuracy:.4f} -> {args.out}")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig) -> int:
    model = load_weights(args.weights)
    manifest = read_manifest(args.manifest)
    records = manifest.records if args.split == "all" else manifest.subset(args.split)
    x = load_inputs(manifest, records, model.config.input_size)
    labels = [r.family_index for r in records]
    write_cache(_out(args.out), labels, feature_matrix(model, x).reshape(len(records), -1),
                ARCH_SOURCE[model.arch])
    print(f"{len(records)} x {model.feature_dim} {ARCH_SOURCE[model.arch]} features -> {args.out}")
    return EXIT_OK


def cmd_fuse_svm(args, cfg: RunConfig) -> int:
    yr, fr, sr = read_cache(args.resnet_cache)
    yd, fd, sd = read_cache(args.densenet_cache)
    if (sr, sd) != ("resnet", "densenet"):
        raise DfsmcError(f"expected resnet and densenet caches, got {sr or '?'} and {sd or '?'}")
    if not np.array_equal(yr, yd):
        raise DfsmcError("the two caches do not list the same samples in the same order")
    svm = train_multiclass(fuse_matrices(fr, fd), yr, cfg.C, seed=cfg.seed)
    save_svm(svm, _out(args.out))
    print(f"{svm.class_count}-class svm on {svm.dim} fused features -> {args.out}")
    return EXIT_OK


def _pair(args):
    return load_weights(args.resnet_weights, "mini-resnet"), load_weights(args.densenet_weights, "mini-densenet")


def cmd_predict(args, cfg: RunConfig) -> int:
    svm = load_svm(args.svm)
    r, d = _pair(args)
    idx, margins = dfsmc_predict(svm, r, d, read_image(args.image))
    print(f"class {idx}")
    print("margins " + " ".join(format(float(m), ".6g") for m in margins))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    svm = load_svm(args.svm)
    r, d = _pair(args)
    manifest = read_manifest(args.manifest)
    report = dfsmc_evaluate(svm, manifest, r, d, args.split)
    out = write_report(report, args.out)
    # softmax heads of the two extractors, for the comparison table
    records = manifest.subset(args.split)
    x = load_inputs(manifest, records, r.config.input_size)
    truths = np.array([rec.family_index for rec in records], dtype=np.intp)
    names = manifest.family_names()
    reports = {"dfsmc": report}
    for label, model in (("mini-resnet", r), ("mini-densenet", d)):
        if model.class_count == manifest.family_count and len(records):
            reports[label] = evaluate(predict_logits(model, x).argmax(axis=1), truths,
                                      manifest.family_count, names)
    compare_report(reports, out / "comparison.csv")
    for k, v in report.summary().items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from dfsmc.gradcheck import run_suite

    reports = run_suite(cfg.seed)
    for rep in reports:
        print(rep.line())
    failed = [rep.name for rep in reports if not rep.passed]
    if failed:
        raise DfsmcError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if args.binaries:
        for fam in range(args.families):
            rng = synth.rng_for(cfg.seed, "synth-binaries", fam)
            d = out / f"family{fam:02d}"
            d.mkdir(parents=True, exist_ok=True)
            for i in range(args.per_class):
                (d / f"sample{i:04d}.bin").write_bytes(synth.synthetic_binary(fam, rng))
    else:
        families = synth.TEXTURE_FAMILIES[:args.families]
        images, labels = synth.texture_dataset(args.per_class, cfg.input_size, cfg.seed, families)
        synth.write_family_tree(out, images, labels, list(families))
    print(f"wrote {args.families} x {args.per_class} samples under {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int)

    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--lr", type=float)
    hyper.add_argument("--momentum", type=float)
    hyper.add_argument("--epochs", type=int)
    hyper.add_argument("--batch-size", dest="batch_size", type=int)
    hyper.add_argument("--feature-dim", dest="feature_dim", type=int)
    hyper.add_argument("--input-size", dest="input_size", type=int)

    parser = argparse.ArgumentParser(prog="dfsmc", description="Fused-feature image classifier for binaries.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("convert", parents=[common], help="binaries -> grayscale PGM images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("split", parents=[common], help="build a stratified train/test manifest")
    p.add_argument("--data")
    p.add_argument("--ratio", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", parents=[common], help="add affine copies of the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--copies", type=int)
    p.add_argument("--out", help="augmented manifest (default <manifest>.augmented.tsv)")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common, hyper], help="train one extractor")
    p.add_argument("--arch", choices=ARCHS, required=True)
    p.add_argument("--scheme", choices=("scratch", "finetune"), default="scratch")
    p.add_argument("--source-weights", dest="source_weights")
    p.add_argument("--freeze", action="store_true", help="finetune: train the new head only")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("features", parents=[common], help="write a feature cache CSV")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=(TRAIN, TEST, "all"), default=TRAIN)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("fuse-svm", parents=[common], help="fit the SVM on concatenated caches")
    p.add_argument("--resnet-cache", dest="resnet_cache", required=True)
    p.add_argument("--densenet-cache", dest="densenet_cache", required=True)
    p.add_argument("--C", dest="C", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse_svm)

    for name, helptext in (("predict", "classify one image"), ("eval", "evaluate a manifest split")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--svm", required=True)
        p.add_argument("--resnet-weights", dest="resnet_weights", required=True)
        p.add_argument("--densenet-weights", dest="densenet_weights", required=True)
        if name == "predict":
            p.add_argument("--image", required=True)
            p.set_defaults(func=cmd_predict)
        else:
            p.add_argument("--manifest", required=True)
            p.add_argument("--split", choices=(TRAIN, TEST), default=TEST)
            p.add_argument("--out", required=True)
            p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="write a procedural demo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--families", type=int, default=len(synth.TEXTURE_FAMILIES))
    p.add_argument("--per-class", dest="per_class", type=int, default=20)
    p.add_argument("--input-size", dest="input_size", type=int)
    p.add_argument("--binaries", action="store_true", help="fake binaries instead of images")
    p.set_defaults(func=cmd_synth)
    return parser


def _thread_limit():
    raw = os.environ.get("DFSMC_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise DfsmcError(f"DFSMC_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise DfsmcError("DFSMC_THREADS must be >= 0")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth" and not args.binaries and args.families > len(synth.TEXTURE_FAMILIES):
            parser.error(f"--families is at most {len(synth.TEXTURE_FAMILIES)} for image data")
        cfg = _config(args)
        limiter = _thread_limit()
        try:
            return args.func(args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (DfsmcError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dfsmc {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
