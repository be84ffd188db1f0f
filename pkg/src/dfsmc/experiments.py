"""Desk-scale experiments on procedural data.

``run_end_to_end`` drives the whole file-based flow (image tree, manifest,
split, optional augmentation, two extractors, fused SVM, reports) and is what
the reproducibility and accuracy checks call. ``run_fusion`` trains each
extractor on one half of a two-cue image so that neither feature space alone
can name all four classes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfsmc import synth
from dfsmc.augment import augment_split
from dfsmc.ingest import TEST, build_manifest, stratified_split, write_manifest
from dfsmc.models import (ARCHS, ModelConfig, TrainHyper, build_model, fit_arrays, load_inputs,
                          predict_logits, preprocess, save_weights, train_model)
from dfsmc.pipeline import (SvmConfig, dfsmc_evaluate, dfsmc_train, evaluate, feature_matrix,
                            write_report)
from dfsmc.rng import rng_for
from dfsmc.svm import save_svm, train_multiclass

END_TO_END_FAMILIES = ("h-stripes", "v-stripes", "checker", "noise", "blobs")


@dataclass(frozen=True)
class EndToEndConfig:
    per_class: int = 100
    size: int = 64
    families: tuple[str, ...] = END_TO_END_FAMILIES
    ratio: float = 0.6
    copies: int = 0
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    feature_dim: int = 64
    C: float = 1.0
    seed: int = 0


@dataclass
class EndToEndResult:
    softmax_accuracy: dict[str, float]
    dfsmc_accuracy: float
    loss_curves: dict[str, list[float]]
    artifacts: dict[str, Path] = field(default_factory=dict)
    seconds: float = 0.0

    def lines(self) -> list[str]:
        out = [f"{arch} softmax test accuracy {acc:.4f}" for arch, acc in self.softmax_accuracy.items()]
        out.append(f"dfsmc test accuracy {self.dfsmc_accuracy:.4f}")
        for arch, curve in self.loss_curves.items():
            out.append(f"{arch} loss " + " ".join(f"{v:.4f}" for v in curve))
        out.append(f"elapsed {self.seconds:.1f}s")
        return out


def run_end_to_end(cfg: EndToEndConfig, workdir) -> EndToEndResult:
    """Generate, split, train both extractors from scratch, fit the fused SVM and
    write weights, SVM and reports under ``workdir``."""
    t0 = time.perf_counter()
    work = Path(workdir)
    images, labels = synth.texture_dataset(cfg.per_class, cfg.size, cfg.seed, cfg.families)
    synth.write_family_tree(work / "data", images, labels, list(cfg.families))
    manifest = stratified_split(build_manifest(work / "data"), cfg.ratio, cfg.seed)
    if cfg.copies:
        manifest = augment_split(manifest, cfg.copies, cfg.seed)
    write_manifest(manifest, work / "manifest.tsv")

    mcfg = ModelConfig(input_size=cfg.size, classes=manifest.family_count,
                       feature_dim=cfg.feature_dim, seed=cfg.seed)
    hyper = TrainHyper(cfg.lr, cfg.momentum, cfg.epochs, cfg.batch_size, cfg.seed)
    test = manifest.subset(TEST)
    x_test = load_inputs(manifest, test, cfg.size)
    y_test = np.array([r.family_index for r in test], dtype=np.intp)

    nets, curves, soft = {}, {}, {}
    artifacts = {"manifest": work / "manifest.tsv"}
    for arch in ARCHS:
        net = build_model(arch, mcfg)
        curves[arch] = train_model(net, manifest, hyper).loss_curve
        soft[arch] = float(np.mean(predict_logits(net, x_test).argmax(axis=1) == y_test))
        artifacts[arch] = work / f"{arch}.bin"
        save_weights(net, artifacts[arch])
        nets[arch] = net

    r, d = nets["mini-resnet"], nets["mini-densenet"]
    svm, _ = dfsmc_train(manifest, r, d, SvmConfig(C=cfg.C, seed=cfg.seed), cache_dir=work / "cache")
    artifacts["svm"] = work / "svm.txt"
    save_svm(svm, artifacts["svm"])
    report = dfsmc_evaluate(svm, manifest, r, d, TEST)
    artifacts["report"] = write_report(report, work / "report")
    return EndToEndResult(soft, report.accuracy, curves, artifacts, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# two-view fusion

@dataclass(frozen=True)
class FusionConfig:
    per_class: int = 100
    size: int = 32
    ratio: float = 0.6
    epochs: int = 15
    lr_resnet: float = 0.01
    lr_densenet: float = 0.002  # 0.005 and up oscillates on the noise/blob cue
    batch_size: int = 8
    feature_dim: int = 32
    C: float = 1.0
    seed: int = 0


@dataclass
class FusionResult:
    accuracy: dict[str, float]
    seconds: float = 0.0

    def lines(self) -> list[str]:
        return [f"{k} svm held-out accuracy {v:.4f}" for k, v in self.accuracy.items()] + \
            [f"elapsed {self.seconds:.1f}s"]


def _stratified_mask(labels: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    train = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng_for(seed, "fusion-split", int(c)).permutation(len(idx))]
        train[idx[:int(np.floor(ratio * len(idx) + 1e-9))]] = True
    return train


def run_fusion(cfg: FusionConfig = FusionConfig()) -> FusionResult:
    """mini-resnet learns the left cue from left halves, mini-densenet the right
    cue from right halves; SVMs then learn the 4-class label from each feature
    space alone and from the concatenation."""
    t0 = time.perf_counter()
    images, labels, cue_a, cue_b = synth.two_view_dataset(cfg.per_class, cfg.size, cfg.seed)
    x = np.stack([preprocess(img, cfg.size) for img in images])
    train = _stratified_mask(labels, cfg.ratio, cfg.seed)
    views = {"mini-resnet": (synth.mask_half(x, "left"), cue_a),
             "mini-densenet": (synth.mask_half(x, "right"), cue_b)}
    lrs = {"mini-resnet": cfg.lr_resnet, "mini-densenet": cfg.lr_densenet}
    feats = {}
    for arch, (xv, cue) in views.items():
        hyper = TrainHyper(lr=lrs[arch], epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed)
        net = build_model(arch, ModelConfig(input_size=cfg.size, classes=2,
                                            feature_dim=cfg.feature_dim, seed=cfg.seed))
        fit_arrays(net, xv[train], cue[train], hyper)
        feats[arch] = feature_matrix(net, xv)
    spaces = {"resnet": feats["mini-resnet"], "densenet": feats["mini-densenet"],
              "fused": np.hstack([feats["mini-resnet"], feats["mini-densenet"]])}
    acc = {}
    for name, f in spaces.items():
        svm = train_multiclass(f[train], labels[train], cfg.C, seed=cfg.seed)
        report = evaluate(svm.predict_batch(f[~train]), labels[~train], 4)
        acc[name] = report.accuracy
    return FusionResult(acc, time.perf_counter() - t0)
