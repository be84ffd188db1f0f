"""Fused-feature classification: both extractors -> concatenation -> SVM -> report."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfsmc.errors import DfsmcError, ShapeError
from dfsmc.ingest import TEST, TRAIN, DatasetManifest, GrayImage
from dfsmc.models import NetModel, batched, load_inputs, preprocess
from dfsmc.svm import SvmModel, predict, train_multiclass

SOURCES = ("resnet", "densenet", "fused")
ARCH_SOURCE = {"mini-resnet": "resnet", "mini-densenet": "densenet"}


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown feature source {self.source!r}")

    def __len__(self):
        return len(self.values)


def fuse(f1: FeatureVector, f2: FeatureVector) -> FeatureVector:
    """resnet features followed by densenet features, nothing else."""
    if f1.source != "resnet" or f2.source != "densenet":
        raise ValueError(f"fuse expects (resnet, densenet) features, got ({f1.source}, {f2.source})")
    if len(f1) == 0 or len(f2) == 0:
        raise ValueError("cannot fuse an empty feature vector")
    return FeatureVector(np.concatenate([f1.values, f2.values]), "fused")


def fuse_matrices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) != len(b):
        raise ShapeError(f"feature matrices disagree on sample count: {len(a)} vs {len(b)}")
    return np.hstack([a, b])


def split_fused(f: FeatureVector, resnet_dim: int) -> tuple[FeatureVector, FeatureVector]:
    return (FeatureVector(f.values[:resnet_dim].copy(), "resnet"),
            FeatureVector(f.values[resnet_dim:].copy(), "densenet"))


def feature_matrix(model: NetModel, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return batched(lambda b: model.features(b).copy(), x, batch_size)


# ---------------------------------------------------------------------------
# feature cache

def write_cache(path, labels, features: np.ndarray, source: str) -> None:
    path = Path(path)
    features = np.atleast_2d(features)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "src", *(f"f{i}" for i in range(features.shape[1]))])
        for label, row in zip(labels, features):
            w.writerow([int(label), source, *(format(float(v), ".17g") for v in row)])
    os.replace(tmp, path)


def read_cache(path) -> tuple[np.ndarray, np.ndarray, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["label", "src"]:
        raise DfsmcError(f"{path}: not a feature cache (header must start with label,src)")
    dim = len(rows[0]) - 2
    body = rows[1:]
    sources = {r[1] for r in body}
    if len(sources) > 1:
        raise DfsmcError(f"{path}: mixed feature sources {sorted(sources)}")
    if any(len(r) != dim + 2 for r in body):
        raise DfsmcError(f"{path}: ragged rows")
    labels = np.array([int(r[0]) for r in body], dtype=np.intp)
    feats = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), dim)
    return labels, feats, (sources.pop() if sources else "")


# ---------------------------------------------------------------------------
# training / prediction

@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    tol: float = 1e-8
    max_iter: int = 100_000
    seed: int = 0


@dataclass
class FeatureSet:
    labels: np.ndarray
    resnet: np.ndarray
    densenet: np.ndarray

    @property
    def fused(self) -> np.ndarray:
        return fuse_matrices(self.resnet, self.densenet)


def _check_pair(model_r: NetModel, model_d: NetModel):
    if model_r.arch != "mini-resnet" or model_d.arch != "mini-densenet":
        raise DfsmcError(f"expected (mini-resnet, mini-densenet) models, got ({model_r.arch}, {model_d.arch})")
    if model_r.config.input_size != model_d.config.input_size:
        raise DfsmcError("the two extractors disagree on input size")


def extract_features_split(manifest: DatasetManifest, model_r: NetModel, model_d: NetModel,
                           split: str) -> FeatureSet:
    _check_pair(model_r, model_d)
    records = manifest.subset(split)
    x = load_inputs(manifest, records, model_r.config.input_size)
    labels = np.array([r.family_index for r in records], dtype=np.intp)
    return FeatureSet(labels, feature_matrix(model_r, x), feature_matrix(model_d, x))


def dfsmc_train(manifest: DatasetManifest, model_r: NetModel, model_d: NetModel,
                svm_cfg: SvmConfig = SvmConfig(), cache_dir=None) -> tuple[SvmModel, FeatureSet]:
    """Extract both feature spaces for the train split, concatenate, fit the SVM.
    With ``cache_dir`` the per-extractor features are written as CSV caches."""
    feats = extract_features_split(manifest, model_r, model_d, TRAIN)
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        write_cache(cache_dir / "resnet_train.csv", feats.labels, feats.resnet, "resnet")
        write_cache(cache_dir / "densenet_train.csv", feats.labels, feats.densenet, "densenet")
    svm = train_multiclass(feats.fused, feats.labels, svm_cfg.C, svm_cfg.tol, svm_cfg.max_iter,
                           seed=svm_cfg.seed)
    return svm, feats


def fused_features(model_r: NetModel, model_d: NetModel, x: np.ndarray) -> np.ndarray:
    return fuse_matrices(feature_matrix(model_r, x), feature_matrix(model_d, x))


def dfsmc_predict(svm: SvmModel, model_r: NetModel, model_d: NetModel,
                  img: GrayImage | np.ndarray) -> tuple[int, np.ndarray]:
    _check_pair(model_r, model_d)
    x = img if isinstance(img, np.ndarray) else preprocess(img, model_r.config.input_size)
    f = fused_features(model_r, model_d, x[None])[0]
    if len(f) != svm.dim:
        raise ShapeError(f"fused feature length {len(f)} does not match SVM dimension {svm.dim}")
    return predict(svm, f)


def dfsmc_predict_batch(svm: SvmModel, model_r: NetModel, model_d: NetModel,
                        x: np.ndarray) -> np.ndarray:
    _check_pair(model_r, model_d)
    f = fused_features(model_r, model_d, x)
    if f.shape[1] != svm.dim:
        raise ShapeError(f"fused feature length {f.shape[1]} does not match SVM dimension {svm.dim}")
    return svm.predict_batch(f)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = true class, cols = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    class_names: list[str] = field(default_factory=list)
    split_counts: dict[str, int] = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return self.confusion.shape[0]

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    def summary(self) -> dict[str, float | int]:
        out = {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "classes": self.class_count,
            "samples": int(self.confusion.sum()),
        }
        for k, v in sorted(self.split_counts.items()):
            out[f"{k}_samples"] = int(v)
        return out


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(len(num))
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def evaluate(predictions, truths, k: int, class_names: list[str] | None = None) -> EvalReport:
    pred = np.asarray(predictions, dtype=np.intp)
    true = np.asarray(truths, dtype=np.intp)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(true)} truths")
    if len(pred) and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (true, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    precision = _ratio(tp, confusion.sum(axis=0).astype(np.float64))
    recall = _ratio(tp, confusion.sum(axis=1).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    names = list(class_names) if class_names else [str(i) for i in range(k)]
    return EvalReport(confusion, precision, recall, f1, names)


def _g(v) -> str:
    return format(float(v), ".17g") if isinstance(v, float) else str(v)


def write_report(report: EvalReport, out_dir) -> Path:
    """summary.txt (key=value), confusion.csv and per_class.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={_g(v)}" for k, v in report.summary().items()]
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *report.class_names])
        for name, row in zip(report.class_names, report.confusion):
            w.writerow([name, *row.tolist()])
    with open(out / "per_class.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "name", "precision", "recall", "f1", "support"])
        support = report.confusion.sum(axis=1)
        for i, name in enumerate(report.class_names):
            w.writerow([i, name, _g(report.precision[i]), _g(report.recall[i]), _g(report.f1[i]),
                        int(support[i])])
    return out


def compare_report(reports: dict[str, EvalReport], out_path) -> Path:
    """One row per (model, class) with precision/recall/F1, then one macro row
    per model carrying accuracy."""
    if not reports:
        raise ValueError("no reports to compare")
    first = next(iter(reports.values()))
    for name, r in reports.items():
        if r.class_count != first.class_count or r.class_names != first.class_names:
            raise ValueError(f"report {name!r} does not share classes with the others")
    out_path = Path(out_path)
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "class", "precision", "recall", "f1", "accuracy"])
        for name, r in reports.items():
            for i, cname in enumerate(r.class_names):
                w.writerow([name, cname, _g(r.precision[i]), _g(r.recall[i]), _g(r.f1[i]), ""])
        for name, r in reports.items():
            w.writerow([name, "macro", _g(r.macro_precision), _g(r.macro_recall), _g(r.macro_f1),
                        _g(r.accuracy)])
    return out_path


def dfsmc_evaluate(svm: SvmModel, manifest: DatasetManifest, model_r: NetModel,
                   model_d: NetModel, split: str = TEST) -> EvalReport:
    records = manifest.subset(split)
    x = load_inputs(manifest, records, model_r.config.input_size)
    truths = np.array([r.family_index for r in records], dtype=np.intp)
    preds = dfsmc_predict_batch(svm, model_r, model_d, x) if len(records) else np.zeros(0, np.intp)
    report = evaluate(preds, truths, manifest.family_count, manifest.family_names())
    report.split_counts = {TRAIN: len(manifest.subset(TRAIN)), TEST: len(manifest.subset(TEST))}
    return report
