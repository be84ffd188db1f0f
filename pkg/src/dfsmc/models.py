"""Desk-scale residual and dense CNN feature extractors.

mini-resnet:   stem conv -> pool -> res(w) -> pool -> res(w->2w, 1x1 projection)
               -> res(2w) -> global avg pool -> fc(F) -> relu -> fc(K)
mini-densenet: stem conv -> pool -> dense(L, g) -> 1x1 conv -> pool -> dense(L, g)
               -> relu -> global avg pool -> fc(F) -> relu -> fc(K)

The penultimate fc activation (after its relu) is the extracted feature vector.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dfsmc import nncore as nn
from dfsmc.errors import ShapeError, WeightFileError
from dfsmc.ingest import TRAIN, DatasetManifest, read_image, resize_image
from dfsmc.rng import rng_for

ARCHS = ("mini-resnet", "mini-densenet")
WEIGHT_MAGIC = b"DFSMC1\n"


# ---------------------------------------------------------------------------
# blocks

class ResidualBlock(nn.Module):
    """y = act(f(x) + x), or act(f(x) + w_s * x) with a 1x1 projection when the
    channel count changes; f = conv3x3 -> relu -> conv3x3."""

    def __init__(self, in_ch: int, out_ch: int, rng=None, post_activation: str = "relu"):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.conv1 = self.add("conv1", nn.Conv2D(in_ch, out_ch, 3, padding=1, rng=rng))
        self.relu1 = nn.ReLU()
        self.conv2 = self.add("conv2", nn.Conv2D(out_ch, out_ch, 3, padding=1, rng=rng))
        self.proj = None
        if in_ch != out_ch:
            self.proj = self.add("proj", nn.Conv2D(in_ch, out_ch, 1, bias=False, rng=rng))
        if post_activation == "relu":
            self.act = nn.ReLU()
        elif post_activation == "linear":
            self.act = nn.Identity()
        else:
            raise ValueError(f"unknown post_activation {post_activation!r}")

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"residual block expects {self.in_ch} channels, got {x.shape[1]}")
        branch = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        skip = x if self.proj is None else self.proj.forward(x)
        return self.act.forward(branch + skip)

    def backward(self, grad):
        g = self.act.backward(grad)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(g)))
        return dx + (g if self.proj is None else self.proj.backward(g))


class DenseBlock(nn.Module):
    """x^l = H_l(x^0 | ... | x^{l-1}) with H_l = relu -> conv3x3 (g channels out).
    The block emits the full concatenation, c0 + L*g channels."""

    def __init__(self, c0: int, layers: int, growth: int, rng=None):
        super().__init__()
        self.c0, self.n_layers, self.growth = c0, layers, growth
        self.layers = []
        for l in range(1, layers + 1):
            h = nn.Sequential([("relu", nn.ReLU()),
                               ("conv", nn.Conv2D(self.in_channels(l), growth, 3, padding=1, rng=rng))])
            self.layers.append(self.add(f"h{l}", h))

    def in_channels(self, l: int) -> int:
        return self.c0 + (l - 1) * self.growth

    @property
    def out_channels(self) -> int:
        return self.c0 + self.n_layers * self.growth

    def connections(self) -> list[tuple[int, int]]:
        """Directed (source, layer) feed edges: layer l reads x^0 .. x^{l-1}."""
        return [(src, l) for l in range(1, self.n_layers + 1) for src in range(l)]

    def forward(self, x):
        if x.shape[1] != self.c0:
            raise ShapeError(f"dense block expects {self.c0} channels, got {x.shape[1]}")
        feats = [x]
        for h in self.layers:
            feats.append(h.forward(np.concatenate(feats, axis=1)))
        return np.concatenate(feats, axis=1)

    def backward(self, grad):
        bounds = np.cumsum([self.c0] + [self.growth] * self.n_layers)[:-1]
        parts = [p.copy() for p in np.split(grad, bounds, axis=1)]
        for l in range(self.n_layers, 0, -1):
            d_cat = self.layers[l - 1].backward(parts[l])
            for i, piece in enumerate(np.split(d_cat, np.cumsum([self.c0] + [self.growth] * (l - 1))[:-1], axis=1)):
                parts[i] += piece
        return parts[0]


# ---------------------------------------------------------------------------
# whole networks

@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    in_channels: int = 1
    classes: int = 25
    feature_dim: int = 64
    width: int = 8
    growth: int = 8
    dense_layers: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.input_size < 4 or self.input_size % 4:
            raise ValueError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        for name in ("in_channels", "classes", "feature_dim", "width", "growth", "dense_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def tag_line(self, arch: str) -> str:
        return (f"{arch} classes={self.classes} feature_dim={self.feature_dim} "
                f"input={self.in_channels}x{self.input_size}x{self.input_size} "
                f"width={self.width} growth={self.growth} dense_layers={self.dense_layers}")

    @classmethod
    def parse_tag_line(cls, line: str) -> tuple[str, "ModelConfig"]:
        arch, *fields = line.split()
        kv = dict(f.split("=", 1) for f in fields)
        c, h, _ = (int(v) for v in kv["input"].split("x"))
        return arch, cls(input_size=h, in_channels=c, classes=int(kv["classes"]),
                         feature_dim=int(kv["feature_dim"]), width=int(kv["width"]),
                         growth=int(kv["growth"]), dense_layers=int(kv["dense_layers"]))


class NetModel(nn.Module):
    def __init__(self, arch: str, config: ModelConfig, body: nn.Sequential, body_channels: int, rng=None):
        super().__init__()
        self.arch = arch
        self.config = config
        self.body = self.add("body", body)
        self.gap = nn.GlobalAvgPool()
        self.fc = self.add("fc", nn.Linear(body_channels, config.feature_dim, rng=rng))
        self.fc_act = nn.ReLU()
        self.head = self.add("head", nn.Linear(config.feature_dim, config.classes, rng=rng))
        # parameter names excluded from updates during training
        self.frozen: frozenset[str] = frozenset()

    @property
    def class_count(self) -> int:
        return self.head.params["w"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.in_channels, c.input_size, c.input_size)

    def features(self, x):
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(f"model expects inputs (N, {', '.join(map(str, self.input_shape))}), "
                             f"got {x.shape}")
        return self.fc_act.forward(self.fc.forward(self.gap.forward(self.body.forward(x))))

    def forward(self, x):
        return self.head.forward(self.features(x))

    def backward(self, grad):
        g = self.fc.backward(self.fc_act.backward(self.head.backward(grad)))
        return self.body.backward(self.gap.backward(g))

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def gradients(self) -> dict[str, np.ndarray]:
        return dict(self.named_grads())

    def head_names(self) -> set[str]:
        return {name for name, _ in self.named_parameters() if name.startswith("head.")}


def _resnet_body(cfg: ModelConfig, rng) -> nn.Sequential:
    w = cfg.width
    return nn.Sequential([
        ("stem", nn.Conv2D(cfg.in_channels, w, 3, padding=1, rng=rng)),
        ("stem_relu", nn.ReLU()),
        ("pool1", nn.MaxPool2x2()),
        ("res1", ResidualBlock(w, w, rng)),
        ("pool2", nn.MaxPool2x2()),
        ("res2", ResidualBlock(w, 2 * w, rng)),
        ("res3", ResidualBlock(2 * w, 2 * w, rng)),
    ])


def _densenet_body(cfg: ModelConfig, rng) -> nn.Sequential:
    w, g, L = cfg.width, cfg.growth, cfg.dense_layers
    d1 = DenseBlock(w, L, g, rng)
    trans = 2 * w
    d2 = DenseBlock(trans, L, g, rng)
    return nn.Sequential([
        ("stem", nn.Conv2D(cfg.in_channels, w, 3, padding=1, rng=rng)),
        ("pool1", nn.MaxPool2x2()),
        ("dense1", d1),
        ("trans", nn.Conv2D(d1.out_channels, trans, 1, rng=rng)),
        ("pool2", nn.MaxPool2x2()),
        ("dense2", d2),
        ("relu", nn.ReLU()),
    ])


def build_model(arch: str, config: ModelConfig | None = None, init: bool = True) -> NetModel:
    """Build an initialised network. Weights are Glorot-uniform from a stream keyed
    by (config.seed, arch); biases start at zero."""
    config = config or ModelConfig()
    config.validate()
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    rng = rng_for(config.seed, "init:" + arch) if init else None
    body = _resnet_body(config, rng) if arch == "mini-resnet" else _densenet_body(config, rng)
    last = body.children[-1][1] if arch == "mini-resnet" else body.children[-2][1]
    channels = last.out_ch if arch == "mini-resnet" else last.out_channels
    return NetModel(arch, config, body, channels, rng)


# ---------------------------------------------------------------------------
# preprocessing, feature extraction, training

def preprocess(img, size: int) -> np.ndarray:
    """GrayImage -> (1, size, size) float map: resize, scale to [0, 1], subtract 0.5."""
    return resize_image(img, size, size).to_float()[None] - 0.5


def load_inputs(manifest: DatasetManifest, records, size: int) -> np.ndarray:
    if not records:
        return np.zeros((0, 1, size, size))
    return np.stack([preprocess(read_image(manifest.resolve(r)), size) for r in records])


def batched(fn, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def extract_features(model: NetModel, img) -> np.ndarray:
    """Penultimate fc activation for one GrayImage (or one preprocessed map)."""
    x = img if isinstance(img, np.ndarray) else preprocess(img, model.config.input_size)
    return model.features(x[None])[0].copy()


def predict_logits(model: NetModel, x: np.ndarray) -> np.ndarray:
    return batched(model.forward, x)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def fit_arrays(model: NetModel, x: np.ndarray, y: np.ndarray, hyper: TrainHyper) -> TrainResult:
    """Mini-batch momentum SGD on mean softmax cross-entropy. Frozen parameters are
    left untouched. Batch order is drawn from a stream keyed by (seed, epoch)."""
    y = np.asarray(y, dtype=np.intp)
    k = model.class_count
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("need a non-empty training set with one label per input")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")
    params = model.parameters()
    velocity: dict[str, np.ndarray] = {}
    result = TrainResult()
    for epoch in range(hyper.epochs):
        order = rng_for(hyper.seed, "batches", epoch).permutation(len(x))
        total = 0.0
        for start in range(0, len(x), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            model.zero_grad()
            loss, dlogits = nn.softmax_cross_entropy(model.forward(x[idx]), y[idx])
            model.backward(dlogits)
            nn.sgd_step(params, model.gradients(), velocity, hyper.lr, hyper.momentum, model.frozen)
            total += loss * len(idx)
        result.loss_curve.append(total / len(x))
    pred = predict_logits(model, x).argmax(axis=1)
    result.train_accuracy = float(np.mean(pred == y))
    return result


def train_model(model: NetModel, manifest: DatasetManifest, hyper: TrainHyper) -> TrainResult:
    records = manifest.subset(TRAIN)
    x = load_inputs(manifest, records, model.config.input_size)
    y = np.array([r.family_index for r in records], dtype=np.intp)
    missing = sorted(set(range(model.class_count)) - set(y.tolist()))
    if missing:
        raise ValueError(f"class missing from train split: {missing}")
    return fit_arrays(model, x, y, hyper)


def replace_head(model: NetModel, new_k: int, freeze: bool = False, seed: int = 0) -> NetModel:
    """Copy of ``model`` with a freshly initialised final fc of width ``new_k``.
    With ``freeze`` every pre-head parameter is excluded from later training."""
    if new_k < 2:
        raise ValueError("new_k must be >= 2")
    out = copy.deepcopy(model)
    out.config = replace(model.config, classes=new_k)
    rng = rng_for(seed, "replace-head", new_k)
    head = nn.Linear(model.feature_dim, new_k, rng=rng)
    out.head = head
    out.children = [(n, head if n == "head" else m) for n, m in out.children]
    out.frozen = frozenset(n for n, _ in out.named_parameters() if not n.startswith("head.")) if freeze \
        else frozenset()
    return out


# ---------------------------------------------------------------------------
# weight files

def _checksum(chunks) -> int:
    total = 0
    for values in chunks:
        bits = np.ascontiguousarray(values, dtype="<f8").view("<u8")
        total = (total + int(bits.sum(dtype=np.uint64))) % 2**64
    return total


def weights_bytes(model: NetModel) -> bytes:
    out = [WEIGHT_MAGIC, (model.config.tag_line(model.arch) + "\n").encode("utf-8")]
    arrays = []
    for name, value in model.named_parameters():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        arrays.append(value)
    out.append(struct.pack("<Q", _checksum(arrays)))
    return b"".join(out)


def save_weights(model: NetModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(weights_bytes(model))
    tmp.replace(path)


def load_weights(path, arch: str | None = None) -> NetModel:
    """Rebuild a model from a weight file. ``arch`` (optional) must match the file's tag."""
    buf = Path(path).read_bytes()
    if not buf.startswith(WEIGHT_MAGIC):
        raise WeightFileError(f"{path}: not a dfsmc weight file")
    pos = len(WEIGHT_MAGIC)
    eol = buf.find(b"\n", pos)
    if eol < 0:
        raise WeightFileError(f"{path}: truncated file (no architecture line)")
    try:
        file_arch, config = ModelConfig.parse_tag_line(buf[pos:eol].decode("utf-8"))
    except (KeyError, ValueError, UnicodeDecodeError):
        raise WeightFileError(f"{path}: malformed architecture line") from None
    if file_arch not in ARCHS:
        raise WeightFileError(f"{path}: unknown architecture tag {file_arch!r}")
    if arch is not None and arch != file_arch:
        raise WeightFileError(f"{path}: architecture tag mismatch: file holds {file_arch}, expected {arch}")
    pos = eol + 1
    model = build_model(file_arch, config, init=False)
    expected = model.parameters()
    loaded = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf) - 8:
            raise WeightFileError(f"{path}: truncated file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf) - 8:
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        if name not in expected:
            raise WeightFileError(f"{path}: unexpected parameter {name!r} for {file_arch}")
        if tuple(shape) != expected[name].shape:
            raise WeightFileError(f"{path}: shape mismatch for {name}: file {tuple(shape)}, "
                                  f"architecture {expected[name].shape}")
        loaded[name] = values
    if len(buf) - pos != 8:
        raise WeightFileError(f"{path}: truncated file")
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise WeightFileError(f"{path}: missing parameters {missing}")
    (stored,) = struct.unpack("<Q", buf[pos:])
    if stored != _checksum(loaded.values()):
        raise WeightFileError(f"{path}: checksum mismatch")
    for name, values in loaded.items():
        expected[name][...] = values
    return model
