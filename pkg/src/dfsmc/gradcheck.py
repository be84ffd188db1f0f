"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dfsmc import nncore as nn
from dfsmc.nncore import Module
from dfsmc.rng import rng_for

STEP = 1e-5


@dataclass
class GradcheckReport:
    name: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e})"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _numeric(f, arr: np.ndarray, h: float, only=None) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in (range(flat.size) if only is None else only):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def _element_errors(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _checked(f, arr, analytic, h, tolerance, floor) -> float:
    """Max relative error; coordinates over tolerance get one retry at h/10.

    A step that straddles a relu or max-pool kink inside a deep fragment makes
    the difference quotient wrong for that coordinate only, and the retry
    clears it. A wrong backward pass fails at every step size."""
    if arr.size == 0:
        return 0.0
    a = analytic.reshape(-1)
    err = _element_errors(a, _numeric(f, arr, h).reshape(-1), floor)
    bad = np.flatnonzero(err > tolerance)
    if bad.size:
        retry = _element_errors(a[bad], _numeric(f, arr, h / 10, bad).reshape(-1)[bad], floor)
        err[bad] = np.minimum(err[bad], retry)
    return float(err.max())


def gradcheck(fragment: Module, x: np.ndarray, tolerance: float = 1e-6, h: float = STEP,
              name: str | None = None, seed: int = 0, floor: float = 1e-6) -> GradcheckReport:
    """Compare ``fragment``'s backward pass against central differences for every
    parameter and for the input, using the scalar loss sum(out * R) with a fixed
    random R."""
    x = np.array(x, dtype=np.float64)
    out = fragment.forward(x)
    proj = rng_for(seed, "gradcheck").standard_normal(out.shape)

    def loss():
        return float(np.sum(fragment.forward(x) * proj))

    fragment.zero_grad()
    fragment.forward(x)
    dx = fragment.backward(proj.copy())
    analytic = {k: v.copy() for k, v in fragment.named_grads()}

    report = GradcheckReport(name or type(fragment).__name__, tolerance)
    report.errors["input"] = _checked(loss, x, dx, h, tolerance, floor)
    for pname, p in fragment.named_parameters():
        report.errors[pname] = _checked(loss, p, analytic[pname], h, tolerance, floor)
    return report


class _CrossEntropy(Module):
    """Logits -> (1,) mean softmax cross-entropy for fixed labels."""

    def __init__(self, labels):
        super().__init__()
        self.labels = np.asarray(labels)

    def forward(self, x):
        self._loss, self._grad = nn.softmax_cross_entropy(x, self.labels)
        return np.array([self._loss])

    def backward(self, grad):
        return grad[0] * self._grad


def _off_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values away from relu kinks."""
    return np.where(x >= 0, x + margin, x - margin)


def run_suite(seed: int = 0) -> list[GradcheckReport]:
    """Every layer type in isolation and both architectures at the tiny 1x8x8 config."""
    from dfsmc.models import DenseBlock, ModelConfig, ResidualBlock, build_model

    rng = rng_for(seed, "gradcheck-suite")

    def data(*shape):
        return _off_zero(rng.uniform(-1, 1, shape))

    conv = nn.Conv2D(2, 3, 3, rng=rng)
    conv.params["b"] = rng.normal(size=3)
    padded = nn.Conv2D(2, 3, 3, padding=1, rng=rng)
    lin = nn.Linear(5, 4, rng=rng)
    lin.params["b"] = rng.normal(size=4)
    stack = nn.Sequential([("conv", nn.Conv2D(1, 2, 3, rng=rng)), ("relu", nn.ReLU()),
                           ("pool", nn.MaxPool2x2())])
    tiny = ModelConfig(input_size=8, classes=3, feature_dim=8, width=4, growth=4, seed=seed)
    cases = [
        ("conv2d", conv, data(2, 2, 4, 4), 1e-6),
        ("conv2d-padded", padded, data(2, 2, 5, 5), 1e-6),
        ("linear", lin, data(3, 5), 1e-6),
        ("softmax", nn.Softmax(), rng.normal(size=(3, 4)), 1e-6),
        ("cross-entropy", _CrossEntropy([0, 2, 1]), rng.normal(size=(3, 4)), 1e-6),
        ("global-avg-pool", nn.GlobalAvgPool(), data(2, 3, 4, 4), 1e-6),
        ("relu", nn.ReLU(), data(2, 3, 4), 1e-4),
        ("maxpool2x2", nn.MaxPool2x2(), rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) / 10.0, 1e-4),
        ("conv-relu-pool", stack, data(2, 1, 6, 6), 1e-4),
        ("residual-identity", ResidualBlock(3, 3, rng), data(2, 3, 4, 4), 1e-4),
        ("residual-projection", ResidualBlock(2, 4, rng), data(2, 2, 4, 4), 1e-4),
        ("dense-block", DenseBlock(2, 3, 2, rng), data(2, 2, 4, 4), 1e-4),
        ("mini-resnet", build_model("mini-resnet", tiny), data(2, 1, 8, 8), 1e-4),
        ("mini-densenet", build_model("mini-densenet", tiny), data(2, 1, 8, 8), 1e-4),
    ]
    return [gradcheck(m, x, tol, name=name, seed=seed) for name, m, x, tol in cases]
