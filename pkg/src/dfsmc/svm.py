"""Linear soft-margin SVM.

Primal:  min_{w,b}  1/2 ||w||^2 + C * sum_i max(0, 1 - y_i (w.x_i + b))

``train_binary`` solves the dual with two-coordinate (SMO-style) descent and a
maximal-violating-pair rule, then picks the bias by exact 1-D minimisation of
the hinge sum. ``qp_oracle`` is an independent solver for small problems used
to cross-check it. Multiclass is one-vs-rest on z-scored features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfsmc.errors import SvmError
from dfsmc.rng import rng_for

TAU = 1e-12


def _check_binary(X, y, C):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise SvmError(f"need X of shape (n, d) and n labels, got {X.shape} and {y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("binary labels must be -1 or +1")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SvmError("degenerate labels: need at least one sample of each sign")
    if not C > 0:
        raise SvmError(f"C must be > 0, got {C}")
    return X, y


def hinge_slacks(X, y, w, b) -> np.ndarray:
    return np.maximum(0.0, 1.0 - y * (X @ w + b))


def primal_objective(X, y, w, b, C) -> float:
    return float(0.5 * np.dot(w, w) + C * hinge_slacks(X, y, w, b).sum())


def best_bias(margins: np.ndarray, y: np.ndarray) -> float:
    """argmin_b sum_i max(0, 1 - y_i (margins_i + b)); midpoint of the optimal
    interval when the minimum is flat."""
    bp = y - margins  # y_i (m_i + b) == 1  <=>  b == y_i - m_i
    pos = np.sort(bp[y > 0])  # contributes (bp - b)_+
    neg = np.sort(bp[y < 0])  # contributes (b - bp)_+
    cand = np.unique(bp)
    pos_suffix = np.concatenate([np.cumsum(pos[::-1])[::-1], [0.0]])
    neg_prefix = np.concatenate([[0.0], np.cumsum(neg)])
    ip = np.searchsorted(pos, cand, side="right")
    ineg = np.searchsorted(neg, cand, side="left")
    vals = (pos_suffix[ip] - (len(pos) - ip) * cand) + (ineg * cand - neg_prefix[ineg])
    best = vals.min()
    near = cand[vals <= best + 1e-12 * max(1.0, abs(best))]
    return float(0.5 * (near.min() + near.max()))


@dataclass
class BinarySvm:
    w: np.ndarray
    b: float
    objective: float
    iterations: int
    alpha: np.ndarray
    converged: bool

    def decision(self, X) -> np.ndarray:
        return np.asarray(X) @ self.w + self.b


def train_binary(X, y, C: float = 1.0, tol: float = 1e-8, max_iter: int = 100_000,
                 seed: int = 0) -> BinarySvm:
    X, y = _check_binary(X, y, C)
    n = len(y)
    # canonical row order, then a seeded shuffle: the result does not depend on
    # how the caller ordered the samples
    canon = np.lexsort(np.column_stack([X, y]).T[::-1])
    order = canon[rng_for(seed, "svm-order").permutation(n)]
    Xs, ys = X[order], y[order]

    alpha = np.zeros(n)
    w = np.zeros(X.shape[1])
    grad = -np.ones(n)  # G = Q alpha - e
    diag = np.einsum("ij,ij->i", Xs, Xs)
    converged = False
    it = 0
    while it < max_iter:
        score = -ys * grad
        up = ((ys > 0) & (alpha < C)) | ((ys < 0) & (alpha > 0))
        low = ((ys < 0) & (alpha < C)) | ((ys > 0) & (alpha > 0))
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        if score[i] - score[j] <= tol:
            converged = True
            break
        it += 1
        yi, yj = ys[i], ys[j]
        qij = yi * yj * float(Xs[i] @ Xs[j])
        ai, aj = alpha[i], alpha[j]
        if yi != yj:
            quad = max(diag[i] + diag[j] + 2 * qij, TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2 * qij, TAU)
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ai -= delta
            aj += delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        dai, daj = ai - alpha[i], aj - alpha[j]
        alpha[i], alpha[j] = ai, aj
        dw = dai * yi * Xs[i] + daj * yj * Xs[j]
        w += dw
        grad += ys * (Xs @ dw)
    if not converged:
        warnings.warn(f"SVM solver stopped at max_iter={max_iter} before reaching tol={tol}",
                      RuntimeWarning, stacklevel=2)
    w = Xs.T @ (alpha * ys)  # recompute to shed accumulated rounding
    b = best_bias(Xs @ w, ys)
    unshuffled = np.empty(n)
    unshuffled[order] = alpha
    return BinarySvm(w, b, primal_objective(X, y, w, b, C), it, unshuffled, converged)


# ---------------------------------------------------------------------------
# independent oracle

def _project(v: np.ndarray, y: np.ndarray, C: float) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= C, y.a = 0}: a = clip(v - lam*y, 0, C)
    with lam the root of the decreasing piecewise-linear h(lam) = y.clip(v - lam*y)."""
    knots = np.unique(np.concatenate([y * v, y * (v - C)]))

    def h(lam):
        return (y * np.clip(v[None, :] - np.atleast_1d(lam)[:, None] * y[None, :], 0.0, C)).sum(axis=1)

    hv = h(knots)
    zero = np.flatnonzero(hv == 0)
    if zero.size:
        lam = knots[zero[0]]
    else:
        k = int(np.searchsorted(-hv, 0.0))  # first knot with h < 0
        lo, hi = knots[k - 1], knots[k]
        lam = lo + (hi - lo) * hv[k - 1] / (hv[k - 1] - hv[k])
    return np.clip(v - lam * y, 0.0, C)


def _dual_value(alpha, Q) -> float:
    return float(alpha.sum() - 0.5 * alpha @ Q @ alpha)


def _scan_bias(X, y, w, C):
    """Brute force: evaluate the primal at every hinge breakpoint."""
    cands = y - X @ w
    vals = [primal_objective(X, y, w, b, C) for b in cands]
    k = int(np.argmin(vals))
    return float(cands[k]), float(vals[k])


def _polish(alpha, X, y, Q, C, eps):
    """Solve the KKT equalities for the support pattern suggested by ``alpha``."""
    free = (alpha > eps * C) & (alpha < C * (1 - eps))
    bound = alpha >= C * (1 - eps)
    E = np.flatnonzero(free)
    V = np.flatnonzero(bound)
    k = len(E)
    A = np.zeros((k + 1, k + 1))
    rhs = np.zeros(k + 1)
    A[:k, :k] = Q[np.ix_(E, E)]
    A[:k, k] = y[E]
    rhs[:k] = 1.0 - C * Q[np.ix_(E, V)].sum(axis=1)
    A[k, :k] = y[E]
    rhs[k] = -C * y[V].sum()
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    out = np.zeros_like(alpha)
    out[V] = C
    out[E] = sol[:k]
    if np.any(out < -1e-12) or np.any(out > C + 1e-12) or abs(out @ y) > 1e-9 * max(1.0, C):
        return None
    return np.clip(out, 0.0, C)


@dataclass
class OracleResult:
    objective: float
    w: np.ndarray
    b: float
    dual: float
    certified: bool

    @property
    def gap(self) -> float:
        return self.objective - self.dual


def qp_oracle(X, y, C: float = 1.0, restarts: int = 6, max_iter: int = 50_000,
              seed: int = 0, gap_tol: float = 1e-8) -> OracleResult:
    """Accelerated projected gradient on the dual from several random feasible
    starts, an active-set polish, and a brute-force bias scan. ``certified`` means
    primal - dual <= gap_tol * max(1, primal), which bounds the distance to the
    true optimum since any feasible dual point is a lower bound."""
    X, y = _check_binary(X, y, C)
    if len(y) > 40:
        raise SvmError("qp_oracle is meant for tiny problems (<= 40 samples)")
    Q = (y[:, None] * y[None, :]) * (X @ X.T)
    step = 1.0 / max(np.linalg.eigvalsh(Q).max(), 1e-12)
    rng = rng_for(seed, "qp-oracle")
    best = None
    for _ in range(restarts):
        a = _project(rng.uniform(0, C, len(y)), y, C)
        z, t = a.copy(), 1.0
        f_prev = np.inf
        for _ in range(max_iter):
            a_next = _project(z - step * (Q @ z - 1.0), y, C)
            f = 0.5 * a_next @ Q @ a_next - a_next.sum()
            if f > f_prev:  # adaptive restart of the momentum
                z, t = a.copy(), 1.0
                f_prev = np.inf
                continue
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            z = a_next + ((t - 1) / t_next) * (a_next - a)
            moved = np.max(np.abs(a_next - a))
            a, t, f_prev = a_next, t_next, f
            if moved < 1e-15 * max(1.0, C):
                # momentum can park on a vertex; only a plain-step fixed point is optimal
                plain = _project(a - step * (Q @ a - 1.0), y, C)
                if np.max(np.abs(plain - a)) < 1e-15 * max(1.0, C):
                    break
                z, t, f_prev = a.copy(), 1.0, np.inf
        candidates = [a]
        for eps in (1e-9, 1e-7, 1e-5, 1e-3):
            p = _polish(a, X, y, Q, C, eps)
            if p is not None:
                candidates.append(p)
        for alpha in candidates:
            w = X.T @ (alpha * y)
            b, primal = _scan_bias(X, y, w, C)
            res = OracleResult(primal, w, b, _dual_value(alpha, Q), False)
            if best is None or res.objective < best.objective - 1e-15 or (
                    abs(res.objective - best.objective) <= 1e-15 and res.dual > best.dual):
                best = res
            if res.dual > best.dual:
                best.dual = res.dual
    best.certified = best.gap <= gap_tol * max(1.0, best.objective)
    return best


# ---------------------------------------------------------------------------
# multiclass

@dataclass
class SvmModel:
    W: np.ndarray          # (K, d)
    b: np.ndarray          # (K,)
    C: float
    mean: np.ndarray       # (d,) standardisation applied before W
    scale: np.ndarray      # (d,)
    iterations: list[int] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)

    @property
    def class_count(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def margins(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise SvmError(f"feature dimension {X.shape[1]} does not match model dimension {self.dim}")
        return self.standardize(X) @ self.W.T + self.b

    def predict_batch(self, X) -> np.ndarray:
        return self.margins(X).argmax(axis=1)


def train_multiclass(X, y, C: float = 1.0, tol: float = 1e-8, max_iter: int = 100_000,
                     standardize: bool = True, seed: int = 0) -> SvmModel:
    """One-vs-rest over labels 0..K-1 (K = max label + 1). For K == 2 a single
    binary problem is solved and class 0 gets the negated hyperplane."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if X.ndim != 2 or len(X) != len(y):
        raise SvmError(f"need X of shape (n, d) and n labels, got {X.shape} and {y.shape}")
    k = int(y.max()) + 1 if len(y) else 0
    missing = sorted(set(range(k)) - set(y.tolist()))
    if k < 2 or missing:
        raise SvmError(f"missing class in SVM training labels: {missing or 'need >= 2 classes'}")
    # canonical row order so the standardisation sums, like the solver, ignore caller order
    canon = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[canon], y[canon]
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - mean) / scale
    model = SvmModel(np.zeros((k, X.shape[1])), np.zeros(k), C, mean, scale)
    if k == 2:
        res = train_binary(Z, np.where(y == 1, 1.0, -1.0), C, tol, max_iter, seed)
        model.W[1], model.b[1] = res.w, res.b
        model.W[0], model.b[0] = -res.w, -res.b
        model.iterations = [res.iterations] * 2
        model.objectives = [res.objective] * 2
        return model
    for c in range(k):
        res = train_binary(Z, np.where(y == c, 1.0, -1.0), C, tol, max_iter, seed)
        model.W[c], model.b[c] = res.w, res.b
        model.iterations.append(res.iterations)
        model.objectives.append(res.objective)
    return model


def predict(model: SvmModel, x) -> tuple[int, np.ndarray]:
    """Class index (argmax of w_k.x + b_k, lowest index on ties) and all margins."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise SvmError("predict expects a single feature vector")
    m = model.margins(x)[0]
    return int(np.argmax(m)), m


# ---------------------------------------------------------------------------
# file format

def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def svm_text(model: SvmModel) -> str:
    lines = [f"dfsmc-svm v1 K={model.class_count} dim={model.dim} C={format(model.C, '.17g')}"]
    for c in range(model.class_count):
        lines.append(_fmt([model.b[c], *model.W[c]]))
    lines.append("mean " + _fmt(model.mean))
    lines.append("scale " + _fmt(model.scale))
    return "\n".join(lines) + "\n"


def save_svm(model: SvmModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(svm_text(model), encoding="utf-8")
    tmp.replace(path)


def load_svm(path) -> SvmModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split() if lines else []
    if head[:2] != ["dfsmc-svm", "v1"]:
        raise SvmError(f"{path}: not a dfsmc-svm v1 file")
    try:
        kv = dict(f.split("=", 1) for f in head[2:])
        k, d, C = int(kv["K"]), int(kv["dim"]), float(kv["C"])
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + k]])
        mean_line, scale_line = lines[1 + k].split(), lines[2 + k].split()
        if rows.shape != (k, d + 1) or mean_line[0] != "mean" or scale_line[0] != "scale":
            raise ValueError
        mean = np.array([float(v) for v in mean_line[1:]])
        scale = np.array([float(v) for v in scale_line[1:]])
        if mean.shape != (d,) or scale.shape != (d,):
            raise ValueError
    except (KeyError, ValueError, IndexError):
        raise SvmError(f"{path}: malformed dfsmc-svm file") from None
    return SvmModel(rows[:, 1:].copy(), rows[:, 0].copy(), C, mean, scale)
