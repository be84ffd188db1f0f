"""Compute the reference values the test-suite compares against and freeze them
into tests/oracle_values.json.

Everything here uses exact rationals or 50-digit decimals and never imports
dfsmc, so the frozen numbers are independent of the implementation.

    python3 scripts/derive_oracles.py          # rewrite the json
    python3 scripts/derive_oracles.py --check  # fail if the json is stale
"""

import argparse
import json
import math
import sys
from decimal import Decimal, getcontext
from fractions import Fraction
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "oracle_values.json"

# MalImg per-family instance counts
MALIMG = {
    "Allaple.L": 1591, "Allaple.A": 2949, "Yuner.A": 800, "Lolyda.AA1": 213, "Lolyda.AA2": 184,
    "Lolyda.AA3": 123, "C2Lop.P": 146, "C2Lop.gen!g": 200, "Instantaccess": 431,
    "Swizzot.gen!I": 132, "Swizzor.gen!E": 128, "VB.AT": 408, "Fakerean": 381,
    "Alueron.gen!J": 198, "Malex.gen!J": 136, "Lolyda.AT": 159, "Adialer.C": 125,
    "Wintrim.BX": 97, "Dialplatform.B": 177, "Dontovo.A": 162, "Obfuscator.AD": 142,
    "Agent.FYI": 116, "Autorun.K": 106, "Rbot!gen": 158, "Skintrim.N": 80,
}


def softmax_decimal(v):
    getcontext().prec = 50
    e = [Decimal(x).exp() for x in v]
    s = sum(e)
    return [float(x / s) for x in e]


def macro_scores(truths, preds, k):
    conf = [[0] * k for _ in range(k)]
    for t, p in zip(truths, preds):
        conf[t][p] += 1
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = conf[c][c]
        col = sum(conf[r][c] for r in range(k))
        row = sum(conf[c])
        p = Fraction(tp, col) if col else Fraction(0)
        r = Fraction(tp, row) if row else Fraction(0)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        prec.append(p)
        rec.append(r)
        f1.append(f)
    acc = Fraction(sum(conf[c][c] for c in range(k)), len(truths))
    mean = lambda xs: sum(xs) / len(xs)  # noqa: E731
    return {"accuracy": float(acc), "macro_precision": float(mean(prec)),
            "macro_recall": float(mean(rec)), "macro_f1": float(mean(f1)),
            "precision": [float(x) for x in prec], "recall": [float(x) for x in rec],
            "f1": [float(x) for x in f1], "confusion": conf}


def sgd_recurrence(steps, lr, mu, g):
    p = v = Fraction(0)
    for _ in range(steps):
        v = mu * v - lr * g
        p = p + v
    return float(p)


def width_for(n):
    for limit, w in ((1024, 32), (8192, 64), (65536, 128), (524288, 256)):
        if n <= limit:
            return w
    return 512


def derive():
    ratio = Fraction(3, 5)
    split = {name: [math.floor(ratio * n), n - math.floor(ratio * n)] for name, n in MALIMG.items()}
    getcontext().prec = 50
    return {
        "softmax_1_2_3": softmax_decimal([1, 2, 3]),
        "cross_entropy_uniform": {str(k): float(Decimal(k).ln()) for k in (2, 3, 25)},
        "malimg_counts": MALIMG,
        "malimg_total": sum(MALIMG.values()),
        "malimg_split_0_6": split,
        "eval_k2_example": macro_scores([0, 0, 1, 1], [0, 1, 1, 1], 2),
        "eval_k3_one_class": macro_scores([0, 0, 1, 1, 2, 2], [0] * 6, 3),
        "sgd_two_steps_mu0_9": sgd_recurrence(2, Fraction(1, 10), Fraction(9, 10), 1),
        "sgd_one_step_mu0": sgd_recurrence(1, Fraction(1, 10), Fraction(0), 1),
        "image_shape_4096": [math.ceil(4096 / width_for(4096)), width_for(4096)],
        "image_shape_1": [1, width_for(1)],
        "dense_connections": {str(L): L * (L + 1) // 2 for L in range(1, 6)},
        "dense_channels_L3_c4_g2": {"inputs": [4 + (l - 1) * 2 for l in (1, 2, 3)], "out": 4 + 3 * 2},
        "uniform_scale_mean": float((Fraction(1, 2) + 1) / 2),
        "svm_separable_pair_objective": 0.5,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args(argv)
    text = json.dumps(derive(), indent=2, sort_keys=True) + "\n"
    if args.check:
        if OUT.read_text() != text:
            print(f"{OUT} is stale", file=sys.stderr)
            return 1
        print("oracle values up to date")
        return 0
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(text)
    print(f"wrote {OUT}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
