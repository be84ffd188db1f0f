"""Five texture families, both extractors from scratch, fused SVM, report.

    python3 scripts/run_end_to_end.py --workdir runs/e2e
    python3 scripts/run_end_to_end.py --per-class 20 --size 32 --epochs 3   # quick look
"""

import argparse
import sys
import tempfile
from dataclasses import fields

from dfsmc.experiments import EndToEndConfig, run_end_to_end


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default=None, help="keep artifacts here (default: temp dir)")
    for f in fields(EndToEndConfig):
        if f.name == "families":
            continue
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    args = vars(ap.parse_args(argv))
    workdir = args.pop("workdir")
    cfg = EndToEndConfig(**args)
    if workdir is None:
        with tempfile.TemporaryDirectory() as tmp:
            res = run_end_to_end(cfg, tmp)
    else:
        res = run_end_to_end(cfg, workdir)
        print(f"artifacts under {workdir}")
    print("\n".join(res.lines()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
