"""Two-cue images: each extractor only sees one half, only the fused SVM sees both.

    python3 scripts/run_fusion.py
    python3 scripts/run_fusion.py --seed 3 --epochs 20
"""

import argparse
import sys
from dataclasses import fields

from dfsmc.experiments import FusionConfig, run_fusion


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in fields(FusionConfig):
        ap.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    cfg = FusionConfig(**vars(ap.parse_args(argv)))
    print("\n".join(run_fusion(cfg).lines()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
