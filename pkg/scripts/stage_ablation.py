"""Full four-stage schedule vs joint-only training over the default seed set.

    python scripts/stage_ablation.py --config configs/full.cfg [--seeds 7 8 9 10 11]
"""

import argparse
import sys

from mgmoe.config import ExperimentConfig, load_config
from mgmoe.sweeps import ABLATION_SEEDS, format_ablation, stage_ablation


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=list(ABLATION_SEEDS))
    args = p.parse_args(argv)
    exp = load_config(args.config) if args.config else ExperimentConfig()
    rows = stage_ablation(exp, args.seeds, echo=lambda s: print(s, file=sys.stderr))
    sys.stdout.write(format_ablation(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
