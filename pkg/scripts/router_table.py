"""Capacity factor x top-k grid for stage IV, starting from one set of stage II/III models.

    python scripts/router_table.py --config configs/full.cfg [--ckpt-dir runs/seed7]

With ``--ckpt-dir`` the stage II/III checkpoints (``s2.mgt``, ``s3.mgt``) are
reused; otherwise stages I-III are trained first.
"""

import argparse
import sys
from pathlib import Path

from mgmoe.config import ExperimentConfig, load_config
from mgmoe.experiment import train_schedule
from mgmoe.sweeps import format_table, router_table
from mgmoe.training import load_checkpoint


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt-dir")
    args = p.parse_args(argv)
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    if args.ckpt_dir:
        d = Path(args.ckpt_dir)
        base = {"II": load_checkpoint(d / "s2.mgt"), "III": load_checkpoint(d / "s3.mgt")}
    else:
        base = train_schedule(exp, upto_stage="III")
    rows = router_table(exp, base, echo=lambda s: print(s, file=sys.stderr))
    sys.stdout.write(format_table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
