"""Command-line entry points: ``gen-data``, ``train``, ``eval`` and ``route-report``.

Exit status is 0 on success, 2 for unreadable configs or bad arguments and 1
for any other contract violation (provenance, checkpoint integrity, numerics).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import serialize as S
from . import tensor as T
from .config import ConfigError, ExperimentConfig, load_config
from .encoders import InputError
from .evaluate import EVAL_TASKS, eval_samples, predict_masks, routing_report
from .experiment import evaluate_config, run_experiment
from .training import CheckpointError, ConfigurationError, TrainingError, file_sha256, load_checkpoint


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    return exp


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    """Write MGI1 images, MGM1 masks and a JSONL manifest for ``n`` scenes per task."""
    exp = _experiment(args)
    out = _out(args)
    rng = np.random.default_rng([exp.run.seed, 11])
    tasks = args.tasks or (["grounding"] if args.split == "zeroshot" else list(D.TASKS))
    records = []
    for task in tasks:
        if task not in D.TASKS:
            raise InputError(f"unknown task {task!r}")
        indices = np.sort(rng.choice(D.SPLIT_SIZE, size=args.n, replace=False))
        for idx in indices:
            seed = D.split_seed(args.split, int(idx))
            s = D.make_sample(task, seed)
            stem = f"{task}_{seed}"
            rec = {"seed": seed, "task": task, "image": f"{stem}.mgi", "prompt_ids": s.prompt,
                   "answer_ids": s.answer, "mask": None, "region": None, "meta": s.meta}
            (out / rec["image"]).write_bytes(S.encode_image(s.image))
            if s.gt_mask is not None:
                rec["mask"] = f"{stem}.mgm"
                (out / rec["mask"]).write_bytes(S.encode_mask(s.gt_mask))
            if s.region is not None:
                rec["region"] = f"{stem}.region.mgm"
                (out / rec["region"]).write_bytes(S.encode_mask(s.region.mask))
            records.append(rec)
    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = _out(args)
    echo = print if args.verbose else None
    result = run_experiment(exp, out, do_eval=not args.no_eval, echo=echo)
    for tag, path in result.checkpoints.items():
        print(f"checkpoint\t{tag}\t{path}\t{file_sha256(path)}")
    if result.report is not None:
        sys.stdout.write(result.report.to_text())
    return 0


def cmd_eval(args) -> int:
    exp = _experiment(args)
    out = _out(args)
    before = file_sha256(args.ckpt)
    model = load_checkpoint(args.ckpt)
    report = evaluate_config(model, exp, split=args.split)
    (out / "report.tsv").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    if args.export_masks:
        mdir = out / "masks"
        mdir.mkdir(exist_ok=True)
        with T.dtype_scope(exp.run.dtype):
            samples = eval_samples(args.split, "grounding", exp.data.n_test)
            logits = predict_masks(model, samples, exp.data.eval_batch)
        for s, lg in zip(samples, logits):
            stem = f"grounding_{s.meta['seed']}"
            (mdir / f"{stem}.mgm").write_bytes(S.encode_mask(lg > 0))
            (mdir / f"{stem}.mgl").write_bytes(S.encode_logits(lg))
    if file_sha256(args.ckpt) != before:
        raise CheckpointError("checkpoint changed during evaluation")
    sys.stdout.write(report.to_text())
    return 0


def cmd_route_report(args) -> int:
    exp = _experiment(args)
    out = _out(args)
    model = load_checkpoint(args.ckpt)
    if not model.is_moe:
        raise ConfigurationError("route-report needs a checkpoint with MoE layers")
    with T.dtype_scope(exp.run.dtype):
        samples = [s for task in EVAL_TASKS for s in eval_samples(args.split, task, exp.data.n_test)]
        rows = routing_report(model, samples, exp.data.eval_batch)
    text = "".join(r.record() + "\n" for r in rows)
    (out / "routing.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (defaults built in)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", default="runs/out", help="output directory")

    g = sub.add_parser("gen-data", help="write a synthetic dataset with manifest")
    common(g)
    g.add_argument("--split", default="test", choices=sorted(D.SPLIT_BASE))
    g.add_argument("--n", type=int, default=16, help="samples per task")
    g.add_argument("--tasks", nargs="*", help=f"subset of {', '.join(D.TASKS)}")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the configured schedule, save checkpoints and reports")
    common(t)
    t.add_argument("--no-eval", action="store_true", help="skip the final evaluation")
    t.add_argument("-v", "--verbose", action="store_true", help="echo periodic step records")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (read-only)")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--export-masks", action="store_true", help="write MGM1/MGL1 predictions")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("route-report", help="per-layer expert load table")
    common(r)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--split", default="test", choices=["train", "test"])
    r.set_defaults(func=cmd_route_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ConfigurationError, CheckpointError, TrainingError, InputError, T.ContractError,
            S.FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
