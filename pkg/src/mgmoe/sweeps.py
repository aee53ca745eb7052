"""Multi-run comparisons: full schedule vs joint-only, and a router-setting grid."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .evaluate import EvalReport
from .experiment import evaluate_config, run_experiment, train_schedule
from .moe import RouterConfig

ABLATION_SEEDS = (7, 8, 9, 10, 11)
ROUTER_GRID = tuple((cf, k) for cf in (1.0, 1.5, 2.0) for k in (1, 2))

COLUMNS = ("closed", "precision", "recall", "mdice_seen", "mdice_zeroshot", "mean")


def score_row(report: EvalReport) -> tuple:
    """Values in :data:`COLUMNS` order."""
    return (report.closed_accuracy, report.token_precision, report.token_recall,
            report.mean_mdice_seen, report.mean_mdice_zeroshot, report.mean_score)


def summary_row(summary: dict) -> tuple:
    """:func:`score_row` from a ``report.json`` summary."""
    return (summary["closed_accuracy"], summary["token_precision"], summary["token_recall"],
            summary["mdice_seen_mean"], summary["mdice_zeroshot_mean"], summary["mean_score"])


def with_schedule(exp: ExperimentConfig, schedule: str) -> ExperimentConfig:
    return dataclasses.replace(exp, run=dataclasses.replace(exp.run, schedule=schedule))


@dataclass
class AblationRow:
    seed: int
    full: tuple
    joint: tuple

    @property
    def margin(self) -> float:
        return self.full[-1] - self.joint[-1]


def stage_ablation(exp: ExperimentConfig, seeds=ABLATION_SEEDS, known: dict | None = None,
                   echo=None) -> list:
    """Full vs joint-only scores per seed.

    ``known`` maps ``(schedule, seed)`` to the :func:`score_row` of a run
    already made elsewhere, so it is not repeated.
    """
    known = dict(known or {})
    rows = []
    for seed in seeds:
        scores = {}
        for schedule in ("full", "joint"):
            if (schedule, seed) not in known:
                known[schedule, seed] = score_row(
                    run_experiment(with_schedule(exp, schedule).with_seed(seed)).report)
            scores[schedule] = known[schedule, seed]
        rows.append(AblationRow(seed, scores["full"], scores["joint"]))
        if echo is not None:
            echo(f"seed {seed}: full {scores['full'][-1]:.4f} joint {scores['joint'][-1]:.4f}")
    return rows


def router_table(exp: ExperimentConfig, base: dict, grid=ROUTER_GRID, echo=None) -> list:
    """Stage IV under each ``(capacity_factor, top_k)`` from the same stage II/III models.

    ``base`` holds the ``"II"`` and ``"III"`` models; they are not modified.
    Returns ``(cf, top_k, *score_row)`` tuples.
    """
    rows = []
    for cf, k in grid:
        cfg = dataclasses.replace(exp, moe=RouterConfig(top_k=k, capacity_factor=cf,
                                                        num_experts=exp.moe.num_experts))
        start = {"II": base["II"].clone(), "III": base["III"].clone()}
        model = train_schedule(cfg, start=start)["IV"]
        row = (cf, k) + score_row(evaluate_config(model, cfg))
        rows.append(row)
        if echo is not None:
            echo(format_row(row))
    return rows


def format_row(row) -> str:
    cf, k, *vals = row
    return f"{cf:>4.1f} {k:>5d} " + " ".join(f"{v:>14.4f}" for v in vals)


def format_table(rows) -> str:
    head = "  CF top_k " + " ".join(f"{c:>14s}" for c in COLUMNS)
    return "\n".join([head] + [format_row(r) for r in rows]) + "\n"


def format_ablation(rows) -> str:
    lines = [f"seed {'full':>8s} {'joint':>8s} {'margin':>8s}"]
    for r in rows:
        lines.append(f"{r.seed:>4d} {r.full[-1]:>8.4f} {r.joint[-1]:>8.4f} {r.margin:>+8.4f}")
    full = np.mean([r.full[-1] for r in rows])
    joint = np.mean([r.joint[-1] for r in rows])
    lines.append(f"mean {full:>8.4f} {joint:>8.4f} {full - joint:>+8.4f}")
    return "\n".join(lines) + "\n"
