"""Run a whole schedule from an :class:`ExperimentConfig` and write its artifacts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import tensor as T
from .config import ExperimentConfig
from .evaluate import EvalReport, evaluate
from .model import MultimodalModel
from .training import (build_moe_from_experts, config_hash, joint_moe, run_stage,
                       save_checkpoint)


@dataclass
class RunResult:
    models: dict                      # stage tag -> model after that stage
    report: EvalReport | None
    log: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    @property
    def final(self) -> MultimodalModel:
        return self.models["IV"]


def train_schedule(exp: ExperimentConfig, log=None, upto_stage: str = "IV",
                   start: dict | None = None) -> dict:
    """Models after each stage of the configured schedule.

    ``start`` may hold already-trained ``"II"`` and ``"III"`` models, in which
    case only stage IV is run (used to sweep router settings cheaply).
    """
    with T.dtype_scope(exp.run.dtype):
        return _train_schedule(exp, log, upto_stage, start)


def _train_schedule(exp, log, upto_stage, start):
    seed = exp.run.seed
    models = {}
    if exp.run.schedule == "joint":
        m = joint_moe(MultimodalModel(exp.model, seed=seed), exp.moe, seed)
        models["IV"] = run_stage(exp.stage("IV"), m, log=log)[0]
        return models
    if start is None:
        m = MultimodalModel(exp.model, seed=seed)
        models["I"] = run_stage(exp.stage("I"), m, log=log)[0].clone()
        if upto_stage == "I":
            return models
        models["II"] = run_stage(exp.stage("II"), m, log=log)[0].clone()
        if upto_stage == "II":
            return models
        models["III"] = run_stage(exp.stage("III"), m, log=log)[0].clone()
        if upto_stage == "III":
            return models
    else:
        models.update(start)
    m4 = build_moe_from_experts(models["II"], models["III"], exp.moe, seed)
    models["IV"] = run_stage(exp.stage("IV"), m4, log=log)[0]
    return models


def evaluate_config(model: MultimodalModel, exp: ExperimentConfig, split: str = "test") -> EvalReport:
    d = exp.data
    with T.dtype_scope(exp.run.dtype):
        return evaluate(model, split, d.n_test, d.n_zeroshot, d.eval_batch, d.max_new_tokens)


def run_experiment(exp: ExperimentConfig, out: Path | None = None, do_eval: bool = True,
                   echo=None) -> RunResult:
    """Train, optionally evaluate, and (with ``out``) write checkpoints, logs and reports.

    Files under ``out``: ``s1.mgt`` .. ``s4.mgt`` with manifests (only
    ``s4.mgt`` for the joint schedule), ``metrics.jsonl``, ``report.tsv``,
    ``report.json`` and ``routing.txt``.
    """
    records = []

    def log(rec):
        records.append(rec)
        if echo is not None and (rec.step % 50 == 0 or rec.step == 0):
            echo(rec.to_json())

    models = train_schedule(exp, log=log)
    report = evaluate_config(models["IV"], exp) if do_eval else None
    result = RunResult(models, report, records)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cfg = exp.to_dict()
        for i, tag in enumerate(("I", "II", "III", "IV"), start=1):
            if tag in models:
                path = out / f"s{i}.mgt"
                save_checkpoint(models[tag], path, cfg)
                result.checkpoints[tag] = path
        (out / "metrics.jsonl").write_text("".join(r.to_json() + "\n" for r in records))
        (out / "config.hash").write_text(config_hash(cfg) + "\n")
        if report is not None:
            (out / "report.tsv").write_text(report.to_text())
            (out / "report.json").write_text(report.to_json())
            (out / "routing.txt").write_text("".join(r.record() + "\n" for r in report.loads))
    return result


def summarize(records: list) -> dict:
    """First and last total loss per stage."""
    out: dict = {}
    for r in records:
        s = out.setdefault(r.stage, {"first": r.losses["total"], "last": None, "steps": 0})
        s["last"] = r.losses["total"]
        s["steps"] += 1
    return json.loads(json.dumps(out))
