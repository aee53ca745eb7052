"""Acceptance suite: one test per criterion, each recording a PASS/FAIL verdict line.

The end-to-end criteria (6, 7, 8, 10) share one seed-7 run of the default
config through the CLI; in total the file trains for roughly forty minutes on
one core.
"""

import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mgmoe import tensor as T
from mgmoe.cli import main
from mgmoe.config import ExperimentConfig, load_config
from mgmoe.losses import bce_loss, cross_entropy_loss, dice_loss
from mgmoe.metrics import mdice, token_precision_recall
from mgmoe.model import MultimodalModel, param_group
from mgmoe.moe import (IMAGE, TEXT, Expert, MoELayer, RouterConfig, dense_moe_reference, dispatch,
                       expert_forward, expert_load_stats, moe_forward)
from mgmoe.nn import PlainFFN
from mgmoe.sweeps import (ABLATION_SEEDS, format_ablation, format_table, router_table, stage_ablation,
                          summary_row)
from mgmoe.tensor import Tensor
from mgmoe.training import (STAGE_GROUPS, build_moe_from_experts, file_sha256, load_checkpoint,
                            run_stage)

from acceptance_log import criterion
from gradcases import CASES, MODULES, OPS, check
from oracles import mdice_loop, precision_recall_recount, random_masks, random_tokens

ROOT = Path(__file__).resolve().parents[1]
FULL_CFG = ROOT / "configs" / "full.cfg"

pytestmark = pytest.mark.slow


def random_layer(rng, dim=8, top_k=2, cf=2.0):
    experts = []
    for _ in range(2):
        e = Expert(PlainFFN(dim, rng, hidden=2 * dim), r=2, alpha=4.0, rng=rng)
        for ad in (e.lora1, e.lora2):
            ad.B.data[:] = rng.normal(0.0, 0.3, size=ad.B.shape)
        experts.append(e)
    layer = MoELayer(experts, dim, RouterConfig(top_k=top_k, capacity_factor=cf))
    layer.router.weight.data[:] = rng.normal(0.0, 1.0, size=layer.router.weight.shape)
    return layer


def test_1_gradient_suite():
    with criterion(1, "gradient suite: central differences, double precision") as rec:
        assert {"encoder_path", "moe_layer", "mask_decoder", "cross_entropy", "bce", "dice"} <= set(MODULES)
        t0 = time.perf_counter()
        worst, where = 0.0, None
        for name in CASES:
            for seed in range(100):
                err = check(name, seed)
                if err > worst:
                    worst, where = err, (name, seed)
        elapsed = time.perf_counter() - t0
        rec["note"] = (f"{len(OPS)} ops + {len(MODULES)} modules x 100 cases, worst rel {worst:.1e} "
                       f"at {where}, {elapsed:.0f}s")
        assert worst < 1e-4
        assert elapsed < 120


def test_2_dense_equivalence():
    with criterion(2, "MoE dense-equivalence oracle (top_k=2, CF=2)") as rec:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(1000):
            layer = random_layer(rng)
            x = rng.normal(size=(int(rng.integers(1, 33)), 8))
            worst = max(worst, float(np.max(np.abs(moe_forward(layer, Tensor(x)).data
                                                   - dense_moe_reference(layer, x)))))
        rec["note"] = f"1000 batches, max abs diff {worst:.1e}"
        assert worst < 1e-10


def test_3_lora_zero_identity():
    with criterion(3, "LoRA-zero identity at stage-IV assembly") as rec:
        exp = ExperimentConfig()
        short = {s: dataclasses.replace(exp.stages[s], steps=5) for s in ("I", "II", "III")}
        with T.dtype_scope(np.float32):
            m = MultimodalModel(exp.model, seed=3)
            run_stage(short["I"].build("I", 3), m)
            m2 = run_stage(short["II"].build("II", 3), m)[0].clone()
            m3 = run_stage(short["III"].build("III", 3), m2.clone())[0]
            m4 = build_moe_from_experts(m2, m3, exp.moe)
            rng = np.random.default_rng(3)
            checked = 0
            for b, layer in enumerate(m4.moe_layers()):
                assert not np.array_equal(m2.blocks[b].ffn.fc1.weight.data, m3.blocks[b].ffn.fc1.weight.data)
                for e, src in enumerate((m2, m3)):
                    x = Tensor(rng.normal(size=(40, exp.model.llm_dim)))
                    assert np.array_equal(expert_forward(layer.experts[e], x).data, src.blocks[b].ffn(x).data)
                    checked += 1
        rec["note"] = f"{checked} (block, expert) pairs bit-exact"


def test_4_capacity_law():
    with criterion(4, "capacity law and identity pass-through") as rec:
        rng = np.random.default_rng(4)
        layer = random_layer(rng, dim=4)
        n_dropped = 0
        for _ in range(10_000):
            n = int(rng.integers(1, 65))
            cfg = RouterConfig(top_k=int(rng.integers(1, 3)), capacity_factor=float(rng.uniform(0.1, 3.0)))
            cap = math.ceil(cfg.capacity_factor * n / 2)
            plan = dispatch(rng.dirichlet([1.0, 1.0], size=n), cfg)
            assert plan.capacity == cap
            assert all(k.size <= cap for k in plan.kept)
            layer.cfg = cfg
            layer.router.weight.data[:] = rng.normal(0.0, 2.0, size=layer.router.weight.shape)
            x = rng.normal(size=(n, 4))
            out = moe_forward(layer, Tensor(x)).data
            fwd = layer.last_plans[0]
            assert all(k.size <= cap for k in fwd.kept)
            d = fwd.dropped_tokens
            assert np.array_equal(out[d], x[d])
            n_dropped += d.size
        plan = dispatch(np.tile([0.8, 0.2], (8, 1)), RouterConfig(top_k=1, capacity_factor=1.0))
        assert plan.capacity == 4 and plan.kept[0].size == 4
        rec["note"] = f"10^4 cases, {n_dropped} dropped tokens passed through unchanged"


def _tensor_hashes(model):
    return {n: hashlib.sha256(p.data.tobytes()).hexdigest() for n, p in model.named_parameters()}


def test_5_freeze_contract():
    with criterion(5, "freeze contract, 50 steps per stage") as rec:
        exp = ExperimentConfig()
        counts = []
        with T.dtype_scope(np.float32):
            model = MultimodalModel(exp.model, seed=5)
            models = {}
            for stage in ("I", "II", "III", "IV"):
                if stage == "IV":
                    model = build_moe_from_experts(models["II"], models["III"], exp.moe, seed=5)
                elif stage == "III":
                    model = models["II"].clone()
                before = _tensor_hashes(model)
                run_stage(dataclasses.replace(exp.stages[stage], steps=50).build(stage, 5), model)
                after = _tensor_hashes(model)
                frozen = [n for n in before if param_group(n) not in STAGE_GROUPS[stage]]
                moved = [n for n in before if before[n] != after[n]]
                assert all(before[n] == after[n] for n in frozen), stage
                assert moved, stage
                counts.append(f"{stage}:{len(frozen)} frozen/{len(moved)} updated")
                models[stage] = model.clone()
        rec["note"] = ", ".join(counts)


def test_9_metric_oracles():
    with criterion(9, "metric oracles (mdice, token P/R, routing counts)") as rec:
        rng = np.random.default_rng(9)
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            pairs = [random_masks(rng) for _ in range(n)]
            classes = list(rng.choice(["a", "b", "c"], size=n))
            per, mean = mdice([p for p, _ in pairs], [g for _, g in pairs], classes)
            per_o, mean_o = mdice_loop([p for p, _ in pairs], [g for _, g in pairs], classes)
            assert all(abs(per[c] - per_o[c]) <= 1e-12 for c in per_o) and abs(mean - mean_o) <= 1e-12
        for _ in range(1000):
            pred, gt = random_tokens(rng), random_tokens(rng)
            got, want = token_precision_recall(pred, gt), precision_recall_recount(pred, gt)
            assert abs(got[0] - want[0]) <= 1e-12 and abs(got[1] - want[1]) <= 1e-12
        for _ in range(1000):
            plans = []
            for _ in range(int(rng.integers(1, 4))):
                n = int(rng.integers(1, 200))
                cfg = RouterConfig(top_k=int(rng.integers(1, 3)), capacity_factor=float(rng.uniform(0.3, 2.5)))
                plans.append(dispatch(rng.dirichlet([1, 1], size=n), cfg, rng.choice([IMAGE, TEXT], size=n)))
            stats = expert_load_stats(plans)
            kept = np.zeros(2)
            image = np.zeros(2)
            for p in plans:
                for t in range(p.n_tokens):
                    for e in range(2):
                        if t in p.kept[e]:
                            kept[e] += 1
                            image[e] += p.origins[t] == IMAGE
            assert stats.kept.tolist() == kept.tolist() and stats.image.tolist() == image.tolist()
            assert np.all(np.abs(stats.fraction - kept / kept.sum()) <= 1e-12)
        rec["note"] = "3 x 1000 cases"


def test_11_loss_analytics():
    with criterion(11, "loss analytics") as rec:
        ce = float(cross_entropy_loss(Tensor(np.zeros((6, 512))), np.arange(6) * 80).data)
        rng = np.random.default_rng(11)
        gt = rng.random((28, 28)) < 0.5
        bce = float(bce_loss(Tensor(np.zeros((28, 28))), gt).data)
        dl = float(dice_loss(Tensor(np.where(gt, 60.0, -60.0)), gt).data)
        rec["note"] = f"CE-ln512 {ce - np.log(512):.1e}, BCE-ln2 {bce - np.log(2):.1e}, dice {dl:.1e}"
        assert abs(ce - np.log(512)) < 1e-9
        assert abs(bce - np.log(2)) < 1e-12
        assert dl < 1e-6


# ---------------------------------------------------------------------------
# End-to-end criteria on the default configuration
# ---------------------------------------------------------------------------

def _train(out: Path) -> float:
    t0 = time.perf_counter()
    assert main(["train", "--config", str(FULL_CFG), "--seed", "7", "--out", str(out)]) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def seed7(tmp_path_factory):
    out = tmp_path_factory.mktemp("seed7")
    elapsed = _train(out)
    return {"out": out, "elapsed": elapsed, "summary": json.loads((out / "report.json").read_text())}


def test_6_synthetic_end_to_end(seed7):
    with criterion(6, "synthetic end-to-end, full I->IV schedule, seed 7") as rec:
        s = seed7["summary"]
        rec["note"] = (f"closed {s['closed_accuracy']:.3f} (>=0.90), seen mDice {s['mdice_seen_mean']:.3f} "
                       f"(>=0.85), zero-shot mDice {s['mdice_zeroshot_mean']:.3f} (>=0.50), "
                       f"{seed7['elapsed']:.0f}s (<300)")
        assert s["closed_accuracy"] >= 0.90
        assert s["mdice_seen_mean"] >= 0.85
        assert s["mdice_zeroshot_mean"] >= 0.50
        assert seed7["elapsed"] < 300


def test_10_determinism(seed7, tmp_path):
    with criterion(10, "determinism of train --config full.cfg --seed 7") as rec:
        _train(tmp_path)
        a, b = seed7["out"], tmp_path
        for name in ("s1.mgt", "s2.mgt", "s3.mgt", "s4.mgt"):
            assert file_sha256(a / name) == file_sha256(b / name), name
        for name in ("report.json", "report.tsv", "routing.txt", "metrics.jsonl"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        rec["note"] = f"s4.mgt sha256 {file_sha256(b / 's4.mgt')[:16]}..., reports identical"


def test_7_stage_ablation(seed7):
    with criterion(7, "stage ablation: full >= joint-only, 5 seeds") as rec:
        exp = load_config(FULL_CFG)
        rows = stage_ablation(exp, ABLATION_SEEDS, known={("full", 7): summary_row(seed7["summary"])})
        full = float(np.mean([r.full[-1] for r in rows]))
        joint = float(np.mean([r.joint[-1] for r in rows]))
        wins = sum(r.margin >= 0 for r in rows)
        rec["note"] = f"mean score full {full:.4f} vs joint {joint:.4f}; full >= joint on {wins}/5 seeds"
        rec["extra"] = format_ablation(rows).splitlines()
        assert full >= joint


def test_8_router_table(seed7):
    with criterion(8, "CF x top-k table, reproduced deterministically") as rec:
        exp = load_config(FULL_CFG).with_seed(7)
        out = seed7["out"]
        base = {"II": load_checkpoint(out / "s2.mgt"), "III": load_checkpoint(out / "s3.mgt")}
        first = router_table(exp, base)
        second = router_table(exp, base)
        rec["extra"] = format_table(first).splitlines()
        assert len(first) == 6 and all(np.all(np.isfinite(r[2:])) for r in first)
        assert first == second
        rec["note"] = "6 settings, identical on rebuild"
