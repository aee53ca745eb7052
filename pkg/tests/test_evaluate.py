import numpy as np
import pytest

from mgmoe import tensor as T
from mgmoe.evaluate import EvalReport, eval_samples, evaluate, greedy_generate, routing_report
from mgmoe.model import ModelConfig, MultimodalModel, build_batch
from mgmoe.moe import IMAGE, RouterConfig

TINY = ModelConfig(vision_dim=16, llm_dim=16, layers=2, pixel_dim=8, lora_r=2, lora_alpha=4.0,
                   prompt_samples=4)


def moe_model(seed=0, zero_router=False):
    m = MultimodalModel(TINY, seed=seed, moe=RouterConfig(top_k=1, capacity_factor=1.5))
    if not zero_router:
        rng = np.random.default_rng(seed)
        for layer in m.moe_layers():
            layer.router.weight.data[:] = rng.normal(0, 1.0, size=layer.router.weight.shape)
    return m


def samples(n=6):
    return [s for task in ("complex-vqa", "region-vqa", "grounding") for s in eval_samples("test", task, n)]


def test_zero_router_sends_everything_to_expert_zero():
    rows = routing_report(moe_model(zero_router=True), samples())
    for row in rows:
        assert row.fraction == (1.0 if row.expert == 0 else 0.0)


def test_routing_report_recount():
    model = moe_model()
    ss = samples()
    rows = routing_report(model, ss, batch_size=5)
    layers = model.moe_layers()
    kept = np.zeros((len(layers), 2))
    img = np.zeros((len(layers), 2))
    with T.no_grad():
        for i in range(0, len(ss), 5):
            batch = build_batch(ss[i:i + 5], TINY, with_targets=False)
            model.encode(batch)
            for j, layer in enumerate(layers):
                for plan in layer.last_plans:
                    for e in range(2):
                        for t in plan.kept[e]:
                            kept[j, e] += 1
                            img[j, e] += plan.origins[t] == IMAGE
    for row in rows:
        assert row.kept == kept[row.layer, row.expert]
        assert row.fraction == pytest.approx(kept[row.layer, row.expert] / kept[row.layer].sum(), abs=1e-12)
        assert row.image_fraction == pytest.approx(img[row.layer, row.expert] / img[row.layer].sum(), abs=1e-12)
    for j in range(len(layers)):
        assert abs(sum(r.fraction for r in rows if r.layer == j) - 1.0) < 1e-12


def test_dense_model_has_no_routing():
    assert routing_report(MultimodalModel(TINY, seed=0), samples(1)) == []


def test_greedy_generate_is_deterministic_and_bounded():
    model = moe_model()
    ss = samples(3)
    a = greedy_generate(model, ss, max_new_tokens=4, batch_size=4)
    b = greedy_generate(model, ss, max_new_tokens=4, batch_size=7)
    assert a == b and all(len(x) <= 4 for x in a)


def test_report_means_and_records():
    r = EvalReport(0.5, 0.6, 0.7, {"disk": 0.8, "square": 0.6}, {"ring": 0.9, "blob": 0.5})
    assert r.mean_mdice_seen == pytest.approx(0.7)
    assert r.mean_mdice_zeroshot == pytest.approx(0.7)
    assert r.mean_score == pytest.approx(np.mean([0.5, 0.6, 0.7, 0.7]))
    recs = r.records()
    assert ("mdice_seen", "disk", 0.8) in recs and ("mean_score", "-", r.mean_score) in recs
    lines = r.to_text().splitlines()
    assert len(lines) == len(recs) and all(len(x.split("\t")) == 3 for x in lines)
    assert r.summary()["mdice_seen_mean"] == r.mean_mdice_seen


def test_evaluate_is_read_only_and_deterministic():
    model = moe_model()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    a = evaluate(model, n=4, n_zeroshot=3, batch_size=8, max_new_tokens=3)
    b = evaluate(model, n=4, n_zeroshot=3, batch_size=8, max_new_tokens=3)
    assert a.to_json() == b.to_json()
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    assert set(a.mdice_zeroshot) <= {"ring", "blob"}
    assert a.counts["grounding"] == 4 and a.counts["zeroshot"] == 3
    assert 0 <= a.mean_score <= 1
