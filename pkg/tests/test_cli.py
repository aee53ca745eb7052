import json

import numpy as np
import pytest

from mgmoe.cli import main
from mgmoe.serialize import decode_image, decode_logits, decode_mask
from mgmoe.training import file_sha256, load_checkpoint

TINY_CFG = """\
[model]
vision_dim = 16
llm_dim = 16
layers = 1
pixel_dim = 8
lora_r = 2
lora_alpha = 4.0
prompt_samples = 4

[data]
n_test = 4
n_zeroshot = 2
eval_batch = 8
max_new_tokens = 3

[stageI]
steps = 2
batch_size = 4
[stageII]
steps = 2
batch_size = 4
[stageIII]
steps = 2
batch_size = 4
[stageIV]
steps = 2
batch_size = 4
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    return cfg, out


def test_train_writes_all_artifacts(trained):
    _, out = trained
    for i, tag in enumerate(("I", "II", "III", "IV"), start=1):
        ckpt = out / f"s{i}.mgt"
        assert ckpt.exists()
        manifest = json.loads((out / f"s{i}.manifest.json").read_text())
        assert manifest["stage"] == tag
    recs = [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in recs] == ["I"] * 2 + ["II"] * 2 + ["III"] * 2 + ["IV"] * 2
    assert all(len(r["loads"]) == 1 for r in recs if r["stage"] == "IV")
    summary = json.loads((out / "report.json").read_text())
    assert 0 <= summary["mean_score"] <= 1
    assert (out / "routing.txt").read_text().count("layer=0") == 2


def test_train_is_deterministic(trained, tmp_path):
    cfg, out = trained
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path), "--no-eval"]) == 0
    assert file_sha256(tmp_path / "s4.mgt") == file_sha256(out / "s4.mgt")


def test_eval_leaves_checkpoint_untouched(trained, tmp_path, capsys):
    cfg, out = trained
    ckpt = out / "s4.mgt"
    before = file_sha256(ckpt)
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--ckpt", str(ckpt), "--out", str(tmp_path),
                 "--export-masks"]) == 0
    assert file_sha256(ckpt) == before
    text = capsys.readouterr().out
    assert text == (tmp_path / "report.tsv").read_text()
    assert text == (out / "report.tsv").read_text()
    masks = sorted((tmp_path / "masks").glob("*.mgm"))
    assert len(masks) == 4
    m = decode_mask(masks[0].read_bytes())
    lg = decode_logits(masks[0].with_suffix(".mgl").read_bytes())
    assert m.shape == (28, 28) and np.array_equal(m, lg > 0)


def test_route_report_fractions(trained, tmp_path, capsys):
    cfg, out = trained
    capsys.readouterr()
    assert main(["route-report", "--config", str(cfg), "--ckpt", str(out / "s4.mgt"),
                 "--out", str(tmp_path)]) == 0
    rows = [dict(kv.split("=") for kv in line.split()) for line in capsys.readouterr().out.splitlines()]
    assert len(rows) == 2
    assert abs(sum(float(r["fraction"]) for r in rows) - 1.0) < 1e-6
    assert main(["route-report", "--config", str(cfg), "--ckpt", str(out / "s2.mgt"),
                 "--out", str(tmp_path)]) == 1


def test_gen_data(tmp_path):
    assert main(["gen-data", "--split", "test", "--n", "3", "--out", str(tmp_path)]) == 0
    recs = [json.loads(x) for x in (tmp_path / "manifest.jsonl").read_text().splitlines()]
    assert len(recs) == 12
    for r in recs:
        assert decode_image((tmp_path / r["image"]).read_bytes()).shape == (28, 28, 3)
        assert (r["mask"] is not None) == (r["task"] == "grounding")
        assert (r["region"] is not None) == (r["task"] == "region-vqa")
    assert main(["gen-data", "--split", "zeroshot", "--n", "2", "--out", str(tmp_path / "z")]) == 0
    z = [json.loads(x) for x in (tmp_path / "z" / "manifest.jsonl").read_text().splitlines()]
    assert {r["meta"]["category"] for r in z} <= {"ring", "blob"}


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nlayers = 1\nwidth = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.cfg:3:" in capsys.readouterr().err
    assert main(["eval", "--ckpt", str(tmp_path / "missing.mgt"), "--out", str(tmp_path)]) == 1


def test_loaded_checkpoint_matches_manifest(trained):
    _, out = trained
    m = load_checkpoint(out / "s3.mgt")
    assert m.provenance == ["I", "II", "III"] and not m.is_moe
