"""End-to-end command-line runs on a toy configuration."""

import json

import pytest

from skillrec.cli import main

TOY_INI = """\
[synth]
num_skills = 6
num_titles = 3
num_jds = 120
num_users = 120
[model]
d = 8
num_layers = 1
n_local = 1
n_global = 1
max_items = 8
[recall]
negatives = 100
[train]
max_epochs = 2
batch_size = 16
[rank]
max_epochs = 2
"""


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    ini = root / "toy.ini"
    ini.write_text(TOY_INI)
    c = ["--config", ini]
    assert run("synth", *c, "--out", root / "data") == 0
    assert run("train-recall", *c, "--data", root / "data", "--out", root / "recall") == 0
    assert run("eval-recall", *c, "--checkpoint", root / "recall/recall_final.safetensors", "--data", root / "data",
               "--out", root / "er") == 0
    assert run("train-rank", *c, "--data", root / "data", "--recall-checkpoint", root / "recall/recall_final.safetensors",
               "--out", root / "rank") == 0
    assert run("eval-rank", *c, "--checkpoint", root / "rank/rank_final.safetensors", "--candidates",
               root / "er/candidates.jsonl", "--data", root / "data", "--out", root / "evr") == 0
    return root


def test_synth_then_validate(pipeline_dir, capsys):
    assert run("validate", pipeline_dir / "data", "--config", pipeline_dir / "toy.ini") == 0
    assert json.loads(capsys.readouterr().out) == {"ok": True, "violations": []}


def test_eval_recall_reports_ten_values(pipeline_dir):
    report = json.loads((pipeline_dir / "er/recall_report.json").read_text())
    values = [v for fam in ("recall", "ndcg") for v in report[fam].values()]
    assert len(values) == 10 and set(report["recall"]) == {"20", "40", "60", "80", "100"}
    assert all(0.0 <= v <= 1.0 for v in values)


def test_candidate_file(pipeline_dir):
    lines = (pipeline_dir / "er/candidates.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert len(first["jd_ids"]) == 100 and first["scores"] == sorted(first["scores"], reverse=True)


def test_eval_rank_outputs(pipeline_dir):
    report = json.loads((pipeline_dir / "evr/rank_report.json").read_text())
    assert 0.0 <= report["auc"] <= 1.0 and "per_user_auc" in report
    ranked = [json.loads(x) for x in (pipeline_dir / "evr/ranked.jsonl").read_text().splitlines()]
    assert all(r["scores"] == sorted(r["scores"], reverse=True) for r in ranked)


def test_recommend(pipeline_dir, capsys):
    assert run("recommend", "--checkpoint", pipeline_dir / "rank/rank_final.safetensors", "--data", pipeline_dir / "data",
               "--user-id", "u00001", "--k", 3, "--out", pipeline_dir / "rec") == 0
    out = json.loads((pipeline_dir / "rec/recommend_u00001.json").read_text())
    recs = out["recommendations"]
    assert len(recs) == 3
    assert [r["click_score"] for r in recs] == sorted((r["click_score"] for r in recs), reverse=True)
    first = recs[0]
    assert len(first["neighbors"]) == 2 and first["jd_id"] not in first["neighbors"]
    assert len(first["skill_attention"]) == 6 and sum(first["skill_attention"]) == pytest.approx(1.0, abs=1e-6)
    n_items = len(first["raw_items"])
    layer0 = first["cls_item_attention"][0]
    assert len(layer0) == 2 and len(layer0[0]) == n_items  # heads x real items


def test_unknown_user(pipeline_dir, capsys):
    code = run("recommend", "--checkpoint", pipeline_dir / "rank/rank_final.safetensors", "--data", pipeline_dir / "data",
               "--user-id", "ghost", "--out", pipeline_dir / "rec")
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1
    assert err[0].startswith("skillrec: error: DomainError:") and "ghost" in err[0]


def test_missing_file(tmp_path, capsys):
    assert run("validate", tmp_path / "nothing") != 0
    assert capsys.readouterr().err.startswith("skillrec: error: DatasetParseError:")


def test_bad_config(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[model]\nwidth = 3\n")
    assert run("synth", "--config", ini, "--out", tmp_path / "d") != 0
    assert "ConfigError" in capsys.readouterr().err


def test_skill_count_mismatch(pipeline_dir, tmp_path, capsys):
    ini = tmp_path / "other.ini"
    ini.write_text(TOY_INI.replace("num_skills = 6", "num_skills = 9"))
    assert run("synth", "--config", ini, "--out", tmp_path / "data9") == 0
    code = run("eval-recall", "--checkpoint", pipeline_dir / "recall/recall_final.safetensors", "--data", tmp_path / "data9",
               "--out", tmp_path / "er")
    assert code != 0 and "ContractViolation" in capsys.readouterr().err


def test_env_overrides_out(tmp_path, monkeypatch, pipeline_dir):
    monkeypatch.setenv("SKILLREC_OUT", str(tmp_path / "env"))
    assert run("synth", "--config", pipeline_dir / "toy.ini", "--out", tmp_path / "flag") == 0
    assert (tmp_path / "env/jds.jsonl").exists() and not (tmp_path / "flag").exists()


def test_commands_idempotent(pipeline_dir, tmp_path):
    c = ["--config", pipeline_dir / "toy.ini"]
    assert run("synth", *c, "--out", tmp_path / "data") == 0
    assert snapshot(tmp_path / "data") == snapshot(pipeline_dir / "data")
    assert run("train-recall", *c, "--data", tmp_path / "data", "--out", tmp_path / "recall") == 0
    assert snapshot(tmp_path / "recall") == snapshot(pipeline_dir / "recall")
    assert run("eval-recall", *c, "--checkpoint", tmp_path / "recall/recall_final.safetensors", "--data",
               tmp_path / "data", "--out", tmp_path / "er") == 0
    assert snapshot(tmp_path / "er") == snapshot(pipeline_dir / "er")


def test_seed_flag_changes_data(pipeline_dir, tmp_path):
    assert run("synth", "--config", pipeline_dir / "toy.ini", "--seed", 3, "--out", tmp_path / "d3") == 0
    assert snapshot(tmp_path / "d3") != snapshot(pipeline_dir / "data")
