import json
import subprocess
import sys
from pathlib import Path

import pytest

from dslab import cli
from dslab.benchmark import read_benchmark

from conftest import PIPELINE, tree_bytes


def run_pipeline(root: Path, config: Path) -> list[int]:
    return [cli.main([*cmd, "--config", str(config), "--out", str(root)]) for cmd in PIPELINE]


@pytest.fixture(scope="module")
def runs(tmp_path_factory, tiny_config):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    codes = run_pipeline(a, tiny_config) + run_pipeline(b, tiny_config)
    return a, b, codes


def test_pipeline_runs_every_subcommand(runs):
    a, _, codes = runs
    assert codes == [0] * (2 * len(PIPELINE))
    for sub in ("scenes", "bench", "pairs", "instructions", "encoder", "zeroshot", "ratio_search", "align",
                "sft", "eval_bench", "ablate_sft", "report"):
        assert (a / sub / "config.json").exists(), sub
    for fig in ("loss_curves.png", "ratio_search.png", "task_accuracy.png"):
        assert (a / "report" / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_reruns_are_byte_identical(runs):
    a, b, _ = runs
    left, right = tree_bytes(a), tree_bytes(b)
    assert left.keys() == right.keys()
    assert [k for k in left if left[k] != right[k]] == []


def test_report_prints_delimited_table(runs, tiny_config, capsys):
    a, _, _ = runs
    assert cli.main(["report", "--config", str(tiny_config), "--out", str(a)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "model|SceneClassification|Recognition|DistanceJudge|Security|Avg."
    assert lines[1].startswith("dslab-sft|")
    assert all(line.count("|") == 5 for line in lines)


def test_ratio_search_csv_covers_grid(runs):
    a, _, _ = runs
    rows = (a / "ratio_search" / "ratio_search.csv").read_text().splitlines()
    assert rows[0] == "ratio,zero_shot_top1"
    assert [r.split(",")[0] for r in rows[1:]] == ["0.00", "0.05", "0.10", "0.15", "0.20", "0.25", "0.30"]


def test_ground_truth_responses_score_perfectly(runs, tiny_config, tmp_path):
    a, _, _ = runs
    items = read_benchmark(a / "bench" / "benchmark.jsonl")
    resp = tmp_path / "truth.jsonl"
    resp.write_text("".join(json.dumps({"item_id": it.item_id, "text": it.answer}) + "\n" for it in items))
    out = tmp_path / "scored"
    (out / "bench").mkdir(parents=True)
    (out / "bench" / "benchmark.jsonl").write_bytes((a / "bench" / "benchmark.jsonl").read_bytes())
    assert cli.main(["eval-bench", "--config", str(tiny_config), "--out", str(out), "--responses", str(resp)]) == 0
    report = json.loads((out / "eval_bench" / "report.json").read_text())
    assert report["macro_average"] == 1.0


def test_ablate_rows(runs):
    a, _, _ = runs
    rows = json.loads((a / "ablate_sft" / "report.json").read_text())["rows"]
    assert [(r["config"], r["train_mlp"], r["train_llm"]) for r in rows] == [
        ("mlp_only", True, False), ("llm_only", False, True), ("both", True, True)]


def test_missing_input_is_single_json_line(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dslab.cli", "train-encoder", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    lines = proc.stderr.strip().splitlines()
    assert len(lines) == 1
    err = json.loads(lines[0])
    assert err["error"] == "missing-input"
    assert err["produced_by"] == "build-pairs"
    assert err["path"].endswith("pairs.jsonl")


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["gen-scenes", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "missing-input"


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"epochz": 3}))
    assert cli.main(["gen-scenes", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigurationError"


def test_inputs_are_not_modified(runs, tiny_config, tmp_path):
    a, _, _ = runs
    before = tree_bytes(a / "scenes")
    bench = (a / "bench" / "benchmark.jsonl").read_bytes()
    out = tmp_path / "copy"
    out.mkdir()
    assert cli.main(["eval-zeroshot", "--config", str(tiny_config), "--out", str(a)]) == 0
    assert tree_bytes(a / "scenes") == before
    assert (a / "bench" / "benchmark.jsonl").read_bytes() == bench


def test_overrides_recorded(runs, tiny_config, tmp_path):
    a, _, _ = runs
    out = tmp_path / "ovr"
    for sub in ("scenes", "pairs"):
        (out / sub).parent.mkdir(parents=True, exist_ok=True)
    import shutil

    shutil.copytree(a / "scenes", out / "scenes")
    shutil.copytree(a / "pairs", out / "pairs")
    assert cli.main(["train-encoder", "--config", str(tiny_config), "--out", str(out), "--ratio", "1.0",
                     "--freeze-text", "--seed", "7"]) == 0
    meta = json.loads((out / "encoder" / "config.json").read_text())
    assert meta["overrides"] == {"freeze_text": True, "ratio": 1.0, "seed": 7}
    assert meta["config"]["encoder"]["sample_ratio"] == 1.0
    summary = json.loads((out / "encoder" / "summary.json").read_text())
    assert summary["replaced"] == summary["pairs"]
