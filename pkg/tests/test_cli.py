import csv
import json
from pathlib import Path

import pytest

from cmetrack.cli import VARIANTS, main
from cmetrack.dfl import dfl_init_params, save_params
from cmetrack.io import load_feature_map

SCENARIOS = Path(__file__).parents[1] / "scenarios"
DRIFT = str(SCENARIOS / "drift_distractor.toml")
STATIC = str(SCENARIOS / "static.toml")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_writes_files_and_is_deterministic(tmp_path):
    assert main(["gen", "--scenario", STATIC, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--scenario", STATIC, "--out", str(tmp_path / "b")]) == 0
    a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "frame_000.fm" in a and "truth_009.pgm" in a and "scenario.json" in a
    for name in a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_feature_map(tmp_path / "a" / "frame_000.fm").c == 8


def test_gen_missing_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("h = 8\nw = 8\nc = 4\n[trajectory]\ncenter = 3\nradius = 1\n")
    assert main(["gen", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "frame_count" in capsys.readouterr().err


def test_run_defaults_and_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--scenario", DRIFT, "--out", str(out), "--save-masks"]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    cfg = metrics["config"]
    assert (cfg["topk"], cfg["zeta"], cfg["beta"]) == (3, 0.90, 0.001)
    assert metrics["version"] == "0.1.0"
    rows = _rows(out / "frames.csv")
    assert list(rows[0]) == ["frame", "iou", "bank_size", "merged", "expanded", "discarded"]
    assert len(rows) == 30
    assert len(list((out / "masks").glob("*.pgm"))) == 30
    lines = (out / "reports.jsonl").read_text().splitlines()
    assert len(lines) == 30 and "merged" in json.loads(lines[1])


def test_run_initial_only_keeps_bank_size(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--scenario", DRIFT, "--strategy", "initial-only", "--out", str(out)]) == 0
    sizes = {r["bank_size"] for r in _rows(out / "frames.csv")}
    assert len(sizes) == 1


def test_run_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["run", "--scenario", DRIFT, "--dfl", "full", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "frames.csv").read_bytes() == (tmp_path / "b" / "frames.csv").read_bytes()


def test_run_from_generated_directory_matches_toml(tmp_path):
    assert main(["gen", "--scenario", DRIFT, "--out", str(tmp_path / "seq")]) == 0
    assert main(["run", "--scenario", str(tmp_path / "seq"), "--out", str(tmp_path / "d")]) == 0
    assert main(["run", "--scenario", DRIFT, "--out", str(tmp_path / "t")]) == 0
    assert (tmp_path / "d" / "frames.csv").read_bytes() == (tmp_path / "t" / "frames.csv").read_bytes()


def test_run_with_param_file(tmp_path):
    p = tmp_path / "params.txt"
    save_params(dfl_init_params(0, 8, 4), p)
    assert main(["run", "--scenario", STATIC, "--dfl", "full", "--dfl-params", str(p), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["config"]["dfl_hidden"] == 4


def test_run_missing_scenario_exits_2(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 2


def test_run_bad_override_exits_2(tmp_path):
    assert main(["run", "--scenario", DRIFT, "--zeta", "1.5", "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_value_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--scenario", DRIFT, "--strategy", "bogus", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_ablate_rows_and_summary(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--scenario", DRIFT, "--seeds", "0,1", "--out", str(out)]) == 0
    rows = _rows(out / "ablation.csv")
    assert len(rows) == 12
    assert [r["variant"] for r in rows[:6]] == list(VARIANTS)
    summary = _rows(out / "ablation_summary.csv")
    assert [r["variant"] for r in summary] == list(VARIANTS)


def test_ablate_needs_two_variants(tmp_path):
    assert main(["ablate", "--scenario", DRIFT, "--variants", "+cme", "--out", str(tmp_path)]) == 2
    assert main(["ablate", "--scenario", DRIFT, "--variants", "+cme,nope", "--out", str(tmp_path)]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--zero-mask"]) == 0
    assert main(["gradcheck", "--corrupt-gradient"]) == 1
    assert "W_c" in capsys.readouterr().out
    assert main(["gradcheck", "--size", "5x5x2"]) == 2
