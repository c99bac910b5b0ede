"""Command-line interface: artifacts, exit codes, determinism, handoffs."""

from __future__ import annotations

import json
import textwrap

import pytest

from lungcad.cli import main
from lungcad.froc import ScoredCandidate, save_scores_csv


def run_cli(argv) -> int:
    """main() returns error codes; argparse usage errors raise SystemExit."""
    try:
        return main(argv)
    except SystemExit as e:
        return int(e.code)


def write_config(path, extra: str = "") -> str:
    path.write_text(textwrap.dedent("""\
        # fast settings for a small synthetic run
        synth.positives=10
        synth.negatives=200
        synth.separation=0.4
        synth.noise_sigma=0.05
        cascade.stages=2
        cascade.final=2
        folds.k=4
        sampler.majority_subsample=60
        sampler.oversample_factor=3
        train.stage.lr=0.005
        train.stage.epochs=3
        train.stage.batch_size=32
        train.final.lr=0.005
        train.final.epochs=3
        train.final.batch_size=32
        train.fusion.epochs=8
        """) + extra)
    return str(path)


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_dataset(tmp_path, capsys):
    out = tmp_path / "data"
    assert run_cli(["synth", "--seed", "3", "--out", str(out),
                    "--positives", "10", "--negatives", "90"]) == 0
    lines = (out / "candidates.csv").read_text().splitlines()
    assert len(lines) == 101
    assert (out / "patches.bin").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["dataset"] == {"candidates": 100, "positives": 10,
                                   "negatives": 90, "scans": 2}
    assert "wrote 100 candidates" in capsys.readouterr().out


def test_synth_byte_deterministic(tmp_path):
    args = ["synth", "--seed", "7", "--positives", "5", "--negatives", "40"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out", str(a)]) == 0
    assert run_cli(args + ["--out", str(b)]) == 0
    for name in ("candidates.csv", "patches.bin", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_rejects_bad_counts(tmp_path):
    assert run_cli(["synth", "--seed", "1", "--out", str(tmp_path / "d"),
                    "--positives", "10", "--negatives", "5"]) == 2
    assert run_cli(["synth", "--seed", "1", "--out", str(tmp_path / "d"),
                    "--positives", "0"]) == 2


def test_missing_seed_is_usage_error(tmp_path, capsys):
    assert run_cli(["synth", "--out", str(tmp_path / "d")]) == 2
    assert "seed" in capsys.readouterr().err


def test_missing_out_is_usage_error():
    assert run_cli(["synth", "--seed", "1"]) == 2


def test_missing_config_file_is_usage_error(tmp_path):
    assert run_cli(["synth", "--seed", "1", "--out", str(tmp_path / "d"),
                    "--config", str(tmp_path / "absent.cfg")]) == 2


def test_malformed_config_line_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("seed=1\nnot a pair\n")
    assert run_cli(["synth", "--out", str(tmp_path / "d"),
                    "--config", str(cfg)]) == 2
    assert ":2:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train-cascade

def test_train_cascade_writes_bundle(tmp_path):
    cfg = write_config(tmp_path / "run.cfg")
    out = tmp_path / "run"
    assert run_cli(["train-cascade", "--config", cfg, "--seed", "11",
                    "--out", str(out)]) == 0
    assert (out / "cascade" / "cascade.json").exists()
    assert (out / "cascade" / "stage1.lcnn").exists()
    assert (out / "cascade" / "stage2.lcnn").exists()
    assert (out / "cascade" / "final0.lcnn").exists()
    assert (out / "trace.csv").read_text().startswith(
        "candidate_id,stage_reached,score")
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["survivor_counts"]) == 2
    assert manifest["n_final_models"] == 2
    assert (out / "wall_time.txt").exists()


def test_train_cascade_no_stages_single_final(tmp_path):
    cfg = write_config(tmp_path / "run.cfg",
                       "cascade.stages=0\ncascade.final=1\n")
    out = tmp_path / "run"
    assert run_cli(["train-cascade", "--config", cfg, "--seed", "11",
                    "--out", str(out)]) == 0
    bundle = json.loads((out / "cascade" / "cascade.json").read_text())
    assert bundle["stages"] == []
    assert len(bundle["final_models"]) == 1
    assert not (out / "cascade" / "stage1.lcnn").exists()


def test_train_cascade_rerun_manifest_identical(tmp_path):
    cfg = write_config(tmp_path / "run.cfg")
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli(["train-cascade", "--config", cfg, "--seed", "11",
                        "--out", str(out)]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()


# ---------------------------------------------------------------------------
# pipeline

def test_pipeline_emits_report(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg")
    out = tmp_path / "run"
    assert run_cli(["pipeline", "--config", cfg, "--seed", "13",
                    "--out", str(out)]) == 0
    for name in ("candidates.csv", "trace.csv", "vectors.csv",
                 "cascade_scores.csv", "fusion_scores.csv", "froc.csv",
                 "froc.svg", "manifest.json", "wall_time.txt"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_models"] == 4
    assert manifest["folds"] == 4
    assert "pipeline complete" in capsys.readouterr().out


def test_pipeline_byte_deterministic(tmp_path):
    cfg = write_config(tmp_path / "run.cfg")
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli(["pipeline", "--config", cfg, "--seed", "13",
                        "--out", str(out)]) == 0
    for name in ("froc.csv", "vectors.csv", "manifest.json",
                 "fusion_scores.csv", "cascade_scores.csv", "froc.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_pipeline_seed_changes_scores_not_schema(tmp_path):
    cfg = write_config(tmp_path / "run.cfg")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["pipeline", "--config", cfg, "--seed", "13",
                    "--out", str(a)]) == 0
    assert run_cli(["pipeline", "--config", cfg, "--seed", "14",
                    "--out", str(b)]) == 0
    first = (a / "vectors.csv").read_text().splitlines()
    second = (b / "vectors.csv").read_text().splitlines()
    assert first[0] == second[0]
    assert first != second


def test_pipeline_failure_marks_partial_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.cfg", "fusion.hidden1=0\n")
    out = tmp_path / "run"
    assert run_cli(["pipeline", "--config", cfg, "--seed", "13",
                    "--out", str(out)]) == 1
    assert "phase train-fusion" in capsys.readouterr().err
    assert (out / "candidates.csv.partial").exists()
    assert (out / "vectors.csv.partial").exists()
    assert not (out / "candidates.csv").exists()
    assert not (out / "froc.csv").exists()


# ---------------------------------------------------------------------------
# staged handoff: synth -> train-cascade -> build-vectors -> train-fusion

def test_staged_commands_hand_off(tmp_path):
    data = tmp_path / "data"
    assert run_cli(["synth", "--seed", "5", "--out", str(data),
                    "--positives", "10", "--negatives", "90"]) == 0
    cfg = write_config(tmp_path / "run.cfg", textwrap.dedent(f"""\
        data.candidates={data / 'candidates.csv'}
        data.patches={data / 'patches.bin'}
        cascade.stages=1
        cascade.final=1
        folds.k=2
        """))
    casc = tmp_path / "casc"
    assert run_cli(["train-cascade", "--config", cfg, "--seed", "5",
                    "--out", str(casc)]) == 0
    vec = tmp_path / "vec"
    assert run_cli(["build-vectors", "--config", cfg, "--seed", "5",
                    "--cascade", str(casc / "cascade"),
                    "--out", str(vec)]) == 0
    header = (vec / "vectors.csv").read_text().splitlines()[0]
    assert header == "candidate_id,label,p1,p2"
    fus = tmp_path / "fus"
    assert run_cli(["train-fusion", "--config", cfg, "--seed", "5",
                    "--vectors", str(vec / "vectors.csv"),
                    "--out", str(fus)]) == 0
    assert (fus / "fusion0.lcnn").exists()
    assert (fus / "fusion1.lcnn").exists()
    rows = (fus / "fusion_scores.csv").read_text().splitlines()[1:]
    assert len(rows) == 100
    ids = [int(r.split(",")[0]) for r in rows]
    assert ids == sorted(ids)
    assert all(0.0 <= float(r.split(",")[3]) <= 1.0 for r in rows)


def test_train_fusion_needs_candidate_config(tmp_path):
    vectors = tmp_path / "vectors.csv"
    vectors.write_text("candidate_id,label,p1\n0,1,0.5\n")
    assert run_cli(["train-fusion", "--seed", "1", "--out", str(tmp_path / "f"),
                    "--vectors", str(vectors)]) == 2


# ---------------------------------------------------------------------------
# evaluate

def scores_fixture(path, labels):
    scored = [ScoredCandidate(i, f"s{i % 2}", int(lab), 0.1 + 0.8 * (i % 7) / 7)
              for i, lab in enumerate(labels)]
    save_scores_csv(scored, path)
    return path


def test_evaluate_reports_cpm(tmp_path, capsys):
    path = scores_fixture(tmp_path / "scores.csv", [1, 0, 0, 1, 0, 0, 0, 0])
    out = tmp_path / "report"
    assert run_cli(["evaluate", "--seed", "1", "--out", str(out),
                    "--scores", f"run={path}"]) == 0
    assert (out / "froc.csv").exists() and (out / "froc.svg").exists()
    assert "run: cpm=" in capsys.readouterr().out


def test_evaluate_without_positives_fails(tmp_path, capsys):
    path = scores_fixture(tmp_path / "scores.csv", [0, 0, 0, 0])
    assert run_cli(["evaluate", "--seed", "1", "--out", str(tmp_path / "r"),
                    "--scores", f"run={path}"]) == 1
    assert "no positive" in capsys.readouterr().err


def test_evaluate_requires_scores_flag(tmp_path):
    assert run_cli(["evaluate", "--seed", "1",
                    "--out", str(tmp_path / "r")]) == 2


def test_evaluate_rejects_unlabelled_scores(tmp_path):
    path = scores_fixture(tmp_path / "scores.csv", [1, 0])
    assert run_cli(["evaluate", "--seed", "1", "--out", str(tmp_path / "r"),
                    "--scores", str(path)]) == 2


# ---------------------------------------------------------------------------
# gradient-check

def test_gradient_check_passes(capsys):
    assert run_cli(["gradient-check", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 2 and "FAIL" not in out


def test_gradient_check_rejects_bad_seed_count():
    assert run_cli(["gradient-check", "--seeds", "0"]) == 2
