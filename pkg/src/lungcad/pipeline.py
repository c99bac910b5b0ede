"""End-to-end orchestration: data, cascade, vectors, fusion, FROC report.

Configuration is a flat key=value text file (# comments allowed) with CLI
overrides; every run derives all randomness from one root seed through
named sub-streams. A run directory receives the cascade bundle, trace and
score CSVs, vectors.csv, froc.csv/froc.svg and a deterministic
manifest.json (wall time goes to a separate wall_time.txt so the manifest
bytes depend only on config and seed).
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

from . import nn
from .cascade import (CascadeTrainConfig, infer_cascade, save_cascade,
                      train_cascade, trace_to_rows, _substream)
from .data import (CandidateRecord, PatchStore, SyntheticConfig, generate_synthetic,
                   load_candidates, load_patch_store, save_candidates,
                   save_patch_store, split_folds)
from .froc import ScoredCandidate, compute_froc, emit_report, save_scores_csv
from .fusion import (FusionNetSpec, build_probability_vectors, save_matrix_csv,
                     train_fusion_cv)
from .sampling import InverseSamplerConfig


class ConfigError(ValueError):
    """Bad key=value configuration."""


class PipelineError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase}: {cause}")
        self.phase = phase
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration

class PipelineConfig:
    """Flat string key/value configuration with typed accessors."""

    def __init__(self, entries: dict[str, str]):
        self.entries = dict(entries)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        entries: dict[str, str] = {}
        for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{i}: expected key=value, got {text!r}")
            key, value = text.split("=", 1)
            entries[key.strip()] = value.strip()
        return cls(entries)

    def override(self, key: str, value) -> None:
        if value is not None:
            self.entries[key] = str(value)

    def get(self, key: str, default=None) -> str | None:
        return self.entries.get(key, default)

    def get_int(self, key: str, default=None) -> int | None:
        raw = self.entries.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {raw!r}")

    def get_float(self, key: str, default=None) -> float | None:
        raw = self.entries.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {raw!r}")

    def get_pair(self, key: str, default=None):
        raw = self.entries.get(key)
        if raw is None:
            return default
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected two comma-separated numbers, got {raw!r}")
        return (float(parts[0]), float(parts[1]))

    @property
    def seed(self) -> int:
        seed = self.get_int("seed")
        if seed is None:
            raise ConfigError("seed is mandatory (config key 'seed' or --seed)")
        return seed

    def canonical_text(self) -> str:
        return "\n".join(f"{k}={self.entries[k]}" for k in sorted(self.entries)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    # -- derived component configs -----------------------------------------

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(
            n_positive=self.get_int("synth.positives", 10),
            n_negative=self.get_int("synth.negatives", 1000),
            separation=self.get_float("synth.separation", 0.25),
            noise_sigma=self.get_float("synth.noise_sigma", 0.05),
            seed=_substream(self.seed, "synth"),
        )

    def sampler_config(self) -> InverseSamplerConfig:
        return InverseSamplerConfig(
            majority_subsample=self.get_int("sampler.majority_subsample", 100),
            minority_oversample_factor=self.get_int("sampler.oversample_factor", 9),
            rotation_range_degrees=self.get_pair("sampler.rotation_range", (0.0, 360.0)),
            scale_range=self.get_pair("sampler.scale_range", (0.9, 1.1)),
            seed=_substream(self.seed, "sampler"),
        )

    def train_config(self, prefix: str, lr: float, epochs: int, batch: int) -> nn.TrainConfig:
        return nn.TrainConfig(
            learning_rate=self.get_float(f"train.{prefix}.lr", lr),
            epochs=self.get_int(f"train.{prefix}.epochs", epochs),
            batch_size=self.get_int(f"train.{prefix}.batch_size", batch),
            seed=_substream(self.seed, f"train-{prefix}"),
        )

    def cascade_config(self) -> CascadeTrainConfig:
        raw_th = self.get("cascade.thresholds")
        thresholds = None
        if raw_th is not None:
            parts = [float(p) for p in raw_th.split(",")]
            thresholds = parts[0] if len(parts) == 1 else tuple(parts)
        return CascadeTrainConfig(
            n_stages=self.get_int("cascade.stages", 2),
            n_final=self.get_int("cascade.final", 2),
            thresholds=thresholds,
            target_retention=self.get_float("cascade.target_retention", 1.0),
            sampler=self.sampler_config(),
            stage_train=self.train_config("stage", 0.01, 20, 32),
            final_train=self.train_config("final", 0.01, 20, 32),
            seed=_substream(self.seed, "cascade"),
        )

    def fusion_spec(self, m: int) -> FusionNetSpec:
        return FusionNetSpec(
            input_units=m,
            hidden1=self.get_int("fusion.hidden1", 70),
            hidden2=self.get_int("fusion.hidden2", 20),
            dropout_rate=self.get_float("fusion.dropout", 0.5),
        )

    def fusion_train_config(self) -> nn.TrainConfig:
        return self.train_config("fusion", 0.05, 30, 256)

    @property
    def fold_count(self) -> int:
        return self.get_int("folds.k", 10)


# ---------------------------------------------------------------------------
# dataset loading

def load_dataset(config: PipelineConfig) -> tuple[list[CandidateRecord], PatchStore]:
    """Load the configured candidate CSV + patch store, or synthesize."""
    candidates_path = config.get("data.candidates")
    patches_path = config.get("data.patches")
    if candidates_path or patches_path:
        if not (candidates_path and patches_path):
            raise ConfigError("data.candidates and data.patches must be set together")
        records = load_candidates(candidates_path)
        store = load_patch_store(patches_path)
        missing = [r.candidate_id for r in records if r.candidate_id not in store]
        if missing:
            raise ConfigError(f"{len(missing)} candidates have no patch "
                              f"(first: {missing[0]})")
        return records, store
    return generate_synthetic(config.synthetic_config())


# ---------------------------------------------------------------------------
# run directory helpers

PIPELINE_OUTPUTS = ("candidates.csv", "trace.csv", "vectors.csv", "cascade_scores.csv",
                    "fusion_scores.csv", "froc.csv", "froc.svg", "manifest.json")


def write_manifest(out_dir: Path, config: PipelineConfig, payload: dict) -> None:
    manifest = {"config_hash": config.hash(), "seed": config.seed}
    manifest.update(payload)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_wall_time(out_dir: Path, seconds: float) -> None:
    (out_dir / "wall_time.txt").write_text(f"{seconds:.3f}\n")


def dataset_counts(records: list[CandidateRecord]) -> dict:
    return {
        "candidates": len(records),
        "positives": sum(r.label == 1 for r in records),
        "negatives": sum(r.label == 0 for r in records),
        "scans": len({r.scan_id for r in records}),
    }


def _mark_partial(out_dir: Path) -> None:
    for name in PIPELINE_OUTPUTS:
        path = out_dir / name
        if path.exists():
            path.rename(path.with_name(name + ".partial"))


def _write_trace_csv(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate_id", "stage_reached", "score"])
        for cid, reached, score in trace_to_rows(scores):
            writer.writerow([cid, reached, repr(score)])


# ---------------------------------------------------------------------------
# commands as library functions

def run_train_cascade(config: PipelineConfig, out_dir) -> dict:
    """Train the cascade and write the bundle, trace CSV and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    records, store = load_dataset(config)
    cascade, trace = train_cascade(records, store, config.cascade_config())
    save_cascade(cascade, out / "cascade")
    scores, _ = infer_cascade(cascade, records, store)
    _write_trace_csv(out / "trace.csv", scores)
    payload = {
        "dataset": dataset_counts(records),
        "survivor_counts": trace.survivor_counts(),
        "thresholds": [s.threshold for s in cascade.stages],
        "n_final_models": len(cascade.final_models),
    }
    write_manifest(out, config, payload)
    write_wall_time(out, time.monotonic() - t0)
    return payload


def run_pipeline(config: PipelineConfig, out_dir) -> dict:
    """Full run: cascade training, probability vectors, fusion CV, FROC report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    phase = "data"
    try:
        records, store = load_dataset(config)
        save_candidates(records, out / "candidates.csv")
        folds = split_folds(records, config.fold_count, _substream(config.seed, "fold"))

        phase = "train-cascade"
        cascade, train_trace = train_cascade(records, store, config.cascade_config(),
                                             folds=folds)
        save_cascade(cascade, out / "cascade")

        phase = "cascade-scores"
        scores, _ = infer_cascade(cascade, records, store)
        _write_trace_csv(out / "trace.csv", scores)
        by_id = {r.candidate_id: r for r in records}
        cascade_scored = [ScoredCandidate(s.candidate_id, by_id[s.candidate_id].scan_id,
                                          by_id[s.candidate_id].label, s.score)
                          for s in scores]
        save_scores_csv(cascade_scored, out / "cascade_scores.csv")

        phase = "build-vectors"
        matrix = build_probability_vectors(cascade.all_models(), records, store)
        save_matrix_csv(matrix, out / "vectors.csv")

        phase = "train-fusion"
        spec = config.fusion_spec(matrix.m)
        _, oof = train_fusion_cv(matrix, folds, config.fusion_train_config(), spec)
        fusion_scored = [ScoredCandidate(s.candidate_id, by_id[s.candidate_id].scan_id,
                                         by_id[s.candidate_id].label, s.score)
                         for s in oof]
        fusion_scored.sort(key=lambda s: s.candidate_id)
        save_scores_csv(fusion_scored, out / "fusion_scores.csv")

        phase = "evaluate"
        cascade_curve = compute_froc(cascade_scored)
        fusion_curve = compute_froc(fusion_scored)
        emit_report([("cascade", cascade_curve), ("fusion", fusion_curve)], out)
    except Exception as e:
        _mark_partial(out)
        raise PipelineError(phase, e) from e

    payload = {
        "dataset": dataset_counts(records),
        "survivor_counts": train_trace.survivor_counts(),
        "thresholds": [s.threshold for s in cascade.stages],
        "n_models": matrix.m,
        "folds": config.fold_count,
    }
    write_manifest(out, config, payload)
    write_wall_time(out, time.monotonic() - t0)
    return payload
