"""Cascaded single-sided classifier stages with a balanced final stage.

Candidates walk the stages in order. A stage computes each candidate's
nodule probability; anything below the stage threshold is filtered out with
a final score of 0 and is never seen by later models on this path.
Survivors of all single-sided stages are scored by the balanced final
models and get the combined probability as their score.

Training mirrors inference: each stage trains on an inversely imbalanced
sample of the currently surviving ("suspicious") set, its threshold is
calibrated on that set's nodule probabilities, and the filtered survivors
feed the next stage. The final balanced models train on balanced samples of
whatever survives the last filter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import CandidateRecord, FoldAssignment, PatchStore
from .sampling import InverseSamplerConfig, balanced_sample, inverse_imbalanced_sample

SCORE_BATCH = 256
BUNDLE_VERSION = 1


class CascadeError(RuntimeError):
    """Cascade training or inference failed."""


@dataclass
class StageModel:
    model: nn.Network
    threshold: float
    stage_index: int          # 1-based position in the cascade

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")


@dataclass
class CascadeModel:
    stages: list[StageModel]
    final_models: list[nn.Network]
    final_combine: str = "mean"

    def __post_init__(self):
        if not self.final_models:
            raise ValueError("cascade needs at least one final (balanced) model")
        if self.final_combine != "mean":
            raise ValueError(f"unknown final_combine rule {self.final_combine!r}")

    def all_models(self) -> list[nn.Network]:
        """Stage models then final models, the default fusion input wiring."""
        return [s.model for s in self.stages] + list(self.final_models)


@dataclass(frozen=True)
class CandidateScore:
    candidate_id: int
    score: float
    filtered_at_stage: int | None = None


@dataclass
class CascadeTrace:
    """Per single-sided stage: the ids that entered and the ids that passed."""
    entered: list[frozenset[int]] = field(default_factory=list)
    passed: list[frozenset[int]] = field(default_factory=list)

    def survivor_counts(self) -> list[int]:
        return [len(p) for p in self.passed]


def nodule_probabilities(model: nn.Network, candidate_ids, store: PatchStore,
                         batch_size: int = SCORE_BATCH) -> np.ndarray:
    """Nodule-class probability for each candidate, inference mode, batched."""
    ids = list(candidate_ids)
    out = np.empty(len(ids))
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        probs = model.forward(store.batch(chunk), "inference")
        out[start:start + len(chunk)] = probs[:, 1]
    return out


# ---------------------------------------------------------------------------
# inference

def infer_cascade(cascade: CascadeModel, candidates: list[CandidateRecord],
                  store: PatchStore) -> tuple[list[CandidateScore], CascadeTrace]:
    """Score candidates through the cascade; returns scores plus the trace."""
    ids = [r.candidate_id for r in candidates]
    missing = [c for c in ids if c not in store]
    if missing:
        raise CascadeError(f"{len(missing)} candidates missing from patch store "
                           f"(first: {missing[0]})")

    trace = CascadeTrace()
    results: dict[int, CandidateScore] = {}
    active = list(ids)
    for stage in cascade.stages:
        trace.entered.append(frozenset(active))
        if not active:
            trace.passed.append(frozenset())
            continue
        probs = nodule_probabilities(stage.model, active, store)
        survivors = []
        for cid, p in zip(active, probs):
            if p < stage.threshold:
                results[cid] = CandidateScore(cid, 0.0, stage.stage_index)
            else:
                survivors.append(cid)
        trace.passed.append(frozenset(survivors))
        active = survivors

    if active:
        stacked = np.stack([nodule_probabilities(m, active, store)
                            for m in cascade.final_models])
        combined = stacked.mean(axis=0)
        for cid, p in zip(active, combined):
            results[cid] = CandidateScore(cid, float(p), None)

    return [results[c] for c in ids], trace


# ---------------------------------------------------------------------------
# threshold calibration

def calibrate_threshold(minority_probs, target_retention: float) -> float:
    """Largest threshold keeping at least `target_retention` of the probs.

    A probability passes when it is >= the threshold, so with target 1.0
    the answer is simply the minimum.
    """
    probs = np.asarray(minority_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("minority probability list is empty")
    if not 0.0 < target_retention <= 1.0:
        raise ValueError(f"target_retention must be in (0, 1], got {target_retention}")
    need = max(1, int(np.ceil(target_retention * probs.size - 1e-12)))
    return float(np.sort(probs)[::-1][need - 1])


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class CascadeTrainConfig:
    n_stages: int = 2                       # single-sided stages
    n_final: int = 1                        # balanced models at the end
    thresholds: tuple[float, ...] | float | None = None   # None -> calibrate
    target_retention: float = 1.0
    sampler: InverseSamplerConfig = InverseSamplerConfig()
    stage_train: nn.TrainConfig = nn.TrainConfig()
    final_train: nn.TrainConfig = nn.TrainConfig()
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 0:
            raise ValueError("n_stages must be >= 0")
        if self.n_final < 1:
            raise ValueError("n_final must be >= 1")

    def threshold_for(self, stage_index: int) -> float | None:
        if self.thresholds is None:
            return None
        if isinstance(self.thresholds, (int, float)):
            return float(self.thresholds)
        return float(self.thresholds[stage_index - 1])


def train_cascade(records: list[CandidateRecord], store: PatchStore,
                  config: CascadeTrainConfig,
                  folds: FoldAssignment | None = None,
                  model_builder=None) -> tuple[CascadeModel, CascadeTrace]:
    """Stage-wise cascaded training.

    `model_builder(seed)` supplies a fresh untrained network per model
    (defaults to the stock patch CNN). When `folds` is given, each final
    model b leaves out fold b mod k when drawing its balanced sample, so the
    final models become cross-validation siblings; otherwise they differ
    only by sampler seed.
    """
    if model_builder is None:
        model_builder = nn.build_patch_cnn
    by_id = {r.candidate_id: r for r in records}
    trace = CascadeTrace()
    suspicious = [r.candidate_id for r in records]

    stages = []
    for i in range(1, config.n_stages + 1):
        current = [by_id[c] for c in suspicious]
        minority_ids = [r.candidate_id for r in current if r.label == 1]
        if not minority_ids:
            raise CascadeError(f"stage {i}: no nodules left in the suspicious set "
                               "(threshold too aggressive)")
        sampler_cfg = InverseSamplerConfig(
            majority_subsample=config.sampler.majority_subsample,
            minority_oversample_factor=config.sampler.minority_oversample_factor,
            rotation_range_degrees=config.sampler.rotation_range_degrees,
            scale_range=config.sampler.scale_range,
            seed=_substream(config.seed, f"stage{i}-sampler"),
        )
        train_set = inverse_imbalanced_sample(current, store, sampler_cfg)
        net = model_builder(_substream(config.seed, f"stage{i}-init"))
        train_cfg = _reseed(config.stage_train, _substream(config.seed, f"stage{i}-train"))
        net = nn.train(net, train_set.patches, train_set.labels, train_cfg)

        probs = nodule_probabilities(net, suspicious, store)
        prob_of = dict(zip(suspicious, probs))
        fixed = config.threshold_for(i)
        if fixed is None:
            th = calibrate_threshold([prob_of[c] for c in minority_ids],
                                     config.target_retention)
        else:
            th = fixed
        stages.append(StageModel(net, th, i))

        trace.entered.append(frozenset(suspicious))
        suspicious = [c for c in suspicious if prob_of[c] >= th]
        trace.passed.append(frozenset(suspicious))

        if not any(by_id[c].label == 1 for c in suspicious):
            raise CascadeError(f"stage {i}: filtering removed every nodule "
                               "(threshold too aggressive)")

    # an aggressive cascade can filter every non-nodule; the balanced final
    # stage then falls back to the latest suspicious set that still has some
    if not any(by_id[c].label == 0 for c in suspicious):
        for earlier in reversed(trace.entered):
            if any(by_id[c].label == 0 for c in earlier):
                suspicious = sorted(earlier)
                break

    survivors = [by_id[c] for c in suspicious]
    final_models = []
    for b in range(config.n_final):
        pool = survivors
        if folds is not None:
            held_out = b % folds.k
            pool = [r for r in survivors if folds.fold_of(r.candidate_id) != held_out]
            if not any(r.label == 1 for r in pool) or not any(r.label == 0 for r in pool):
                pool = survivors      # fold rotation starved a class; fall back
        ts = balanced_sample(pool, store, _substream(config.seed, f"final{b}-sampler"))
        net = model_builder(_substream(config.seed, f"final{b}-init"))
        train_cfg = _reseed(config.final_train, _substream(config.seed, f"final{b}-train"))
        final_models.append(nn.train(net, ts.patches, ts.labels, train_cfg))

    return CascadeModel(stages, final_models), trace


def _substream(root_seed: int, name: str) -> int:
    """Stable 63-bit seed derived from the root seed and a stream name."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _reseed(cfg: nn.TrainConfig, seed: int) -> nn.TrainConfig:
    return nn.TrainConfig(cfg.learning_rate, cfg.epochs, cfg.batch_size,
                          seed, cfg.shuffle, cfg.class_weights)


# ---------------------------------------------------------------------------
# on-disk bundle

def save_cascade(cascade: CascadeModel, out_dir) -> None:
    """Write a cascade bundle: cascade.json plus one model file per network."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    desc = {"version": BUNDLE_VERSION, "final_combine": cascade.final_combine,
            "stages": [], "final_models": []}
    for s in cascade.stages:
        name = f"stage{s.stage_index}.lcnn"
        s.model.save(out / name)
        desc["stages"].append({"model": name, "threshold": s.threshold,
                               "stage_index": s.stage_index})
    for b, m in enumerate(cascade.final_models):
        name = f"final{b}.lcnn"
        m.save(out / name)
        desc["final_models"].append({"model": name})
    (out / "cascade.json").write_text(json.dumps(desc, indent=2, sort_keys=True) + "\n")


def load_cascade(bundle_dir) -> CascadeModel:
    path = Path(bundle_dir) / "cascade.json"
    desc = json.loads(path.read_text())
    if desc.get("version") != BUNDLE_VERSION:
        raise CascadeError(f"{path}: unsupported bundle version {desc.get('version')}")
    stages = [StageModel(nn.Network.load(path.parent / s["model"]),
                         s["threshold"], s["stage_index"])
              for s in desc["stages"]]
    finals = [nn.Network.load(path.parent / m["model"]) for m in desc["final_models"]]
    return CascadeModel(stages, finals, desc["final_combine"])


def trace_to_rows(scores: list[CandidateScore]) -> list[tuple[int, str, float]]:
    """CSV-ready rows: candidate_id, stage reached ('final' or the filter stage), score."""
    rows = []
    for s in scores:
        reached = "final" if s.filtered_at_stage is None else str(s.filtered_at_stage)
        rows.append((s.candidate_id, reached, s.score))
    return rows
