"""Training-set construction for imbalanced candidate data.

Two samplers: the inverse-imbalanced sampler flips the natural class ratio
(majority subsampled to a small fixed count, minority oversampled by random
rotation and scaling), which is what makes a stage behave as a single-sided
classifier. The balanced sampler draws equal class counts for the final
stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PATCH_SHAPE, CandidateRecord, PatchStore

GRID_SNAP = 1e-9   # snap sample coordinates this close to a pixel onto it


class SamplingError(ValueError):
    """Requested sample cannot be built from the given records."""


@dataclass(frozen=True)
class AugmentationParams:
    angle: float          # degrees, counter-clockwise about the patch center
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class InverseSamplerConfig:
    majority_subsample: int = 100
    minority_oversample_factor: int = 9
    rotation_range_degrees: tuple[float, float] = (0.0, 360.0)
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if self.majority_subsample < 1:
            raise ValueError("majority_subsample must be positive")
        if self.minority_oversample_factor < 1:
            raise ValueError("minority_oversample_factor must be >= 1")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 2.0):
            raise ValueError(f"scale_range must lie within (0, 2], got {self.scale_range}")


@dataclass
class TrainingSet:
    """Patches plus labels, with the source candidate id of every sample."""
    patches: np.ndarray       # (n, 48, 48, 3) float64
    labels: np.ndarray        # (n,) int
    source_ids: np.ndarray    # (n,) int, candidate_id each sample came from
    augmentations: list[AugmentationParams | None] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# augmentation

def augment(patch: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Rotate and scale a patch about its center, bilinear per channel.

    Out-of-bounds samples are 0; output values are clamped to [0, 1].
    Sample coordinates within GRID_SNAP of a pixel snap onto it, so
    axis-aligned rotations at scale 1 are exact.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != PATCH_SHAPE:
        raise ValueError(f"patch shape {patch.shape}, expected {PATCH_SHAPE}")
    h, w, _ = PATCH_SHAPE
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    theta = np.deg2rad(params.angle)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - cy, cols - cx
    # inverse map: rotate by -angle, divide by scale
    src_x = cx + (cos_t * dx + sin_t * dy) / params.scale
    src_y = cy + (-sin_t * dx + cos_t * dy) / params.scale

    src_x = _snap(src_x)
    src_y = _snap(src_y)

    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    fx = src_x - x0
    fy = src_y - y0

    out = np.zeros(PATCH_SHAPE)
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        wgt = (fy if oy else 1.0 - fy) * (fx if ox else 1.0 - fx)
        px, py = x0 + ox, y0 + oy
        inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        px_c = np.clip(px, 0, w - 1)
        py_c = np.clip(py, 0, h - 1)
        contrib = patch[py_c, px_c, :] * (wgt * inside)[:, :, None]
        out += contrib
    return np.clip(out, 0.0, 1.0)


def _snap(coords):
    rounded = np.round(coords)
    return np.where(np.abs(coords - rounded) < GRID_SNAP, rounded, coords)


# ---------------------------------------------------------------------------
# samplers

def _split_by_label(records):
    minority = [r for r in records if r.label == 1]
    majority = [r for r in records if r.label == 0]
    return minority, majority


def inverse_imbalanced_sample(records: list[CandidateRecord], store: PatchStore,
                              config: InverseSamplerConfig) -> TrainingSet:
    """Build the inversely imbalanced training set.

    Every minority (nodule) candidate contributes `minority_oversample_factor`
    copies: the original plus factor-1 randomly rotated/scaled versions. The
    majority class is subsampled uniformly without replacement to
    `majority_subsample` (or kept whole if smaller).
    """
    minority, majority = _split_by_label(records)
    if not minority:
        raise SamplingError("no minority (nodule) samples; single-sided training undefined")

    rng = np.random.default_rng(config.seed)
    lo_a, hi_a = config.rotation_range_degrees
    lo_s, hi_s = config.scale_range

    patches, labels, source_ids, augs = [], [], [], []
    for rec in minority:
        original = store.get(rec.candidate_id).astype(np.float64)
        patches.append(original)
        labels.append(1)
        source_ids.append(rec.candidate_id)
        augs.append(AugmentationParams(0.0, 1.0))
        for _ in range(config.minority_oversample_factor - 1):
            params = AugmentationParams(rng.uniform(lo_a, hi_a), rng.uniform(lo_s, hi_s))
            patches.append(augment(original, params))
            labels.append(1)
            source_ids.append(rec.candidate_id)
            augs.append(params)

    n_major = min(config.majority_subsample, len(majority))
    chosen = rng.choice(len(majority), size=n_major, replace=False) if majority else []
    for j in sorted(chosen):
        rec = majority[j]
        patches.append(store.get(rec.candidate_id).astype(np.float64))
        labels.append(0)
        source_ids.append(rec.candidate_id)
        augs.append(None)

    return TrainingSet(np.stack(patches), np.asarray(labels, dtype=np.intp),
                       np.asarray(source_ids, dtype=np.intp), augs)


def balanced_sample(records: list[CandidateRecord], store: PatchStore,
                    seed: int) -> TrainingSet:
    """Equal class counts: min(n_minority, n_majority) per class.

    The smaller class is kept whole; the larger one is subsampled uniformly
    without replacement.
    """
    minority, majority = _split_by_label(records)
    if not minority or not majority:
        raise SamplingError("balanced sampling needs both classes non-empty")

    rng = np.random.default_rng(seed)
    per_class = min(len(minority), len(majority))

    def pick(group):
        if len(group) == per_class:
            return group
        idx = rng.choice(len(group), size=per_class, replace=False)
        return [group[j] for j in sorted(idx)]

    patches, labels, source_ids = [], [], []
    for rec in pick(minority) + pick(majority):
        patches.append(store.get(rec.candidate_id).astype(np.float64))
        labels.append(rec.label)
        source_ids.append(rec.candidate_id)
    return TrainingSet(np.stack(patches), np.asarray(labels, dtype=np.intp),
                       np.asarray(source_ids, dtype=np.intp),
                       [None] * len(labels))
