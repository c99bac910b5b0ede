"""Candidate records, patch storage, fold splitting and synthetic data.

Candidate CSVs use the LUNA16 header `seriesuid,coordX,coordY,coordZ,class`.
Patches are 48x48x3 float arrays with intensities in [0, 1], persisted in a
small versioned binary container. Folds are assigned per scan so candidates
from one scan never straddle a train/test boundary.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass

import numpy as np

PATCH_SHAPE = (48, 48, 3)
STORE_MAGIC = b"LPST"
STORE_VERSION = 1

CSV_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "class"]


class DataError(ValueError):
    """Malformed candidate CSV or patch store."""


@dataclass(frozen=True)
class CandidateRecord:
    candidate_id: int
    scan_id: str
    coord_x: float
    coord_y: float
    coord_z: float
    label: int


def load_candidates(path) -> list[CandidateRecord]:
    """Parse a LUNA16-style candidates CSV; candidate_id is the row index."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(CSV_HEADER)}")
        if [h.strip() for h in header] != CSV_HEADER:
            raise DataError(
                f"{path}: bad header {','.join(header)!r}, expected {','.join(CSV_HEADER)}"
            )
        for i, row in enumerate(reader):
            line_no = i + 2
            if len(row) != 5:
                raise DataError(f"{path}:{line_no}: expected 5 fields, got {len(row)}")
            scan_id = row[0].strip()
            try:
                x, y, z = (float(v) for v in row[1:4])
            except ValueError:
                raise DataError(f"{path}:{line_no}: bad coordinate in {row[1:4]}")
            label_text = row[4].strip()
            if label_text not in ("0", "1"):
                raise DataError(f"{path}:{line_no}: unknown label value {label_text!r}")
            records.append(CandidateRecord(i, scan_id, x, y, z, int(label_text)))
    return records


def save_candidates(records: list[CandidateRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.scan_id, repr(float(r.coord_x)), repr(float(r.coord_y)),
                             repr(float(r.coord_z)), r.label])


# ---------------------------------------------------------------------------
# patch store

class PatchStore:
    """candidate_id -> 48x48x3 float32 patch with intensities in [0, 1]."""

    def __init__(self):
        self._patches: dict[int, np.ndarray] = {}

    def add(self, candidate_id: int, patch: np.ndarray) -> None:
        arr = np.asarray(patch, dtype=np.float32)
        if arr.shape != PATCH_SHAPE:
            raise DataError(f"patch for candidate {candidate_id} has shape {arr.shape}, "
                            f"expected {PATCH_SHAPE}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError(f"patch for candidate {candidate_id} not normalized to [0, 1]")
        self._patches[int(candidate_id)] = arr

    def get(self, candidate_id: int) -> np.ndarray:
        return self._patches[int(candidate_id)]

    def ids(self) -> list[int]:
        return sorted(self._patches)

    def __len__(self) -> int:
        return len(self._patches)

    def __contains__(self, candidate_id) -> bool:
        return int(candidate_id) in self._patches

    def batch(self, candidate_ids) -> np.ndarray:
        """Stack patches for the given ids as a float64 (n, 48, 48, 3) array."""
        if len(candidate_ids) == 0:
            return np.zeros((0,) + PATCH_SHAPE)
        return np.stack([self._patches[int(c)] for c in candidate_ids]).astype(np.float64)


def save_patch_store(store: PatchStore, path) -> None:
    """Header: magic, version, count, dims. Body: candidate_id + raw float32."""
    ids = store.ids()
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IIIII", STORE_VERSION, len(ids), *PATCH_SHAPE))
        for cid in ids:
            fh.write(struct.pack("<q", cid))
            fh.write(np.ascontiguousarray(store.get(cid), dtype="<f4").tobytes())


def load_patch_store(path) -> PatchStore:
    patch_bytes = 4 * int(np.prod(PATCH_SHAPE))
    store = PatchStore()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != STORE_MAGIC:
            raise DataError(f"{path}: not a patch store (bad magic {magic!r})")
        head = fh.read(20)
        if len(head) != 20:
            raise DataError(f"{path}: truncated header")
        version, count, h, w, c = struct.unpack("<IIIII", head)
        if version != STORE_VERSION:
            raise DataError(f"{path}: unsupported store version {version}")
        if (h, w, c) != PATCH_SHAPE:
            raise DataError(f"{path}: unexpected patch dims {(h, w, c)}")
        for _ in range(count):
            raw_id = fh.read(8)
            raw = fh.read(patch_bytes)
            if len(raw_id) != 8 or len(raw) != patch_bytes:
                raise DataError(f"{path}: truncated patch data")
            cid = struct.unpack("<q", raw_id)[0]
            patch = np.frombuffer(raw, dtype="<f4").reshape(PATCH_SHAPE)
            store.add(cid, patch)
    return store


# ---------------------------------------------------------------------------
# fold splitting

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    by_candidate: dict[int, int]

    def fold_of(self, candidate_id: int) -> int:
        return self.by_candidate[int(candidate_id)]

    def members(self, fold: int) -> list[int]:
        return sorted(c for c, f in self.by_candidate.items() if f == fold)


def split_folds(records: list[CandidateRecord], k: int, seed: int) -> FoldAssignment:
    """Scan-level k-fold assignment; fold sizes differ by at most one scan."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    scans = sorted({r.scan_id for r in records})
    if len(scans) < k:
        raise ValueError(f"{len(scans)} scans is fewer than k={k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scans))
    scan_fold = {scans[j]: i % k for i, j in enumerate(order)}
    return FoldAssignment(k, {r.candidate_id: scan_fold[r.scan_id] for r in records})


# ---------------------------------------------------------------------------
# synthetic data

SCAN_CHUNK = 50        # candidates per synthetic scan
BASE_LEVEL = 0.3       # background intensity before noise and structure
STRUCT_GAIN = 2.0      # peak structure amplitude per unit of separation


@dataclass(frozen=True)
class SyntheticConfig:
    n_positive: int
    n_negative: int
    separation: float = 0.25
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_positive < 1 or self.n_negative < 1:
            raise ValueError("n_positive and n_negative must be positive")
        if self.n_negative < self.n_positive:
            raise ValueError("n_negative must be >= n_positive (imbalance direction)")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")


def generate_synthetic(config: SyntheticConfig) -> tuple[list[CandidateRecord], PatchStore]:
    """Imbalanced synthetic dataset of blob (nodule) and grating (other) patches.

    Positive patches get a brightness lift of `separation` plus a Gaussian
    blob; negatives get zero-mean ridge gratings. Both structures scale with
    `separation`, so at separation 0 the two classes are identically
    distributed noise. Per-patch brightness jitter has sd `noise_sigma`,
    which makes mean patch intensity a feature with class-mean distance of
    about `separation`.
    """
    rng = np.random.default_rng(config.seed)
    n_total = config.n_positive + config.n_negative
    n_scans = math.ceil(n_total / SCAN_CHUNK)
    h, w, _ = PATCH_SHAPE
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    records = []
    store = PatchStore()
    for i in range(n_total):
        label = 1 if i < config.n_positive else 0
        scan_id = f"synth-{i % n_scans:04d}"
        coords = rng.uniform(-100.0, 100.0, size=3)

        jitter = rng.normal(0.0, config.noise_sigma)
        noise = rng.normal(0.0, config.noise_sigma, size=PATCH_SHAPE)
        base = BASE_LEVEL + jitter + noise
        if label == 1:
            cx = (w - 1) / 2 + rng.uniform(-6, 6)
            cy = (h - 1) / 2 + rng.uniform(-6, 6)
            radius = rng.uniform(3.0, 6.0)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius ** 2))
            struct2d = STRUCT_GAIN * config.separation * blob
            patch = base + config.separation + struct2d[:, :, None]
        else:
            theta = rng.uniform(0.0, np.pi)
            freq = rng.uniform(0.2, 0.6)
            phase = rng.uniform(0.0, 2 * np.pi)
            ridge = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
            struct2d = STRUCT_GAIN * config.separation * ridge
            patch = base + struct2d[:, :, None]

        records.append(CandidateRecord(i, scan_id, float(coords[0]),
                                       float(coords[1]), float(coords[2]), label))
        store.add(i, np.clip(patch, 0.0, 1.0))
    return records, store
