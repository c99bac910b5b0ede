"""Per-model probability vectors and the fusion meta-classifier.

Every model scores every candidate (no cascade filtering on this path),
giving an n x m probability matrix. The fusion network maps a length-m
probability vector to a final nodule probability through two hidden layers
(70 and 20 units, ReLU, dropout 0.5) and a 2-way softmax. It is trained and
scored out-of-fold under scan-level cross-validation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .cascade import CandidateScore, nodule_probabilities, _substream
from .data import CandidateRecord, FoldAssignment, PatchStore


class FusionError(RuntimeError):
    """Probability matrix or cross-validation structure is unusable."""


@dataclass
class ProbabilityMatrix:
    candidate_ids: list[int]
    labels: np.ndarray            # (n,) int
    values: np.ndarray            # (n, m) float in [0, 1]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.values = np.asarray(self.values, dtype=np.float64)
        n, m = self.values.shape
        if len(self.candidate_ids) != n or len(self.labels) != n:
            raise FusionError("candidate_ids, labels and values disagree on n")
        if m < 1:
            raise FusionError("probability matrix needs at least one model column")
        if not np.all(np.isfinite(self.values)):
            raise FusionError("probability matrix contains non-finite values")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise FusionError("probability matrix values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FusionNetSpec:
    input_units: int
    hidden1: int = 70
    hidden2: int = 20
    output: int = 2
    dropout_rate: float = 0.5

    def __post_init__(self):
        if min(self.input_units, self.hidden1, self.hidden2, self.output) < 1:
            raise ValueError("all layer sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def build_fusion_net(spec: FusionNetSpec, seed: int) -> nn.Network:
    """dense(m->h1)/relu/dropout -> dense(h1->h2)/relu/dropout -> dense(h2->2)/softmax."""
    layers = [
        nn.Dense(spec.input_units, spec.hidden1),
        nn.Relu(),
        nn.Dropout(spec.dropout_rate),
        nn.Dense(spec.hidden1, spec.hidden2),
        nn.Relu(),
        nn.Dropout(spec.dropout_rate),
        nn.Dense(spec.hidden2, spec.output),
        nn.Softmax(),
    ]
    return nn.Network((spec.input_units,), layers, seed)


def build_probability_vectors(models: list[nn.Network],
                              candidates: list[CandidateRecord],
                              store: PatchStore) -> ProbabilityMatrix:
    """Entry (d, j): nodule probability of candidate d under model j."""
    if not models:
        raise FusionError("need at least one model")
    ids = [r.candidate_id for r in candidates]
    labels = np.array([r.label for r in candidates], dtype=np.intp)
    columns = [nodule_probabilities(m, ids, store) for m in models]
    return ProbabilityMatrix(ids, labels, np.column_stack(columns))


def train_fusion_cv(matrix: ProbabilityMatrix, folds: FoldAssignment,
                    config: nn.TrainConfig,
                    spec: FusionNetSpec | None = None
                    ) -> tuple[dict[int, nn.Network], list[CandidateScore]]:
    """Train one fusion net per fold; every row is scored exactly once,
    by the model that never saw it.

    When config.class_weights is None, inverse-frequency weights computed
    from each fold's training labels are used instead, so the minority
    gradient signal survives the extreme imbalance.
    """
    if spec is None:
        spec = FusionNetSpec(matrix.m)
    if spec.input_units != matrix.m:
        raise FusionError(f"fusion spec expects {spec.input_units} inputs, matrix has {matrix.m}")
    try:
        fold_of = np.array([folds.fold_of(c) for c in matrix.candidate_ids])
    except KeyError as e:
        raise FusionError(f"candidate {e.args[0]} has no fold assignment") from None

    models: dict[int, nn.Network] = {}
    scores: list[CandidateScore] = []
    for f in range(folds.k):
        test_mask = fold_of == f
        train_mask = ~test_mask
        y_train = matrix.labels[train_mask]
        if not np.any(y_train == 1):
            raise FusionError(f"fold {f}: no minority samples in the training split")
        weights = config.class_weights
        if weights is None:
            counts = np.bincount(y_train, minlength=2)
            weights = tuple(len(y_train) / (2.0 * max(c, 1)) for c in counts)
        fold_cfg = nn.TrainConfig(config.learning_rate, config.epochs,
                                  config.batch_size,
                                  _substream(config.seed, f"fusion-fold{f}"),
                                  config.shuffle, weights)
        net = build_fusion_net(spec, _substream(config.seed, f"fusion-init{f}"))
        net = nn.train(net, matrix.values[train_mask], y_train, fold_cfg)
        models[f] = net

        test_rows = matrix.values[test_mask]
        if len(test_rows):
            probs = net.forward(test_rows, "inference")[:, 1]
            for cid, p in zip(np.asarray(matrix.candidate_ids)[test_mask], probs):
                scores.append(CandidateScore(int(cid), float(p), None))

    if len(scores) != matrix.n:
        raise FusionError(f"out-of-fold coverage mismatch: {len(scores)} scores "
                          f"for {matrix.n} rows")
    return models, scores


# ---------------------------------------------------------------------------
# persistence (handoff artifact between pipeline phases)

def save_matrix_csv(matrix: ProbabilityMatrix, path) -> None:
    """CSV with header candidate_id,label,p1..pM."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate_id", "label"] + [f"p{j + 1}" for j in range(matrix.m)])
        for i, cid in enumerate(matrix.candidate_ids):
            writer.writerow([cid, int(matrix.labels[i])]
                            + [repr(float(v)) for v in matrix.values[i]])


def load_matrix_csv(path) -> ProbabilityMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["candidate_id", "label"]:
            raise FusionError(f"{path}: bad header, expected candidate_id,label,p1..pM")
        m = len(header) - 2
        if m < 1 or header[2:] != [f"p{j + 1}" for j in range(m)]:
            raise FusionError(f"{path}: bad probability column names")
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    values = np.array(rows) if rows else np.zeros((0, m))
    return ProbabilityMatrix(ids, np.array(labels, dtype=np.intp), values)
