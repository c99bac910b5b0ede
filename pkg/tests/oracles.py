"""Independent reference implementations used as test oracles.

Everything here is deliberately written in the most literal style possible
(scalar loops, direct formulas, exhaustive enumeration) and shares no code
with the package. Tests compare package outputs against these, never the
other way around.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# neural net numerics

def softmax_rows_oracle(logits) -> list[list[float]]:
    """Row softmax via scalar math.exp with max-shift."""
    out = []
    for row in logits:
        m = max(float(v) for v in row)
        exps = [math.exp(float(v) - m) for v in row]
        total = sum(exps)
        out.append([e / total for e in exps])
    return out


def dense_oracle(x, w, b) -> list[list[float]]:
    """y[i][j] = sum_k x[i][k] * w[k][j] + b[j], scalar loops."""
    n, d = len(x), len(w)
    out_units = len(b)
    result = []
    for i in range(n):
        row = []
        for j in range(out_units):
            acc = float(b[j])
            for k in range(d):
                acc += float(x[i][k]) * float(w[k][j])
            row.append(acc)
        result.append(row)
    return result


def mlp2_forward_oracle(x, w1, b1, w2, b2) -> list[list[float]]:
    """dense -> relu -> dense -> softmax, stepped by hand."""
    h = dense_oracle(x, w1, b1)
    h = [[max(0.0, v) for v in row] for row in h]
    logits = dense_oracle(h, w2, b2)
    return softmax_rows_oracle(logits)


def cross_entropy_oracle(probs, labels, weights=None) -> float:
    """Mean (or weighted mean) of -log p[true], probabilities clamped at 1e-12."""
    total = 0.0
    wsum = 0.0
    for row, label in zip(probs, labels):
        w = 1.0 if weights is None else float(weights[int(label)])
        p = max(float(row[int(label)]), 1e-12)
        total += -math.log(p) * w
        wsum += w
    return total / wsum


def conv2d_oracle(x, w, b, stride=1):
    """Direct valid-padding convolution, six nested loops.

    x: (n, h, w, c_in); w: (k, k, c_in, c_out); returns (n, oh, ow, c_out).
    """
    x = np.asarray(x, dtype=np.float64)
    wgt = np.asarray(w, dtype=np.float64)
    n, h, wid, c_in = x.shape
    k = wgt.shape[0]
    c_out = wgt.shape[3]
    oh = (h - k) // stride + 1
    ow = (wid - k) // stride + 1
    out = np.zeros((n, oh, ow, c_out))
    for i in range(n):
        for r in range(oh):
            for c in range(ow):
                for f in range(c_out):
                    acc = float(b[f])
                    for dr in range(k):
                        for dc in range(k):
                            for ch in range(c_in):
                                acc += x[i, r * stride + dr, c * stride + dc, ch] \
                                    * wgt[dr, dc, ch, f]
                    out[i, r, c, f] = acc
    return out


def maxpool2x2_oracle(x):
    x = np.asarray(x, dtype=np.float64)
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for i in range(n):
        for r in range(h // 2):
            for col in range(w // 2):
                for ch in range(c):
                    block = x[i, 2 * r:2 * r + 2, 2 * col:2 * col + 2, ch]
                    out[i, r, col, ch] = block.max()
    return out


def logistic_step_oracle(x, w, b, label, lr):
    """One SGD step of dense+softmax on a single sample, closed form.

    grad_W = outer(x, p - onehot), grad_b = p - onehot.
    Returns (new_w, new_b, loss_before).
    """
    x = [float(v) for v in x]
    logits = dense_oracle([x], w, b)[0]
    p = softmax_rows_oracle([logits])[0]
    loss = -math.log(max(p[int(label)], 1e-12))
    delta = list(p)
    delta[int(label)] -= 1.0
    new_w = [[w[k][j] - lr * x[k] * delta[j] for j in range(len(b))]
             for k in range(len(w))]
    new_b = [b[j] - lr * delta[j] for j in range(len(b))]
    return new_w, new_b, loss


# ---------------------------------------------------------------------------
# classification baselines

def nearest_centroid_fit(samples, labels):
    """Class centroids of flattened samples."""
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    labels = np.asarray(labels)
    return {int(c): samples[labels == c].mean(axis=0) for c in np.unique(labels)}


def nearest_centroid_predict(centroids, samples):
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    classes = sorted(centroids)
    dists = np.stack([np.linalg.norm(samples - centroids[c], axis=1)
                      for c in classes], axis=1)
    return np.array([classes[j] for j in dists.argmin(axis=1)])


def balanced_accuracy_oracle(labels, predicted) -> float:
    labels = np.asarray(labels)
    predicted = np.asarray(predicted)
    accs = []
    for c in np.unique(labels):
        mask = labels == c
        accs.append(float((predicted[mask] == c).mean()))
    return float(np.mean(accs))


def auc_oracle(labels, scores) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    labels = [int(v) for v in labels]
    scores = [float(v) for v in scores]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    assert n_pos > 0 and n_neg > 0
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        mean_rank = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    rank_sum = sum(r for r, y in zip(ranks, labels) if y == 1)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# augmentation

_ROT_MAPS = {
    90: lambda r, c, n: (n - 1 - c, r),
    180: lambda r, c, n: (n - 1 - r, n - 1 - c),
    270: lambda r, c, n: (c, n - 1 - r),
}


def rotate_axis_aligned_oracle(patch, angle):
    """Exact per-pixel index permutation for 90/180/270-degree rotation.

    Convention: out[r, c] takes its value from the source pixel that the
    inverse rotation about the grid center maps (r, c) onto. For a square
    n x n grid that mapping is integer-valued.
    """
    patch = np.asarray(patch)
    n = patch.shape[0]
    assert patch.shape[1] == n
    mapping = _ROT_MAPS[int(angle) % 360]
    out = np.empty_like(patch)
    for r in range(n):
        for c in range(n):
            sr, sc = mapping(r, c, n)
            out[r, c] = patch[sr, sc]
    return out


# ---------------------------------------------------------------------------
# threshold calibration

def calibrate_oracle(probs, target) -> float:
    """Largest threshold keeping fraction(p >= th) >= target.

    Exhaustive scan over the candidate thresholds (the prob values
    themselves; the optimum is always attained at one of them).
    """
    n = len(probs)
    best = None
    for th in sorted(set(float(p) for p in probs), reverse=True):
        kept = sum(1 for p in probs if float(p) >= th)
        if kept / n >= target - 1e-12:
            best = th
            break
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# FROC

def froc_oracle(rows):
    """Brute-force FROC from (scan_id, label, score) rows.

    For every distinct score t (descending), recount positives and
    negatives with score >= t from scratch; collapse duplicate fp values
    keeping the max sensitivity. Returns a list of (fp_per_scan,
    sensitivity) sorted by fp ascending.
    """
    scans = set(r[0] for r in rows)
    n_pos = sum(1 for r in rows if r[1] == 1)
    assert n_pos > 0 and scans
    raw = []
    for t in sorted(set(float(r[2]) for r in rows), reverse=True):
        tp = sum(1 for r in rows if r[1] == 1 and float(r[2]) >= t)
        fp = sum(1 for r in rows if r[1] == 0 and float(r[2]) >= t)
        raw.append((fp / len(scans), tp / n_pos))
    best = {}
    for fp, sens in raw:
        if fp not in best or sens > best[fp]:
            best[fp] = sens
    return sorted(best.items())


def sensitivity_at_oracle(points, target) -> float:
    """Linear scan over curve points for the step-function reading."""
    best = 0.0
    for fp, sens in points:
        if fp <= target and sens > best:
            best = sens
    return best


def cpm_oracle(points) -> float:
    targets = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
    return sum(sensitivity_at_oracle(points, t) for t in targets) / len(targets)
