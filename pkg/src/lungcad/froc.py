"""FROC analysis: sensitivity against average false positives per scan.

The curve is computed candidate-level with a descending sweep over the
distinct score values, decision rule score >= t. Operating points are read
off the curve as a step function (no interpolation). CPM is the mean
sensitivity at 1/8, 1/4, 1/2, 1, 2, 4 and 8 false positives per scan.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CPM_TARGETS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

SVG_WIDTH = 800
SVG_HEIGHT = 600
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class FrocError(ValueError):
    """Scored input cannot produce a FROC curve."""


@dataclass(frozen=True)
class ScoredCandidate:
    candidate_id: int
    scan_id: str
    label: int
    score: float


@dataclass
class FrocCurve:
    fp_per_scan: np.ndarray      # ascending
    sensitivity: np.ndarray      # non-decreasing, same length
    num_scans: int
    num_positives: int

    def points(self) -> list[tuple[float, float]]:
        return [(float(f), float(s)) for f, s in zip(self.fp_per_scan, self.sensitivity)]


def compute_froc(scored: list[ScoredCandidate]) -> FrocCurve:
    """Sweep thresholds over the distinct scores and collapse duplicates.

    At threshold t: sensitivity = positives scoring >= t / all positives,
    fp_per_scan = negatives scoring >= t / number of scans. Points sharing a
    false-positive rate keep only the best sensitivity.
    """
    if not scored:
        raise FrocError("no scored candidates")
    scores = np.array([s.score for s in scored])
    labels = np.array([s.label for s in scored])
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise FrocError("scores must lie in [0, 1]")
    num_scans = len({s.scan_id for s in scored})
    num_positives = int((labels == 1).sum())
    if num_positives == 0:
        raise FrocError("no positive candidates; sensitivity undefined")

    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    tp = np.cumsum(sorted_labels == 1)
    fp = np.cumsum(sorted_labels == 0)
    # last index of each distinct score group = counts with rule score >= t
    is_last = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    sens = tp[is_last] / num_positives
    fp_rate = fp[is_last] / num_scans

    best: dict[float, float] = {}
    for f, s in zip(fp_rate, sens):
        f, s = float(f), float(s)
        if s > best.get(f, -1.0):
            best[f] = s
    fps = np.array(sorted(best))
    return FrocCurve(fps, np.array([best[f] for f in fps]), num_scans, num_positives)


def sensitivity_at(curve: FrocCurve, targets) -> list[float]:
    """Best sensitivity among points with fp_per_scan <= target; 0 if none."""
    out = []
    for t in targets:
        if t <= 0:
            raise ValueError(f"targets must be positive, got {t}")
        idx = np.searchsorted(curve.fp_per_scan, t, side="right") - 1
        out.append(float(curve.sensitivity[idx]) if idx >= 0 else 0.0)
    return out


def cpm(curve: FrocCurve) -> float:
    """Mean sensitivity over the seven standard FP/scan operating points."""
    return float(np.mean(sensitivity_at(curve, CPM_TARGETS)))


# ---------------------------------------------------------------------------
# report emission

def emit_report(curves: list[tuple[str, FrocCurve]], out_dir) -> dict[str, Path]:
    """Write froc.csv and froc.svg for the named curves; byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "froc.csv"
    svg_path = out / "froc.svg"
    try:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "fp_per_scan", "sensitivity"])
            for name, curve in curves:
                for f, s in curve.points():
                    writer.writerow([name, repr(f), repr(s)])
        svg_path.write_text(render_froc_svg(curves))
    except OSError as e:
        raise OSError(f"writing FROC report under {out}: {e}") from e
    return {"csv": csv_path, "svg": svg_path}


def render_froc_svg(curves: list[tuple[str, FrocCurve]]) -> str:
    """FROC comparison plot: log-scaled FP axis, one polyline per curve."""
    margin_l, margin_r, margin_t, margin_b = 70, 25, 30, 55
    plot_w = SVG_WIDTH - margin_l - margin_r
    plot_h = SVG_HEIGHT - margin_t - margin_b

    positive_fps = [f for _, c in curves for f in c.fp_per_scan if f > 0]
    lo = min([0.125] + positive_fps)
    hi = max([8.0] + positive_fps)
    log_lo, log_hi = np.log10(lo), np.log10(hi)
    span = max(log_hi - log_lo, 1e-9)

    def x_of(fp):
        clamped = max(float(fp), lo)
        return margin_l + (np.log10(clamped) - log_lo) / span * plot_w

    def y_of(sens):
        return margin_t + (1.0 - float(sens)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" '
        f'height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">',
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>',
    ]
    # gridlines at the standard operating points and 0.1 sensitivity steps
    for t in CPM_TARGETS:
        if lo <= t <= hi:
            x = x_of(t)
            parts.append(f'<line x1="{x:.2f}" y1="{margin_t}" x2="{x:.2f}" '
                         f'y2="{margin_t + plot_h}" stroke="#dddddd"/>')
            parts.append(f'<text x="{x:.2f}" y="{margin_t + plot_h + 18}" '
                         f'font-size="12" text-anchor="middle">{_fmt_target(t)}</text>')
    for i in range(11):
        s = i / 10.0
        y = y_of(s)
        parts.append(f'<line x1="{margin_l}" y1="{y:.2f}" x2="{margin_l + plot_w}" '
                     f'y2="{y:.2f}" stroke="#eeeeee"/>')
        parts.append(f'<text x="{margin_l - 8}" y="{y + 4:.2f}" font-size="12" '
                     f'text-anchor="end">{s:.1f}</text>')
    parts.append(f'<rect x="{margin_l}" y="{margin_t}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="black"/>')
    parts.append(f'<text x="{margin_l + plot_w / 2:.2f}" y="{SVG_HEIGHT - 14}" '
                 f'font-size="14" text-anchor="middle">false positives per scan (log scale)</text>')
    parts.append(f'<text x="18" y="{margin_t + plot_h / 2:.2f}" font-size="14" '
                 f'text-anchor="middle" transform="rotate(-90 18 '
                 f'{margin_t + plot_h / 2:.2f})">sensitivity</text>')

    for i, (name, curve) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{x_of(f):.2f},{y_of(s):.2f}" for f, s in curve.points())
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        ly = margin_t + 18 + 18 * i
        parts.append(f'<line x1="{margin_l + 12}" y1="{ly - 4}" x2="{margin_l + 42}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{margin_l + 48}" y="{ly}" font-size="13">{name}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _fmt_target(t: float) -> str:
    return f"{t:g}"


# ---------------------------------------------------------------------------
# scored-candidate CSV (CLI evaluate input)

SCORES_HEADER = ["candidate_id", "scan_id", "label", "score"]


def save_scores_csv(scored: list[ScoredCandidate], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for s in scored:
            writer.writerow([s.candidate_id, s.scan_id, s.label, repr(s.score)])


def load_scores_csv(path) -> list[ScoredCandidate]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SCORES_HEADER:
            raise FrocError(f"{path}: bad header, expected {','.join(SCORES_HEADER)}")
        out = []
        for i, row in enumerate(reader):
            if len(row) != 4:
                raise FrocError(f"{path}:{i + 2}: expected 4 fields, got {len(row)}")
            out.append(ScoredCandidate(int(row[0]), row[1], int(row[2]), float(row[3])))
    return out
