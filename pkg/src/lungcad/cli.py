"""Command-line entry point.

Subcommands: synth, train-cascade, build-vectors, train-fusion, evaluate,
pipeline, gradient-check. Exit codes: 0 success, 1 runtime/data error,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import nn
from .cascade import (CascadeError, _substream, infer_cascade, load_cascade)
from .data import (DataError, generate_synthetic, load_candidates,
                   load_patch_store, save_candidates, save_patch_store,
                   split_folds)
from .froc import (FrocError, compute_froc, cpm, emit_report, load_scores_csv,
                   save_scores_csv, ScoredCandidate)
from .fusion import (FusionError, load_matrix_csv, save_matrix_csv,
                     build_probability_vectors, train_fusion_cv)
from .pipeline import (ConfigError, PipelineConfig, PipelineError,
                       dataset_counts, load_dataset, run_pipeline,
                       run_train_cascade, write_manifest)
from .sampling import SamplingError

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="key=value configuration file")
    common.add_argument("--seed", type=int, default=None,
                        help="root seed for all derived RNG streams")
    common.add_argument("--out", type=Path, default=None,
                        help="output directory")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="lungcad",
                                     description="cascaded candidate "
                                     "classification with fusion and FROC "
                                     "evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic candidate dataset")
    p.add_argument("--positives", type=int, default=10)
    p.add_argument("--negatives", type=int, default=1000)
    p.add_argument("--separation", type=float, default=0.25)
    p.add_argument("--noise-sigma", type=float, default=0.05)

    sub.add_parser("train-cascade", parents=[common],
                   help="train the cascade on the configured dataset")

    p = sub.add_parser("build-vectors", parents=[common],
                       help="score all candidates with every cascade model")
    p.add_argument("--cascade", type=Path, required=True,
                   help="cascade bundle directory")

    p = sub.add_parser("train-fusion", parents=[common],
                       help="train the fusion net with scan-level CV")
    p.add_argument("--vectors", type=Path, required=True,
                   help="vectors.csv from build-vectors")

    p = sub.add_parser("evaluate", parents=[common],
                       help="FROC curves and CPM from score CSVs")
    p.add_argument("--scores", action="append", default=[],
                   metavar="NAME=PATH", help="labelled score CSV (repeatable)")

    sub.add_parser("pipeline", parents=[common],
                   help="run the whole flow into one output directory")

    p = sub.add_parser("gradient-check", parents=[common],
                       help="finite-difference verification of backprop")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=1e-5)
    return parser


def _load_config(args, parser: argparse.ArgumentParser) -> PipelineConfig:
    if args.config is not None:
        if not args.config.exists():
            parser.error(f"config file not found: {args.config}")
        config = PipelineConfig.from_file(args.config)
    else:
        config = PipelineConfig({})
    config.override("seed", args.seed)
    return config


def _require_out(args, parser: argparse.ArgumentParser) -> Path:
    if args.out is None:
        parser.error("--out is required for this command")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_synth(args, parser) -> int:
    if args.positives < 1:
        parser.error("--positives must be at least 1")
    if args.negatives < args.positives:
        parser.error("--negatives must be >= --positives")
    if args.separation < 0 or args.noise_sigma < 0:
        parser.error("--separation and --noise-sigma must be non-negative")
    config = _load_config(args, parser)
    config.override("synth.positives", args.positives)
    config.override("synth.negatives", args.negatives)
    config.override("synth.separation", args.separation)
    config.override("synth.noise_sigma", args.noise_sigma)
    out = _require_out(args, parser)
    records, store = generate_synthetic(config.synthetic_config())
    save_candidates(records, out / "candidates.csv")
    save_patch_store(store, out / "patches.bin")
    write_manifest(out, config, {"dataset": dataset_counts(records)})
    print(f"wrote {len(records)} candidates "
          f"({dataset_counts(records)['positives']} positive) to {out}")
    return 0


def cmd_train_cascade(args, parser) -> int:
    config = _load_config(args, parser)
    out = _require_out(args, parser)
    payload = run_train_cascade(config, out)
    print(f"cascade trained; survivors per stage: {payload['survivor_counts']}")
    return 0


def cmd_build_vectors(args, parser) -> int:
    config = _load_config(args, parser)
    out = _require_out(args, parser)
    cascade = load_cascade(args.cascade)
    records, store = load_dataset(config)
    matrix = build_probability_vectors(cascade.all_models(), records, store)
    save_matrix_csv(matrix, out / "vectors.csv")
    print(f"wrote {matrix.n}x{matrix.m} probability matrix to {out / 'vectors.csv'}")
    return 0


def cmd_train_fusion(args, parser) -> int:
    config = _load_config(args, parser)
    out = _require_out(args, parser)
    candidates_path = config.get("data.candidates")
    if candidates_path is None:
        parser.error("config key data.candidates is required (for scan-level folds)")
    matrix = load_matrix_csv(args.vectors)
    records = load_candidates(candidates_path)
    folds = split_folds(records, config.fold_count,
                        _substream(config.seed, "fold"))
    models, oof = train_fusion_cv(matrix, folds, config.fusion_train_config(),
                                  config.fusion_spec(matrix.m))
    for fold, model in sorted(models.items()):
        model.save(out / f"fusion{fold}.lcnn")
    by_id = {r.candidate_id: r for r in records}
    scored = sorted((ScoredCandidate(s.candidate_id, by_id[s.candidate_id].scan_id,
                                     by_id[s.candidate_id].label, s.score)
                     for s in oof), key=lambda s: s.candidate_id)
    save_scores_csv(scored, out / "fusion_scores.csv")
    print(f"trained {len(models)} fold models; "
          f"out-of-fold scores in {out / 'fusion_scores.csv'}")
    return 0


def cmd_evaluate(args, parser) -> int:
    if not args.scores:
        parser.error("at least one --scores NAME=PATH is required")
    out = _require_out(args, parser)
    curves = []
    for item in args.scores:
        if "=" not in item:
            parser.error(f"--scores expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        scored = load_scores_csv(path)
        curves.append((name, compute_froc(scored)))
    emit_report(curves, out)
    for name, curve in curves:
        print(f"{name}: cpm={cpm(curve):.4f} over {curve.num_scans} scans, "
              f"{curve.num_positives} positives")
    return 0


def cmd_pipeline(args, parser) -> int:
    config = _load_config(args, parser)
    out = _require_out(args, parser)
    payload = run_pipeline(config, out)
    print(f"pipeline complete; survivors per stage: {payload['survivor_counts']}; "
          f"report in {out}")
    return 0


# (name, input shape, layers, n classes, tolerance); conv/pool get the looser
# bound because max-pool ties and kernel sums amplify round-off.
CHECK_ARCHITECTURES = (
    ("mlp", (6,), (nn.Dense(6, 8), nn.Relu(), nn.Dropout(0.5),
                   nn.Dense(8, 3), nn.Softmax()), 3, 1e-4),
    ("conv", (8, 8, 2), (nn.Conv2D(2, 3, kernel_size=3), nn.Relu(),
                         nn.MaxPool2x2(), nn.Dense(27, 2), nn.Softmax()),
     2, 1e-3),
)


def cmd_gradient_check(args, parser) -> int:
    if args.seeds < 1:
        parser.error("--seeds must be at least 1")
    failed = False
    for name, shape, layers, n_classes, tolerance in CHECK_ARCHITECTURES:
        worst = 0.0
        for seed in range(args.seeds):
            rng = np.random.default_rng(seed)
            model = nn.Network(shape, layers, seed=seed)
            batch = rng.uniform(0.0, 1.0, size=(4, *shape))
            labels = rng.integers(0, n_classes, size=4)
            err = nn.gradient_check(model, batch, labels,
                                    epsilon=args.epsilon, seed=seed)
            worst = max(worst, err)
        status = "ok" if worst < tolerance else "FAIL"
        print(f"{name}: max relative error {worst:.3e} "
              f"(tolerance {tolerance:.0e}) {status}")
        failed = failed or worst >= tolerance
    return FAILURE_EXIT if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "train-cascade": cmd_train_cascade,
    "build-vectors": cmd_build_vectors,
    "train-fusion": cmd_train_fusion,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "gradient-check": cmd_gradient_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = COMMANDS[args.command]
    try:
        return handler(args, parser)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (DataError, SamplingError, CascadeError, FusionError, FrocError,
            PipelineError, nn.ShapeError, nn.NumericError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
