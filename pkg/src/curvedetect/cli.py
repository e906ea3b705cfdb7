"""curvedetect command line: manifest-driven experiments, stage by stage.

Exit codes: 0 success, 2 validation error, 3 backend failure, 4 run
finished but emitted partial results (matrix holes).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BackendError, ValidationError
from .runner import (
    load_manifest,
    parse_manifest,
    run_ablation_filler,
    run_ablation_maskpct,
    run_checkpoint_sweep,
    run_matrix,
    run_stage_eval,
    run_stage_perturb,
    run_stage_pool,
    run_stage_score,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", "-m", required=True, help="experiment manifest JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the pool and perturbation seeds")
    parser.add_argument("--cache-dir", default=None, help="response cache directory")
    parser.add_argument("--workers", type=int, default=None, help="parallel workers per stage")
    parser.add_argument("--offline", action="store_true",
                        help="fail instead of calling the network (cache only)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curvedetect",
        description="perturbation-curvature machine-generated text detection engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pool = sub.add_parser("pool", help="target pool stages")
    pool_sub = pool.add_subparsers(dest="pool_command", required=True)
    _add_common(pool_sub.add_parser("build", help="build the human/machine pool"))

    _add_common(sub.add_parser("perturb", help="build perturbed neighbors"))

    score = sub.add_parser("score", help="score pool and neighbors under one detector")
    _add_common(score)
    score.add_argument("--detector", required=True, help="detector alias from the manifest")

    _add_common(sub.add_parser("eval", help="evaluate matrices from existing scores"))

    run = sub.add_parser("run", help="full pipeline for a manifest")
    run.add_argument("manifest", help="experiment manifest JSON")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--cache-dir", default=None)
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--offline", action="store_true")

    ablate = sub.add_parser("ablate", help="ablation sweeps")
    ablate_sub = ablate.add_subparsers(dest="ablate_command", required=True)
    mask = ablate_sub.add_parser("mask-pct", help="masking percentage sweep (contiguous)")
    _add_common(mask)
    mask.add_argument("--pcts", default="0.01,0.02,0.15,0.5,0.9",
                      help="comma-separated masked fractions")
    _add_common(ablate_sub.add_parser("filler", help="fill backend comparison"))

    sweep = sub.add_parser("sweep", help="detector sweeps")
    sweep_sub = sweep.add_subparsers(dest="sweep_command", required=True)
    _add_common(sweep_sub.add_parser("checkpoints", help="training-step labeled detectors"))

    report = sub.add_parser("report", help="print a summary of an experiment's artifacts")
    report.add_argument("--manifest", "-m", required=True)
    return parser


def _load(args) -> "ExperimentManifest":
    manifest = load_manifest(args.manifest)
    if getattr(args, "seed", None) is not None:
        raw = json.loads(json.dumps(manifest.raw))
        raw.setdefault("pool", {})["seed"] = args.seed
        raw.setdefault("perturbation", {})["seed"] = args.seed
        manifest = parse_manifest(raw, base_dir=manifest.base_dir)
    return manifest


def _kwargs(args) -> dict:
    return {
        "offline": bool(getattr(args, "offline", False)),
        "cache_dir": Path(args.cache_dir) if getattr(args, "cache_dir", None) else None,
        "workers": getattr(args, "workers", None),
    }


def _print_matrix(matrix) -> None:
    width = max([len(g) for g in matrix.generators + ["mean"]] + [9])
    print(f"{'generator':<{width}} " + " ".join(f"{d:>12}" for d in matrix.detectors))
    for gen, row in zip(matrix.generators, matrix.auc):
        cells = " ".join(f"{v:>12.4f}" if v is not None else f"{'-':>12}" for v in row)
        print(f"{gen:<{width}} {cells}")
    cells = " ".join(
        f"{v:>12.4f}" if v is not None else f"{'-':>12}" for v in matrix.mean_row
    )
    print(f"{'mean':<{width}} {cells}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            manifest = _load(args)
            result = run_matrix(manifest, **_kwargs(args))
            _print_matrix(result.matrix)
            print(f"artifacts: {result.output_dir}")
            return EXIT_PARTIAL if result.partial else EXIT_OK

        if args.command == "pool":
            path = run_stage_pool(_load(args), **_kwargs(args))
            print(f"pool: {path}")
            return EXIT_OK

        if args.command == "perturb":
            path = run_stage_perturb(_load(args), **_kwargs(args))
            print(f"perturbations: {path}")
            return EXIT_OK

        if args.command == "score":
            path = run_stage_score(_load(args), args.detector, **_kwargs(args))
            print(f"curvature: {path}")
            return EXIT_OK

        if args.command == "eval":
            result = run_stage_eval(_load(args), **_kwargs(args))
            _print_matrix(result.matrix)
            return EXIT_PARTIAL if result.partial else EXIT_OK

        if args.command == "ablate" and args.ablate_command == "mask-pct":
            pcts = [float(x) for x in args.pcts.split(",") if x.strip()]
            result = run_ablation_maskpct(_load(args), pcts=pcts, **_kwargs(args))
            for row in result.rows:
                aucs = " ".join(f"{k}={v:.4f}" for k, v in row["auc"].items() if v is not None)
                print(f"mask_pct={row['mask_pct']:g}: {aucs}")
            return EXIT_OK

        if args.command == "ablate" and args.ablate_command == "filler":
            result = run_ablation_filler(_load(args), **_kwargs(args))
            for row in result.rows:
                aucs = " ".join(f"{k}={v:.4f}" for k, v in row["auc"].items() if v is not None)
                print(f"filler={row['filler']}: {aucs}")
            return EXIT_OK

        if args.command == "sweep" and args.sweep_command == "checkpoints":
            result = run_checkpoint_sweep(_load(args), **_kwargs(args))
            for row in result.rows:
                aucs = " ".join(f"{k}={v:.4f}" for k, v in row["auc"].items() if v is not None)
                print(f"step={row['step']} ({row['detector']}): {aucs}")
            return EXIT_OK

        if args.command == "report":
            manifest = load_manifest(args.manifest)
            matrix_json = manifest.resolve(manifest.output_dir) / "matrix.json"
            if not matrix_json.exists():
                raise ValidationError(f"no matrix artifact at {matrix_json}; run the experiment first")
            payload = json.loads(matrix_json.read_text(encoding="utf-8"))
            print(f"experiment: {manifest.name}")
            print(f"engine: {payload.get('engine_version', '?')} "
                  f"manifest: {payload.get('manifest_hash', '?')[:16]}")
            header = ["generator"] + payload["detectors"]
            print(" ".join(f"{h:>14}" for h in header))
            for gen, row in zip(payload["generators"], payload["auc"]):
                cells = [f"{v:.4f}" if v is not None else "-" for v in row]
                print(" ".join(f"{c:>14}" for c in [gen] + cells))
            cells = [f"{v:.4f}" if v is not None else "-" for v in payload["mean_row"]]
            print(" ".join(f"{c:>14}" for c in ["mean"] + cells))
            if payload.get("missing"):
                print(f"holes: {payload['missing']}")
            return EXIT_OK

        raise ValidationError(f"unhandled command {args.command!r}")
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
