"""Command-line entry point.

Exit codes: 0 success, 1 certification failure, 2 input/config error,
3 degenerate data, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

from . import collapse_lab, gradcheck
from .telu import analyze as analyze_telu
from .dispersion import (
    DISTANCES,
    HINGE_FORMS,
    VARIANTS,
    DispersionSpec,
    PositivePairing,
    decomposition_residual,
    dispersive_loss,
)
from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateBatchError,
    DivergenceError,
    InvalidInputError,
)
from .numeric_core import parse_csv_matrix, read_csv_matrix

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_DEGENERATE, EXIT_DIVERGED = 0, 1, 2, 3, 4
DECOMPOSITION_TOL = 1e-12


def _finite_or_null(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    return obj


def dump_json(obj) -> str:
    """Strict JSON (non-finite floats become null), sorted keys, trailing newline."""
    return json.dumps(_finite_or_null(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InvalidInputError(f"{path}: {exc.strerror}") from None


def _spec_from_args(args) -> DispersionSpec:
    payload = json.loads(_read_text(args.spec)) if getattr(args, "spec", None) else {}
    if not isinstance(payload, dict):
        raise ConfigError(["top level: expected a JSON object"])
    for key in ("variant", "tau", "epsilon", "margin", "hinge_form"):
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    if getattr(args, "include_self_pairs", False):
        payload["include_self_pairs"] = True
    return DispersionSpec.from_dict(payload)


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", help="JSON file with DispersionSpec fields; flags override it")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--hinge-form", dest="hinge_form", choices=HINGE_FORMS)
    p.add_argument("--include-self-pairs", action="store_true")


def cmd_eval_loss(args) -> int:
    spec = _spec_from_args(args)
    H = read_csv_matrix(args.input)
    sys.stdout.write(f"{dispersive_loss(H, spec):.12f}\n")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise InvalidInputError("--trials must be >= 1")
    spec = _spec_from_args(args)
    check = gradcheck.check_objective_gradients if args.target == "objective" else gradcheck.check_loss_gradients
    report = check(spec, args.trials, args.seed)
    _emit(dump_json(report), args.output)
    if not report["pass"]:
        w = report["worst_trial"]
        print(f"grad-check failed: trial seed {w['trial_seed']}, shape {w['B']}x{w['d']}, "
              f"rel err {w['rel_err']:.3e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_telu_analyze(args) -> int:
    try:
        report = analyze_telu(args.grid_lo, args.grid_hi, args.grid_n, args.tol).to_dict()
    except ContractViolationError as exc:
        _emit(dump_json({"certified": False, "error": str(exc)}), args.output)
        return EXIT_FAIL
    _emit(dump_json(report), args.output)
    return EXIT_OK if report["certified"] else EXIT_FAIL


def _load_pairing(spec: str, B: int) -> PositivePairing:
    if spec == "ring":
        return PositivePairing.ring(B)
    M = parse_csv_matrix(_read_text(spec), source=spec)
    if M.shape[1] != 2 or (M != M.round()).any():
        raise InvalidInputError(f"{spec}: pairing file needs two integer columns: anchor,positive")
    return PositivePairing(tuple((int(a), int(p)) for a, p in M))


def cmd_decompose_check(args) -> int:
    H = read_csv_matrix(args.input)
    pairing = _load_pairing(args.pairing, H.shape[0])
    residual = decomposition_residual(H, pairing, args.tau, args.distance, args.include_self_pairs)
    ok = residual <= DECOMPOSITION_TOL
    _emit(dump_json({
        "max_residual": residual,
        "tolerance": DECOMPOSITION_TOL,
        "anchors": len(pairing.pairs),
        "distance": args.distance,
        "tau": args.tau,
        "include_self_pairs": args.include_self_pairs,
        "pass": ok,
    }), args.output)
    return EXIT_OK if ok else EXIT_FAIL


def format_curve_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(collapse_lab.CURVE_COLUMNS)
    for row in curve:
        w.writerow([row["epoch"], row["stage"]] + [repr(row[k]) for k in ("mask_loss", "disp_loss", "total")])
    return buf.getvalue()


def _parse_seeds(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise InvalidInputError(f"--seeds: expected comma-separated integers, got {raw!r}") from None
    if not seeds:
        raise InvalidInputError("--seeds is empty")
    return seeds


def cmd_train_toy(args) -> int:
    config = collapse_lab.TrainConfig.from_json(_read_text(args.config)) if args.config else collapse_lab.TrainConfig()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _, report = collapse_lab.train_two_stage(collapse_lab.dataset_for(config), config)
    except DivergenceError as exc:
        (out / "summary.json").write_text(dump_json({"diverged": True, "epoch": exc.epoch, "error": str(exc),
                                                      "config": config.to_dict()}))
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    summary = {"diverged": False, "config": config.to_dict(), "metrics": report.summary()}
    if args.compare_baseline:
        seeds = _parse_seeds(args.seeds) if args.seeds else [config.seed]
        summary["comparison"] = collapse_lab.compare_with_baseline(config, seeds)
    (out / "curve.csv").write_text(format_curve_csv(report.curve))
    (out / "summary.json").write_text(dump_json(summary))
    print(out / "summary.json")
    return EXIT_OK


def cmd_metrics(args) -> int:
    H = read_csv_matrix(args.input)
    _emit(dump_json(collapse_lab.dispersion_metrics(H)), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dispersekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval-loss", help="print a dispersive loss for a CSV batch")
    p.add_argument("--input", required=True)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("grad-check", help="finite-difference certification of analytic gradients")
    _add_spec_flags(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", choices=("loss", "objective"), default="loss",
                   help="the bare loss, or the full training objective through the toy encoder")
    p.add_argument("--output")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("telu-analyze", help="certify the TeLU properties numerically")
    p.add_argument("--grid-lo", type=float, default=-30.0)
    p.add_argument("--grid-hi", type=float, default=30.0)
    p.add_argument("--grid-n", type=int, default=100_000)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--output")
    p.set_defaults(func=cmd_telu_analyze)

    p = sub.add_parser("decompose-check", help="check InfoNCE = alignment + dispersion per anchor")
    p.add_argument("--input", required=True)
    p.add_argument("--pairing", default="ring", help="'ring' or a CSV file of anchor,positive rows")
    p.add_argument("--tau", type=float, default=0.8)
    p.add_argument("--distance", choices=DISTANCES, default="l2_squared")
    p.add_argument("--include-self-pairs", action="store_true")
    p.add_argument("--output")
    p.set_defaults(func=cmd_decompose_check)

    p = sub.add_parser("train-toy", help="run the two-stage collapse lab")
    p.add_argument("--config", help="TrainConfig JSON; defaults are used when omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--compare-baseline", action="store_true",
                   help="also train with both dispersion weights at 0 and report the comparison")
    p.add_argument("--seeds", help="comma-separated seeds for --compare-baseline")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("metrics", help="dispersion statistics of a CSV batch")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DegenerateBatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (InvalidInputError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ContractViolationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
