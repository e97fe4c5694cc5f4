from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, NoReturn, Optional, Sequence

from core.config import settings
from core.exceptions import AppException, SpecError, StorageError

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s | %(levelname)-7s | %(name)s | %(message)s",
    datefmt="%H:%M:%S",
)
logger: logging.Logger = logging.getLogger("main")


def _int_list(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{raw}'") from exc


def _float_list(raw: str) -> list[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{raw}'") from exc


# ── Parser ─────────────────────────────────────────────────────


class UsageParser(argparse.ArgumentParser):
    """Writes the machine-readable `error=` line before argparse's usage text."""

    def error(self, message: str) -> NoReturn:
        sys.stderr.write(f"error=UsageError message={json.dumps(message)}\n")
        self.print_usage(sys.stderr)
        sys.exit(2)


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="Dataset path (CSV, or CUB attribute file)")
    p.add_argument("--format", choices=["csv", "cub_attributes"], help="Dataset format (default csv)")
    p.add_argument("--classes", type=int, help="Class count C (default: max label + 1)")


def _training_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--exclude", type=_int_list, help="Concept indices kept out of the mRMR pool")
    p.add_argument("--schedule", type=_int_list, help="Nesting levels, e.g. 8,16,32 (default: doubling up to K)")
    p.add_argument("--mode", choices=["standard", "efficient"])
    p.add_argument("--training", choices=["joint", "sequential", "independent"])
    p.add_argument("--sampling", choices=["all_levels", "random_level"], help="Efficient-mode level sampling")
    p.add_argument("--alpha", type=float, help="Concept loss weight")
    p.add_argument("--lambdas", type=_float_list, help="Per-level task loss weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="Learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--fractions", type=_float_list, help="train,val,test fractions (default 0.6,0.2,0.2)")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="Model JSON written by train")
    p.add_argument("--ranking", help="Ranking CSV overriding the model's own order")
    p.add_argument("--k-grid", type=_int_list, help="Intervention counts (default: 0 plus the schedule)")


def build_parser() -> argparse.ArgumentParser:
    parser: argparse.ArgumentParser = UsageParser(
        prog="mcbm",
        description="Matryoshka concept bottleneck models: ranking, training, intervention and theory checks",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str, *builders: Callable[[argparse.ArgumentParser], None]) -> argparse.ArgumentParser:
        p: argparse.ArgumentParser = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("-o", "--output", help="Output directory, or primary output file")
        p.add_argument("--seed", type=int)
        p.add_argument("--config", dest="config_file", help="JSON config or a previous run's manifest")
        for build in builders:
            build(p)
        return p

    synth = add("synth", "Generate a synthetic dataset with planted nested structure")
    synth.add_argument("--levels", type=int, help="L, number of geometric levels")
    synth.add_argument("--base", type=int, help="k1, size of the first level")
    synth.add_argument("--r", type=float, help="Concept growth rate (> 1)")
    synth.add_argument("--gamma", type=float, help="Level decay rate in (0, 1)")
    synth.add_argument("--classes", type=int)
    synth.add_argument("--n", type=int, help="Number of samples")
    synth.add_argument("--copies", type=int, help="Redundant clones of each level-1 concept")
    synth.add_argument("--noise", type=float, help="Concept flip probability")
    synth.add_argument("--feature-dim", type=int)
    synth.add_argument("--feature-noise", type=float)

    add("load", "Validate a dataset and write it back as canonical CSV", _data_args)

    rank = add("rank", "Rank concepts by mRMR", _data_args)
    rank.add_argument("--exclude", type=_int_list)

    stability = add("stability", "Top-k IoU of mRMR rankings across subsamples", _data_args)
    stability.add_argument("--exclude", type=_int_list)
    stability.add_argument("--seeds", type=_int_list)
    stability.add_argument("--fraction", type=float, help="Subsample fraction in (0, 1]")
    stability.add_argument("--prefix", type=_int_list, help="Prefix sizes k for the IoU")
    stability.add_argument("--against", help="Ranking CSV to correlate with the full-data mRMR order")

    train = add("train", "Train a Matryoshka model", _data_args, _training_args)
    train.add_argument("--ranking", help="Ranking CSV (default: mRMR on the training split)")

    evaluate = add("evaluate", "Accuracy and macro F1 per nesting level", _data_args)
    evaluate.add_argument("--model")
    evaluate.add_argument("--levels", type=_int_list, help="Levels to evaluate (default: the schedule)")

    intervene = add("intervene", "Simulate concept interventions", _data_args, _model_args)
    intervene.add_argument("--ordering", choices=["mrmr", "random", "weight"])
    intervene.add_argument("--policy", choices=["matched", "full_head", "both"])
    intervene.add_argument("--all-samples", action="store_true", help="Analyse l* over every sample")

    decay = add("decay-fit", "Fit geometric decay to an l* histogram")
    decay.add_argument("--counts", type=_float_list)
    decay.add_argument("--histogram", help="levels.json written by intervene")
    decay.add_argument("--level-sizes", type=_float_list)

    regimes = add("regimes", "Monte Carlo intervention-cost regimes")
    regimes.add_argument("--r", type=float)
    regimes.add_argument("--gamma", type=float)
    regimes.add_argument("--base", type=float)
    regimes.add_argument("--levels-grid", type=_int_list)
    regimes.add_argument("--samples", type=int)

    bound = add("bound", "Intervention error bound per k", _data_args, _model_args)
    bound.add_argument("--bins", type=_float_list)

    pipeline = add("pipeline", "Rank, train, intervene and analyse in one run", _data_args, _training_args)
    pipeline.add_argument("--k-grid", type=_int_list)
    pipeline.add_argument("--bins", type=_float_list)
    pipeline.add_argument("--all-samples", action="store_true")
    return parser


# ── Dispatch ───────────────────────────────────────────────────


def _read_config_file(path: Optional[str], command: str) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        payload: Any = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise SpecError("Unreadable config file", detail=str(exc), context={"path": path}) from exc
    if not isinstance(payload, dict):
        raise SpecError("Config file must hold a JSON object", context={"path": path})
    if "resolved_config" in payload:
        if payload.get("command") not in (None, command):
            logger.warning("[Config] Manifest was written by '%s', reusing it for '%s'", payload.get("command"), command)
        payload = payload["resolved_config"]
    return payload


def _report_error(exc: AppException) -> None:
    sys.stderr.write(f"error={type(exc).__name__} message={json.dumps(exc.message)}\n")
    if exc.detail:
        sys.stderr.write(f"  detail: {exc.detail}\n")
    for key, value in (exc.context or {}).items():
        sys.stderr.write(f"  {key}: {value}\n")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command; 0 on success, 1 on a domain error, 2 on a usage error."""
    from pipeline.runner import ExperimentRunner, missing_required, resolve_config

    parser: argparse.ArgumentParser = build_parser()
    try:
        args: argparse.Namespace = parser.parse_args(list(argv) if argv is not None else None)
        flags: dict[str, Any] = vars(args)
        command: str = flags.pop("command")
        config_file: Optional[str] = flags.pop("config_file", None)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    try:
        resolved: dict[str, Any] = resolve_config(command, _read_config_file(config_file, command), flags)
        missing: list[str] = missing_required(command, resolved)
        if missing:
            sys.stderr.write(f"error=UsageError message={json.dumps('missing required: ' + ', '.join(missing))}\n")
            sys.stderr.write(parser.format_usage())
            return 2
        try:
            manifest: Path = ExperimentRunner(command, resolved).run()
        except OSError as exc:
            raise StorageError(
                "Filesystem operation failed", detail=str(exc), context={"path": exc.filename},
            ) from exc
    except AppException as exc:
        _report_error(exc)
        logger.error("[Main] %s failed: %r", command, exc)
        return 1

    logger.info("[Main] %s finished; manifest at %s", command, manifest)
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
