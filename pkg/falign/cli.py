"""Command-line front end.

Exit codes: 0 success, 1 runtime failure (missing data, divergence, bad
files), 2 usage error.
"""
import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from dotenv import dotenv_values

from .experiments import (
    DEFAULT_ANGLE_REPETITIONS,
    DEFAULT_ARCH,
    DEFAULT_SCALE_GRID,
    DEFAULT_SWAP_EPOCHS,
    DEFAULT_SWAP_STEP,
    SYNTHETIC_ARCH,
    DatasetName,
    ExperimentConfig,
    SwapDirection,
    alignment_forcing_experiment,
    angle_sweep,
    init_scale_sweep,
    matched_perturbation_comparison,
    scale_sweep_summary,
    swap_experiment,
    train,
    write_rows,
    write_run,
)
from .gradcheck import finite_difference_check
from .network import WeightMode
from .rules import FeedbackDistribution, RuleTag

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_LEVEL_ENV = "FALIGN_LOG_LEVEL"
OUT_DIR_ENV = "FALIGN_OUT_DIR"
DEFAULT_OUT_DIR = "runs"
GRADCHECK_TOLERANCE = 1e-5
# Angles typed with a few decimals (3.1416) may overshoot pi slightly.
ANGLE_SLACK = 1e-3
DEFAULT_MATCHED_UPDATES = 5

SUBCOMMANDS = {
    "train": "single run of one update rule",
    "swap": "FA and BP in lockstep with a weight swap (stability of FA fixed points)",
    "sweep-init": "final accuracy and gradient norms against the initial weight scale",
    "sweep-angle": "perturbed BP accuracy against alignment, plus the matched FA comparison",
    "forcing": "FA from random, sign-matched and feedback-equal initial weights",
    "gradcheck": "backprop against central finite differences",
}

# Plot each experiment regenerates, listed under --help.
PLOTS = {
    "swap": "test accuracy and cross-run weight alignment before and after a weight swap",
    "sweep-init": "final accuracy and first-step gradient infinity norms against initial weight scale",
    "sweep-angle": "accuracy against gradient alignment with LastLayerOnly, FA and BP lines",
    "forcing": "accuracy and weight alignment for random, sign-matched and equal initial weights",
}

# Epochs per subcommand when neither a flag nor the config file gives them.
DEFAULT_EPOCHS = {
    "train": 10,
    "swap": DEFAULT_SWAP_EPOCHS,
    "sweep-init": 5,
    "sweep-angle": 1,
    "forcing": 10,
}


def _enum(kind) -> Callable[[str], Any]:
    def convert(value: str):
        try:
            return kind(value.strip())
        except ValueError:
            choices = ", ".join(k.value for k in kind)
            raise argparse.ArgumentTypeError(f"invalid choice '{value}' (choose from {choices})")

    return convert


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return n


def _seed(value: str) -> int:
    n = int(value)
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {value}")
    return n


def _positive_float(value: str) -> float:
    x = float(value)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return x


def _non_negative_float(value: str) -> float:
    x = float(value)
    if not x >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return x


def _angle(value: str) -> float:
    x = float(value)
    if not 0.0 <= x <= math.pi + ANGLE_SLACK:
        raise argparse.ArgumentTypeError(f"angle must lie in [0, pi], got {value}")
    return min(x, math.pi)


def _list_of(convert: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(value: str) -> tuple:
        items = [v for v in value.split(",") if v.strip()]
        if not items:
            raise argparse.ArgumentTypeError("expected a comma separated list")
        return tuple(convert(v.strip()) for v in items)

    return parse


def _metrics_format(value: str) -> str:
    value = value.strip()
    if value not in ("csv", "jsonl"):
        raise argparse.ArgumentTypeError(f"invalid choice '{value}' (choose from csv, jsonl)")
    return value


def _arch(value: str) -> tuple[int, ...]:
    sizes = _list_of(_positive_int)(value)
    if len(sizes) < 2:
        raise argparse.ArgumentTypeError(f"architecture needs at least two layer sizes, got {value}")
    return sizes


@dataclass(frozen=True)
class _Option:
    flag: str
    dest: str
    convert: Callable[[str], Any]
    help: str


# Options shared by every experiment subcommand. The flag name without the
# leading dashes is also the config-file key.
EXPERIMENT_OPTIONS = (
    _Option("--rule", "rule", _enum(RuleTag), "update rule: bp, fa, dfa, perturbed or lastlayer"),
    _Option("--angle", "angle", _angle, "perturbation angle in radians, [0, pi]"),
    _Option("--epochs", "epochs", _positive_int, "training epochs"),
    _Option("--lr", "learning_rate", _positive_float, "learning rate (default 0.05)"),
    _Option("--batch", "batch_size", _positive_int, "mini-batch size (default 100)"),
    _Option("--scale", "weight_scale", _non_negative_float, "initial weight scale (default 0.05)"),
    _Option("--weight-mode", "weight_mode", _enum(WeightMode), "normal, sign-matched or equal-feedback"),
    _Option("--feedback-dist", "feedback_distribution", _enum(FeedbackDistribution), "rademacher or normal"),
    _Option("--seed", "seed", _seed, "master seed; every random stream derives from it"),
    _Option("--cadence", "cadence", _positive_int, "evaluate test accuracy every N steps (default 50)"),
    _Option("--data-dir", "data_dir", str, "MNIST directory (overrides FALIGN_DATA_DIR)"),
    _Option("--out", "out", str, "output directory (default FALIGN_OUT_DIR or ./runs)"),
    _Option("--jobs", "jobs", _positive_int, "parallel worker processes for sweeps (default 1)"),
    _Option("--dataset", "dataset", _enum(DatasetName), "mnist or synthetic-xor"),
    _Option("--arch", "arch", _arch, "comma separated layer sizes, e.g. 784,700,1000,10"),
    _Option("--format", "fmt", _metrics_format, "metrics format: csv or jsonl"),
    _Option("--swap-step", "swap_step", _positive_int, f"swap step (default {DEFAULT_SWAP_STEP})"),
    _Option("--direction", "direction", _enum(SwapDirection), "fa-to-bp or bp-to-fa"),
    _Option("--scales", "scales", _list_of(_non_negative_float), "comma separated initial weight scales"),
    _Option("--angles", "angles", _list_of(_angle), "comma separated perturbation angles in radians"),
    _Option("--repetitions", "repetitions", _positive_int, "repetitions per sweep point"),
    _Option("--updates", "updates", _positive_int, "cap every sweep run at this many updates"),
)
OPTIONS_BY_KEY = {o.flag[2:]: o for o in EXPERIMENT_OPTIONS}


@dataclass(frozen=True)
class CliInvocation:
    subcommand: str
    config: Optional[ExperimentConfig]
    out_dir: Path
    jobs: int = 1
    fmt: str = "csv"
    swap_step: int = DEFAULT_SWAP_STEP
    direction: SwapDirection = SwapDirection.FA_TO_BP
    scales: tuple[float, ...] = DEFAULT_SCALE_GRID
    angles: tuple[float, ...] = ()
    repetitions: int = 1
    updates: Optional[int] = None
    verbose: bool = False


def build_parser() -> argparse.ArgumentParser:
    epilog = "experiments:\n" + "\n".join(f"  {name:<12} {text}" for name, text in SUBCOMMANDS.items())
    epilog += "\n\nplots:\n" + "\n".join(f"  {name:<12} {text}" for name, text in PLOTS.items())
    epilog += "\n\nexit codes: 0 success, 1 runtime failure, 2 usage error"
    parser = argparse.ArgumentParser(
        prog="lab.py",
        description="Feedback alignment lab: FA, DFA, BP and perturbed BP on MNIST.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=False, help="debug logging")

    experiment = argparse.ArgumentParser(add_help=False)
    experiment.add_argument("--config", default=None, help="key=value file; flags override its values")
    for option in EXPERIMENT_OPTIONS:
        experiment.add_argument(option.flag, dest=option.dest, type=option.convert, default=None, help=option.help)

    subparsers = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    subparsers.required = True
    for name, text in SUBCOMMANDS.items():
        parents = [common] if name == "gradcheck" else [common, experiment]
        subparsers.add_parser(name, parents=parents, help=text, description=text)
    return parser


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a key=value file into option destinations.

    Keys are flag names without dashes; ``-`` and ``_`` are interchangeable.
    Raises ValueError for unknown keys or bad values.
    """
    path = Path(path)
    if not path.is_file():
        raise ValueError(f"config file not found: {path}")
    values = {}
    for key, raw in dotenv_values(path).items():
        name = key.strip().lower().replace("_", "-")
        option = OPTIONS_BY_KEY.get(name)
        if option is None:
            raise ValueError(f"unknown key '{key}' in {path}")
        if raw is None or raw.strip() == "":
            continue
        try:
            values[option.dest] = option.convert(raw.strip())
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise ValueError(f"bad value for '{key}' in {path}: {e}")
    return values


def _merge(args: argparse.Namespace, file_values: dict[str, Any]) -> dict[str, Any]:
    settings = dict(file_values)
    for option in EXPERIMENT_OPTIONS:
        value = getattr(args, option.dest)
        if value is not None:
            settings[option.dest] = value
    return settings


def _experiment_config(subcommand: str, settings: dict[str, Any]) -> ExperimentConfig:
    dataset = settings.get("dataset", DatasetName.MNIST)
    default_arch = SYNTHETIC_ARCH if dataset is DatasetName.SYNTHETIC_XOR else DEFAULT_ARCH
    config_fields = {
        "arch", "rule", "angle", "learning_rate", "batch_size", "weight_scale", "weight_mode",
        "feedback_distribution", "seed", "cadence", "dataset", "data_dir",
    }
    values = {k: v for k, v in settings.items() if k in config_fields}
    values.setdefault("arch", default_arch)
    values["epochs"] = settings.get("epochs", DEFAULT_EPOCHS[subcommand])
    return ExperimentConfig(**values).validate()


def parse_args(argv: Sequence[str]) -> CliInvocation:
    """Parse and validate; usage errors exit with code 2."""
    parser = build_parser()
    args = parser.parse_args(list(argv))
    out_default = Path(os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    if args.subcommand == "gradcheck":
        return CliInvocation("gradcheck", None, out_default, verbose=args.verbose)

    try:
        file_values = read_config_file(args.config) if args.config else {}
        settings = _merge(args, file_values)
        config = _experiment_config(args.subcommand, settings)
    except ValueError as e:
        parser.error(str(e))

    if args.subcommand == "sweep-angle" and not settings.get("angles"):
        parser.error("sweep-angle needs --angles (or an 'angles' config key)")
    angles = settings.get("angles", ())
    if len(set(angles)) != len(angles):
        parser.error(f"angles must be distinct, got {list(angles)}")
    return CliInvocation(
        subcommand=args.subcommand,
        config=config,
        out_dir=Path(settings.get("out") or out_default),
        jobs=settings.get("jobs", 1),
        fmt=settings.get("fmt", "csv"),
        swap_step=settings.get("swap_step", DEFAULT_SWAP_STEP),
        direction=settings.get("direction", SwapDirection.FA_TO_BP),
        scales=settings.get("scales", DEFAULT_SCALE_GRID),
        angles=angles,
        repetitions=settings.get("repetitions", DEFAULT_ANGLE_REPETITIONS if args.subcommand == "sweep-angle" else 1),
        updates=settings.get("updates"),
        verbose=args.verbose,
    )


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _run_name(config: ExperimentConfig, *parts: Any) -> str:
    return "-".join(str(p) for p in parts + (f"seed{config.seed}",))


def _train(inv: CliInvocation) -> int:
    config = inv.config
    name = _run_name(config, "train", config.rule.value, config.dataset.value)
    write_run(train(config), inv.out_dir, name, inv.fmt)
    return EXIT_OK


def _swap(inv: CliInvocation) -> int:
    result = swap_experiment(inv.config, inv.swap_step, inv.direction)
    prefix = f"swap-{inv.direction.value}"
    write_run(result.fa, inv.out_dir, _run_name(inv.config, prefix, "fa"), inv.fmt)
    write_run(result.bp, inv.out_dir, _run_name(inv.config, prefix, "bp"), inv.fmt)
    write_rows(inv.out_dir / f"{_run_name(inv.config, prefix)}-summary.csv", [{
        "direction": inv.direction.value,
        "swap_step": result.swap_step,
        "pre_swap_accuracy": result.pre_swap_accuracy,
        "fa_final_accuracy": result.fa.final_accuracy,
        "bp_final_accuracy": result.bp.final_accuracy,
    }])
    return EXIT_OK


def _sweep_init(inv: CliInvocation) -> int:
    results = init_scale_sweep(inv.config, inv.scales, repetitions=inv.repetitions, jobs=inv.jobs)
    for result in results:
        name = _run_name(result.config, "sweep-init", result.config.rule.value, f"scale{result.config.weight_scale}")
        write_run(result, inv.out_dir, name, inv.fmt)
    write_rows(inv.out_dir / f"{_run_name(inv.config, 'sweep-init')}-summary.csv", scale_sweep_summary(results))
    return EXIT_OK


def _sweep_angle(inv: CliInvocation) -> int:
    sweep = angle_sweep(inv.config, inv.angles, epochs=inv.config.epochs, repetitions=inv.repetitions,
                        updates=inv.updates, jobs=inv.jobs)
    write_rows(inv.out_dir / f"{_run_name(inv.config, 'sweep-angle')}-summary.csv", sweep.summary())
    pairs = matched_perturbation_comparison(
        inv.config, updates=inv.updates or DEFAULT_MATCHED_UPDATES, repetitions=inv.repetitions, jobs=inv.jobs
    )
    rows = []
    for pair in pairs:
        row = {"seed": pair.seed, "fa_accuracy": pair.fa_accuracy, "perturbed_accuracy": pair.perturbed_accuracy}
        row.update({f"alignment_l{l}": a for l, a in enumerate(pair.layer_alignment, start=1)})
        rows.append(row)
    write_rows(inv.out_dir / f"{_run_name(inv.config, 'sweep-angle')}-matched.csv", rows)
    return EXIT_OK


def _forcing(inv: CliInvocation) -> int:
    results = alignment_forcing_experiment(inv.config, epochs=inv.config.epochs, jobs=inv.jobs)
    for mode, result in results.items():
        write_run(result, inv.out_dir, _run_name(inv.config, "forcing", mode.value), inv.fmt)
    return EXIT_OK


def _gradcheck(inv: CliInvocation) -> int:
    error = finite_difference_check()
    passed = error < GRADCHECK_TOLERANCE
    print(f"max relative error {error:.3e} ({'ok' if passed else 'FAILED'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if passed else EXIT_FAILURE


HANDLERS: dict[str, Callable[[CliInvocation], int]] = {
    "train": _train,
    "swap": _swap,
    "sweep-init": _sweep_init,
    "sweep-angle": _sweep_angle,
    "forcing": _forcing,
    "gradcheck": _gradcheck,
}


def run(invocation: CliInvocation) -> int:
    try:
        return HANDLERS[invocation.subcommand](invocation)
    except (ValueError, ArithmeticError, OSError, RuntimeError) as e:
        logger.error(f"{invocation.subcommand} failed: {e}")
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        invocation = parse_args(argv if argv is not None else sys.argv[1:])
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    configure_logging(invocation.verbose)
    return run(invocation)
