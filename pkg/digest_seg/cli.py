import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .ablation import (
    build_datasets,
    evaluate_checkpoint,
    load_splits,
    prepare_data,
    run_ablation,
)
from .config import SCALES, ConfigError, ExperimentConfig, build_experiment
from .evaluation import emit_report, plot_table, read_report
from .logger_config import get_cli_logger, log_error, log_info, log_success
from .training import pretrain_teacher, train_student

logger = get_cli_logger()

COMMANDS = ("gen-data", "pretrain-teacher", "train-student", "evaluate", "ablate", "report")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# * --out defaults per command; `report` writes next to its input
DEFAULT_OUT = {
    "gen-data": Path("data"),
    "pretrain-teacher": Path("runs/teacher"),
    "train-student": Path("runs/student"),
    "evaluate": Path("runs/report"),
    "ablate": Path("runs/ablation"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value experiment config file")
    common.add_argument("--out", type=Path, help="output directory (overwritten)")
    common.add_argument("--seed", type=int, default=0, help="top-level seed for every random choice")
    common.add_argument("--scale", choices=SCALES, default="desk", help="configuration preset")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field, e.g. epochs=5 or network.base_width=16",
    )

    parser = argparse.ArgumentParser(
        prog="digest_seg",
        description="Teacher-student distillation for missing-modality 3D segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    gen = sub.add_parser("gen-data", parents=[common], help="render a synthetic phantom dataset")
    gen.add_argument("--cases", type=int, help="number of phantom cases")

    teacher = sub.add_parser("pretrain-teacher", parents=[common], help="train the teacher on complete inputs")
    teacher.add_argument("--data", type=Path, default=Path("data"))

    student = sub.add_parser("train-student", parents=[common], help="distill a student on masked inputs")
    student.add_argument("--data", type=Path, default=Path("data"))
    student.add_argument("--teacher", type=Path, default=Path("runs/teacher/best.pt"))

    evaluate = sub.add_parser("evaluate", parents=[common], help="Dice over the 15 modality subsets")
    evaluate.add_argument("--data", type=Path, default=Path("data"))
    evaluate.add_argument("--checkpoint", type=Path, default=Path("runs/student/best.pt"))
    evaluate.add_argument("--plot", action="store_true", help="also write a bar chart")

    ablate = sub.add_parser("ablate", parents=[common], help="run the three ablation configurations")
    ablate.add_argument("--data", type=Path, help="reuse an existing dataset instead of generating one")

    report = sub.add_parser("report", parents=[common], help="re-render a machine-readable Dice table")
    report.add_argument("--input", type=Path, default=Path("runs/report/dice_table.csv"))
    report.add_argument("--plot", action="store_true")

    return parser


# ----- Commands -----------------------------------------------------------------------


def _gen_data(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    if args.cases is not None:
        if args.cases < 1:
            raise ConfigError(f"--cases must be >= 1, got {args.cases}")
        exp.data.num_cases = args.cases
    train, val, test = prepare_data(exp, args.out)
    log_success(logger, f"Dataset ready in {args.out}: {len(train)}/{len(val)}/{len(test)} train/val/test")


def _pretrain_teacher(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    train_set, val_set, _ = build_datasets(exp, load_splits(exp, args.data))
    result = pretrain_teacher(train_set, val_set, exp.network, exp.train.for_phase("teacher"), args.out)
    log_success(logger, f"Teacher checkpoint: {result.checkpoint}")


def _train_student(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    train_set, val_set, _ = build_datasets(exp, load_splits(exp, args.data))
    result = train_student(
        train_set, val_set, args.teacher, exp.network, exp.train.for_phase("student"), args.out
    )
    log_success(logger, f"Student checkpoint: {result.checkpoint}")


def _evaluate(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    _, _, test_set = build_datasets(exp, load_splits(exp, args.data))
    table = evaluate_checkpoint(args.checkpoint, test_set, exp)
    paths = emit_report(table, args.out, plot=args.plot)
    log_success(logger, f"Report: {paths['csv']}")


def _ablate(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    splits = load_splits(exp, args.data) if args.data is not None else None
    run = run_ablation(exp, args.out, splits=splits)
    log_success(logger, f"Ablation report: {run.reports['ablation_text']}")


def _report(args: argparse.Namespace, exp: ExperimentConfig) -> None:
    table = read_report(args.input)
    out_dir = args.out or args.input.parent
    paths = emit_report(table, out_dir)
    if args.plot:
        plot_table(table, Path(out_dir) / "dice_table.png")
    sys.stdout.write(paths["text"].read_text(encoding="utf-8"))


HANDLERS: Dict[str, Callable[[argparse.Namespace, ExperimentConfig], None]] = {
    "gen-data": _gen_data,
    "pretrain-teacher": _pretrain_teacher,
    "train-student": _train_student,
    "evaluate": _evaluate,
    "ablate": _ablate,
    "report": _report,
}


def run(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and dispatch to a command.

    Returns:
        0 on success, 1 on configuration or runtime failure, 2 on usage errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.out is None:
        args.out = DEFAULT_OUT.get(args.command)

    try:
        exp = build_experiment(args.scale, args.seed, args.config, args.overrides)
        log_info(logger, f"{args.command}: scale={exp.scale} seed={exp.seed}")
        HANDLERS[args.command](args, exp)
    except ConfigError as e:
        sys.stderr.write(f"config error: {e}\n")
        return EXIT_FAILURE
    except Exception as e:
        log_error(logger, e, f"{args.command} failed")
        sys.stderr.write(f"error: {e}\n")
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
