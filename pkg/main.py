import argparse
import logging
import os
import sys
import time
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from ris_flow.errors import ConfigError, NumericError, OracleFailure
from ris_flow.experiments import COMMANDS
from ris_flow.models import EXPERIMENT_KINDS, POLICIES, ExperimentSpec
from utils import log_to_run_file, new_run_id, run_log_path

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class CustomFormatter(logging.Formatter):
    """Custom formatter that adds emojis based on log level."""
    def format(self, record):
        if not hasattr(record, 'emoji'):
            record.emoji = ''
        return super().format(record)


def setup_logging(verbose: bool = False) -> None:
    """Install exactly one console handler on the root logger."""
    root = logging.getLogger()
    for handler in root.handlers[:]:
        if isinstance(handler.formatter, CustomFormatter):
            root.removeHandler(handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(CustomFormatter('%(asctime)s - %(emoji)s %(message)s', '%H:%M:%S'))
    root.addHandler(console_handler)

    root.setLevel(logging.DEBUG if verbose else logging.INFO)


class RunState:
    """Manages state for one command-line run."""
    def __init__(self, kind: str):
        self.kind = kind
        self.run_id: Optional[str] = None
        self.started = time.time()
        self.stage_times: Dict[str, float] = {}
        self.outputs: List[str] = []
        self.exit_code = EXIT_OK


def log_run_status(state: RunState, status: str, message: str) -> None:
    """Log status and message to the run CSV file and console.

    Args:
        state: The run state object.
        status: The current status of the run.
        message: The message to log.
    """
    if not state.run_id:
        state.run_id = new_run_id()
    log_to_run_file(state.run_id, status, message)

    status_emoji = {
        "initialize": "🚀",
        "config": "⚙️",
        "optimizing": "🧮",
        "simulating": "🔁",
        "saving": "💾",
        "validating": "🔬",
        "completed": "✅",
        "error": "❌",
        "info": "ℹ️",
        "metrics": "📊"
    }

    emoji = status_emoji.get(status, "")
    if status == "error":
        logger.error(message, extra={'emoji': emoji})
    else:
        logger.info(message, extra={'emoji': emoji})


def log_final_metrics(state: RunState) -> None:
    """Log a summary of the run: wall time per stage and files written."""
    total = time.time() - state.started
    lines = [
        "=" * 70,
        f"📊 Run summary ({state.kind}):",
        f"   ├─ Run ID:        {state.run_id}",
    ]
    for stage, seconds in state.stage_times.items():
        lines.append(f"   ├─ {stage + ':':<14} {seconds:.2f} s")
    lines += [
        f"   ├─ Files written: {len(state.outputs)}",
        f"   ├─ Exit code:     {state.exit_code}",
        f"   └─ Wall time:     {total:.2f} s",
        "=" * 70,
    ]
    for line in lines:
        logger.info(line)
        log_to_run_file(state.run_id, "metrics", line)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='ris-flow',
        description='Flow-level stability of RIS-assisted cell-free uplinks: phase design, simulation and checks.',
    )
    subparsers = parser.add_subparsers(dest='kind', required=True)
    for kind in EXPERIMENT_KINDS:
        sub = subparsers.add_parser(kind)
        sub.add_argument('--config', help='TOML scenario file')
        sub.add_argument('--seed', type=int, help='Root seed of the run')
        sub.add_argument('--out', help='Output directory (default: $RIS_OUTPUT_DIR or results)')
        sub.add_argument('--policy', choices=POLICIES, help='Service policy for simulate')
        sub.add_argument('--slots', type=int, help='Number of simulated slots')
        sub.add_argument('--profile', help='Configuration profile: desk or paper (default: $RIS_PROFILE or desk)')
        sub.add_argument('--paper-scale', action='store_true', help='Shortcut for --profile paper (long-running)')
        sub.add_argument('--budget', choices=('full', 'reduced'), help='Sample budget for validate')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                         help='Override one configuration value, may be repeated')
        sub.add_argument('--verbose', action='store_true', help='Debug logging')
    return parser


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    profile = 'paper' if args.paper_scale else (args.profile or os.getenv('RIS_PROFILE', 'desk'))
    return ExperimentSpec(
        kind=args.kind,
        config_path=args.config,
        policy=args.policy,
        output_dir=args.out or os.getenv('RIS_OUTPUT_DIR', 'results'),
        seed=args.seed,
        slots=args.slots,
        profile=profile,
        budget=args.budget,
        overrides=args.overrides,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Parse the command line, run one experiment and map the outcome to an exit code.

    Returns:
        int: 0 on success, 1 on configuration errors, 2 on numeric or oracle failures.
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    state = RunState(args.kind)
    state.run_id = new_run_id()

    log_run_status(state, "initialize", f"Starting '{args.kind}' run {state.run_id}")
    log_run_status(state, "info", f"Run log: {run_log_path(state.run_id)}")

    try:
        spec = spec_from_args(args)
        log_run_status(state, "config", f"Profile: {spec.profile}, scenario file: {spec.config_path or '(defaults)'}")
        if spec.overrides:
            log_run_status(state, "config", f"Overrides: {', '.join(spec.overrides)}")

        start = time.time()
        result = COMMANDS[spec.kind](spec, state.run_id)
        state.stage_times[spec.kind] = time.time() - start
        state.outputs = result.get('paths', [])
        for path in state.outputs:
            log_run_status(state, "saving", f"Saved {path}")
        log_run_status(state, "completed", f"'{spec.kind}' finished")
    except (ConfigError, ValidationError) as e:
        state.exit_code = EXIT_CONFIG
        log_run_status(state, "error", f"Configuration error: {e}")
    except (NumericError, OracleFailure) as e:
        state.exit_code = EXIT_NUMERIC
        log_run_status(state, "error", f"{type(e).__name__}: {e}")
    except Exception as e:
        state.exit_code = EXIT_NUMERIC
        logger.exception(f"❌ Unexpected error: {e}")
        log_to_run_file(state.run_id, "error", f"Unexpected error: {e}")

    log_final_metrics(state)
    return state.exit_code


if __name__ == "__main__":
    sys.exit(main())
