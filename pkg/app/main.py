import argparse
import logging
import sys
import time
from datetime import datetime, timezone
from typing import Dict, List, Optional

from models.errors import SDFlowError
from models.schemas import AblationAxis, AnalysisKind, GenerationMode, RunStatus
from services import registry_service
from services.config_service import code_version, log_level, resolve_config, update_manifest, write_manifest, write_resolved
from app.commands import COMMANDS, CommandContext

# Set up logger
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_ERROR = 2

# CLI flag (argparse dest) -> config key. Flags win over --set and the config file.
FLAG_KEYS = {
    "seed": "seed",
    "out": "out",
    "threads": "threads",
    "data": "data.source",
    "epochs": "vq.epochs",
    "train_steps": "flow.train_steps",
    "steps": "flow.ode_steps",
    "tau": "flow.tau_infer",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (env SDFLOW_THREADS)")
    common.add_argument("--log-level", default=None, help="overrides SDFLOW_LOG_LEVEL")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")

    parser = argparse.ArgumentParser(prog="sdflow", description="Two-stage discrete latent flow experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vqvae", parents=[common], help="train the Stage-1 tokenizer")
    p.add_argument("--data", help="'sines' or a CSV path")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-flow", parents=[common], help="train Stage 2 on a frozen tokenizer")
    p.add_argument("--stage1", required=True, help="Stage-1 checkpoint")
    p.add_argument("--data", help="'sines' or a CSV path")
    p.add_argument("--train-steps", type=int)

    p = sub.add_parser("generate", parents=[common], help="sample windows from a Stage-2 checkpoint")
    p.add_argument("--stage2", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=[m.value for m in GenerationMode], default=GenerationMode.FLOW.value)

    p = sub.add_parser("evaluate", parents=[common], help="DS, PS, LFD and NN audit")
    p.add_argument("--checkpoint", required=True, help="Stage-1 or Stage-2 checkpoint (frozen encoder)")
    p.add_argument("--synthetic", required=True, help="window-id CSV of generated windows")
    p.add_argument("--real", help="window-id CSV or raw CSV; defaults to the configured dataset")

    p = sub.add_parser("analyze", parents=[common], help="geometry experiments")
    p.add_argument("which", choices=[k.value for k in AnalysisKind])
    p.add_argument("--stage2", help="required for spectrum")
    p.add_argument("--plot", action="store_true", help="also write HTML figures")

    p = sub.add_parser("forecast", parents=[common], help="complete windows from their first half")
    p.add_argument("--stage2", required=True)
    p.add_argument("--history", required=True, help="window-id CSV of first halves")
    p.add_argument("--draws", type=int, default=1, help="> 1 adds 10/90 percentile bands")
    p.add_argument("--truth", help="window-id CSV of full windows for MAE and coverage")
    p.add_argument("--tau", type=float)
    p.add_argument("--steps", type=int)

    p = sub.add_parser("ablate", parents=[common], help="one ablation axis, mean and std over seeds")
    p.add_argument("axis", choices=[a.value for a in AblationAxis])
    p.add_argument("--stage1", help="reuse a Stage-1 checkpoint instead of training one")
    p.add_argument("--data", help="'sines' or a CSV path")
    p.add_argument("--train-steps", type=int)
    p.add_argument("--plot", action="store_true", help="also write an HTML figure")
    return parser


def cli_overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {key: getattr(args, dest) for dest, key in FLAG_KEYS.items() if getattr(args, dest, None) is not None}


def configure_logging(level: Optional[str] = None):
    logging.basicConfig(level=getattr(logging, (level or log_level()).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    command = args.command
    run_id = None
    started = time.perf_counter()
    try:
        resolved = resolve_config(args.config, args.set, cli_overrides(args))
        out_dir = resolved.config.out
        write_resolved(out_dir, resolved)
        write_manifest(out_dir, command, resolved, extra={"args": {k: v for k, v in vars(args).items()
                                                                   if k not in ("set",)}})
        run_id = registry_service.start_run(command, resolved.config.seed, resolved.hash, code_version(), out_dir)
        logger.info(f"Starting {command} (seed {resolved.config.seed}, out {out_dir})")

        ctx = CommandContext(resolved=resolved, args=args, plot=getattr(args, "plot", False))
        result = COMMANDS[command](ctx)

        exit_code = EXIT_OK if result.passed else EXIT_CHECKS_FAILED
        update_manifest(out_dir, finished_at=datetime.now(timezone.utc).isoformat(),
                        wall_clock_seconds=round(time.perf_counter() - started, 3), checks=result.checks,
                        metrics=result.metrics, outputs=result.outputs, exit_code=exit_code)
        registry_service.record_metrics(run_id, result.metrics)
        registry_service.finish_run(run_id, RunStatus.SUCCEEDED if result.passed else RunStatus.CHECKS_FAILED,
                                    exit_code)
        for name, ok in result.checks.items():
            (logger.info if ok else logger.error)(f"check {name}: {'pass' if ok else 'FAIL'}")
        logger.info(f"Finished {command} with exit code {exit_code}")
        return exit_code
    except SDFlowError as e:
        logger.error(f"{command} failed: {str(e)}")
        print(f"sdflow {command}: {type(e).__name__}: {e}", file=sys.stderr)
        registry_service.finish_run(run_id, RunStatus.ERROR, EXIT_ERROR)
        return EXIT_ERROR


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
