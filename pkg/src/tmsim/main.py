import argparse
import logging
import os
import sys
from pathlib import Path

import dotenv

project_folder = Path(__file__).resolve().parent.parent.parent
sys.path.append(str(project_folder / "src"))

from tmsim.config import (
    ConfigValidationError,
    checked_engine_config,
    load_scenario,
    validate_config,
)
from tmsim.harness import ScenarioError, run_scenario
from tmsim.structures import Registry
from utils.utils import prettify_bytes, prettify_ns, setup_logger

logger = logging.getLogger("TMSIM")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmsim",
        description="Shared-memory switch buffer management simulator",
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )
    parser.add_argument(
        "--no-log-file",
        action="store_true",
        help="log to the console only",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario with its own policies")
    run.add_argument("scenario", help="scenario file or built-in name")
    run.add_argument("--output-root", type=Path, default=None)
    run.add_argument("--jobs", type=int, default=1)

    sub.add_parser("list-scenarios", help="list built-in scenarios")

    validate = sub.add_parser("validate", help="validate a scenario file")
    validate.add_argument("scenario")

    sweep = sub.add_parser("sweep", help="run a policy x load x seed sweep")
    sweep.add_argument("scenario")
    sweep.add_argument(
        "--policies",
        nargs="+",
        required=True,
        help="policy tokens such as dt:1 occamy:8 pushout static:64",
    )
    sweep.add_argument("--seeds", nargs="+", type=int, default=None)
    sweep.add_argument(
        "--loads",
        nargs="+",
        type=float,
        default=None,
        help="background loads for poisson_flows generators that set one",
    )
    sweep.add_argument("--output-root", type=Path, default=None)
    sweep.add_argument("--jobs", type=int, default=1)
    return parser


def list_scenarios(registry: Registry) -> None:
    for path in registry.scenario_files():
        try:
            spec, _ = load_scenario(path)
            config = checked_engine_config(spec)
        except ConfigValidationError as e:
            print(f"{path.stem:<16} INVALID: {e}")
            continue
        buffer = config.buffer_cells * config.geometry.cell_size_bytes
        print(
            f"{spec.name:<16} B={prettify_bytes(buffer):<12} "
            f"T={prettify_ns(config.sim_duration):<12} {spec.description}"
        )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    dotenv.load_dotenv(project_folder / ".env")
    registry = Registry(project_folder)
    setup_logger(
        log_folder=None if args.no_log_file else registry.log_folder,
        level=getattr(logging, args.log_level),
    )

    try:
        match args.command:
            case "list-scenarios":
                list_scenarios(registry)
            case "validate":
                path = registry.find_scenario(args.scenario)
                config, workload = validate_config(path)
                print(
                    f"{path.name}: OK, B={config.buffer_cells} cells, "
                    f"{len(config.ports)} ports, "
                    f"{len(workload.generators)} generators, "
                    f"policy={config.policy.label}"
                )
            case "run" | "sweep":
                path = registry.find_scenario(args.scenario)
                spec, text = load_scenario(path)
                output_root = args.output_root or registry.output_root
                results = run_scenario(
                    spec,
                    text,
                    output_root,
                    policies=getattr(args, "policies", None),
                    seeds=getattr(args, "seeds", None),
                    jobs=args.jobs,
                    loads=getattr(args, "loads", None),
                )
                for r in results:
                    print(
                        f"{r.policy:<24} seed={r.seed:<4} "
                        f"tail={r.tail_drops:<6} head={r.head_drops:<6} "
                        f"{r.run_dir}"
                    )
    except (ConfigValidationError, ScenarioError, FileNotFoundError) as e:
        logger.error(f"Validation failed: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception(f"Run failed: {e!r}")
        return EXIT_RUNTIME

    return EXIT_OK


if __name__ == "__main__":
    os.chdir(project_folder)
    sys.exit(main())
