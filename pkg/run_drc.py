# run_drc.py - Command Line Startup Script
#!/usr/bin/env python3
"""
Sinkhorn DR Control toolkit
Finite-horizon distributionally robust controllers synthesize करता है, sweeps और comparisons चलाता है
"""

import sys
import argparse
import logging
from pathlib import Path

# Add current directory to Python path
sys.path.append(str(Path(__file__).parent))

from error_handler import handle_cli_error, EXIT_CONFIG_ERROR


def setup_logging():
    """Logging setup: file + stdout"""
    import config

    logging.basicConfig(
        level=getattr(logging, str(config.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(config.LOG_FILE, encoding='utf-8'),
            logging.StreamHandler(sys.stdout)
        ]
    )


def check_requirements() -> bool:
    """Check if all required packages are installed"""
    required_packages = {
        'numpy': 'numpy', 'scipy': 'scipy', 'cvxpy': 'cvxpy', 'ot': 'POT',
        'pandas': 'pandas', 'psutil': 'psutil', 'dotenv': 'python-dotenv'
    }

    missing_packages = []
    for module, package in required_packages.items():
        try:
            __import__(module)
        except ImportError:
            missing_packages.append(package)

    if missing_packages:
        print(f"Missing packages: {', '.join(missing_packages)}")
        print("Install करें: pip install -r requirements.txt")
        return False

    return True


def check_config() -> bool:
    """Environment settings sanity check"""
    import config
    from backends import BACKENDS

    problems = []
    if config.BACKEND not in BACKENDS:
        problems.append(f"DRC_BACKEND={config.BACKEND} (choose from {', '.join(BACKENDS)})")
    if config.STRATEGY not in ("outer", "direct"):
        problems.append(f"DRC_STRATEGY={config.STRATEGY}")
    if config.JOBS < 1:
        problems.append(f"DRC_JOBS={config.JOBS}")

    if problems:
        print(f"Invalid configuration: {'; '.join(problems)}")
        return False
    return True


def create_directories():
    """Create required directories"""
    import config

    Path(config.OUTPUT_DIR).mkdir(parents=True, exist_ok=True)


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run_drc", description="Sinkhorn distributionally robust control")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--strategy", choices=("outer", "direct"))
    common.add_argument("--backend", help="conic backend, e.g. CLARABEL or SCS")
    common.add_argument("--jobs", type=int, help="worker processes for sweep/compare")
    common.add_argument("--x0", type=_floats, help="fixed initial state, comma separated")

    commands = parser.add_subparsers(dest="command", required=True)
    synthesize = commands.add_parser("synthesize", parents=[common], help="one (rho, eps) controller")
    synthesize.add_argument("--rho", type=float)
    synthesize.add_argument("--eps", type=float)
    commands.add_parser("sweep", parents=[common], help="worst-case cost over the rho x eps grid")
    commands.add_parser("compare", parents=[common], help="realized cost across replications")
    commands.add_parser("feasibility", parents=[common], help="rho_min per eps, checked numerically")
    generate = commands.add_parser("gen-samples", parents=[common], help="write a samples CSV")
    generate.add_argument("--n", type=int)
    rollout = commands.add_parser("rollout", parents=[common], help="Monte-Carlo check of a controller")
    rollout.add_argument("--solution", help="directory with phi_x.csv and phi_u.csv")
    rollout.add_argument("--rho", type=float)
    rollout.add_argument("--eps", type=float)
    rollout.add_argument("--count", type=int)
    registry = commands.add_parser("registry", help="list registered runs, back up or prune the registry")
    registry.add_argument("--backup", action="store_true", help="copy the registry into DRC_BACKUP_PATH")
    registry.add_argument("--cleanup-days", type=int, help="delete runs older than this many days")
    registry.add_argument("--limit", type=int, help="how many recent runs to list")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    setup_logging()
    logger = logging.getLogger(__name__)

    if not check_requirements() or not check_config():
        return EXIT_CONFIG_ERROR
    create_directories()

    try:
        from drc_cli import ExperimentRunner

        logger.info(f"Running '{args.command}'")
        return ExperimentRunner(args).run(args.command)

    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 130

    except Exception as e:
        return handle_cli_error(e)


if __name__ == "__main__":
    sys.exit(main())
