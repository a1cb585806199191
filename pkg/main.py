import argparse
import logging
import sys

from app.controllers.experiment_controller import ExperimentController

COMMANDS = ("flow", "geodesic", "stability", "df", "bridge", "verify")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Geodesic-Einstein numerical lab")
    parser.add_argument("command", choices=COMMANDS, help="experiment to run")
    parser.add_argument("--config", default="config/experiment.json", help="experiment config (JSON)")
    parser.add_argument("--out", default=None, help="output directory, overrides output_dir")
    parser.add_argument("--seed", type=int, default=None, help="random seed, overrides the config")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return parser


if __name__ == "__main__":
    args = build_parser().parse_args()
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
    )

    # The controller takes care of everything
    controller = ExperimentController(
        config_path=args.config,
        output_dir=args.out,
        seed=args.seed,
    )
    sys.exit(controller.run(args.command))
