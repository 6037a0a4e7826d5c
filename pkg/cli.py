import argparse
import logging
import sys
from enum import Enum

from experiment import STAGES, ConfigError, StageError, config_leaves, load_config, run_experiment

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Command(Enum):
    SYNTH = "synth"
    INGEST = "ingest"
    PATCHIFY = "patchify"
    TRAIN = "train"
    EVALUATE = "evaluate"
    EXPLAIN = "explain"
    RENDER = "render"
    REPORT = "report"
    RUN = "run"

    @property
    def stage(self):
        if self in (Command.SYNTH, Command.INGEST):
            return "data"
        if self is Command.RUN:
            return STAGES[-1]
        return self.value


def parse_command(value):
    try:
        return Command(value.lower())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"Invalid command: {value}") from exc


def add_config_flags(parser):
    """Adds one --<section>.<field> flag per config leaf; unset flags leave the file's value."""
    group = parser.add_argument_group("config overrides")
    for dotted, f, default in config_leaves():
        flag = "--" + dotted.replace("_", "-")
        group.add_argument(flag, dest=f"override:{dotted}", default=argparse.SUPPRESS, metavar="VALUE", help=f"default: {default!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        description="Train patient/control classifiers on IMC stacks and explain them.",
        epilog="Example usage: python cli.py run --config configs/desk.yaml --training.max-epochs 30",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in Command:
        sub = subparsers.add_parser(command.value, help=f"run the pipeline through the {command.stage} stage")
        sub.add_argument("--config", default=None, help="run config YAML")
        sub.add_argument("--verbose", action="store_true", help="log at DEBUG level")
        sub.add_argument(
            "--check-gradients",
            action="store_true",
            help="compare gradient maps against finite differences during explain",
        )
        add_config_flags(sub)
    mapping = subparsers.add_parser("mapping", help="write a channel-map YAML for a stack file")
    mapping.add_argument("stack")
    mapping.add_argument("--output", default=None)
    mapping.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)

    if args.command == "mapping":
        from create_mapping import build_mapping

        try:
            _, text = build_mapping(args.stack, args.output)
        except Exception as e:
            logger.error("%s", e)
            return 1
        if args.output is None:
            print(text, end="")
        return 0

    command = parse_command(args.command)
    overrides = {key.split(":", 1)[1]: value for key, value in vars(args).items() if key.startswith("override:")}
    if args.check_gradients:
        overrides["explanation.check_gradients"] = True
    try:
        config = load_config(args.config, overrides)
        if command in (Command.SYNTH, Command.INGEST) and config.data.source != (
            "synthetic" if command is Command.SYNTH else "ingest"
        ):
            raise ConfigError(f"'{command.value}' does not match data.source = {config.data.source!r}")
    except ConfigError as e:
        logger.error("Invalid config: %s", e)
        return 2
    try:
        manifest = run_experiment(config, until=command.stage)
    except StageError as e:
        logger.error("%s", e)
        return 1
    logger.info("Run directory %s (manifest %s)", config.output_dir, manifest.path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
