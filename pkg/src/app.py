import argparse
import sys

from src.controllers.processing_controller import ProcessingController
from src.services.synthetic_service import PRESETS
from src.utils.exceptions import AppError, NoSupportError
from src.logging_config import logger
from src import config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_SUPPORT = 2

# Flags with their own spelling; every other RunConfig key gets --key / --key-with-dashes
DETECT_FLAGS = {
    "input_dir": ("--input",),
    "output_dir": ("--output",),
    "gt_dir": ("--gt",),
    "fmatrices": ("--fmatrices",),
    "seed": ("--seed",),
    "threads": ("--threads",),
}


def flag_names(key: str) -> list[str]:
    names = list(DETECT_FLAGS.get(key, ()))
    for name in (f"--{key.replace('_', '-')}", f"--{key}"):
        if name not in names:
            names.append(name)
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.app", description=config.APP_DESCRIPTION)
    commands = parser.add_subparsers(dest="command", required=True)

    detect = commands.add_parser("detect", help="Compute dynamic probability maps for an image set.")
    for key in config.RunConfig.keys():
        if key == "debug_patches":
            detect.add_argument(*flag_names(key), dest=key, action="store_const", const="true", default=None,
                                help="Dump per-pair maps and patch outlines.")
        else:
            detect.add_argument(*flag_names(key), dest=key, default=None, metavar="VALUE")
    detect.add_argument("--config", dest="config_file", default=None, help="Flat key=value configuration file.")

    synth = commands.add_parser("synth", help="Render a synthetic image set with ground truth.")
    synth.add_argument("--preset", choices=PRESETS, default="basic")
    synth.add_argument("--output", required=True)
    synth.add_argument("--seed", type=int, default=config.SEED)
    synth.add_argument("--width", type=int, default=640)
    synth.add_argument("--height", type=int, default=480)
    synth.add_argument("--threads", type=int, default=config.THREADS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    controller = ProcessingController()
    try:
        if args.command == "synth":
            controller.synthesize(args.preset, args.output, seed=args.seed,
                                  width=args.width, height=args.height, threads=args.threads)
            return EXIT_OK

        overrides = {key: getattr(args, key) for key in config.RunConfig.keys()}
        run_config = config.RunConfig.from_sources(args.config_file, overrides)
        if not run_config.input_dir or not run_config.output_dir:
            raise AppError("Both an input directory and an output directory are required.")
        result = controller.run(run_config)
        for image_id, reason in result.skipped.items():
            print(f"skipped {image_id}: {reason}", file=sys.stderr)
        return EXIT_OK

    except NoSupportError as e:
        print(f"error: {e}", file=sys.stderr)
        for (a, b), reason in sorted(e.failures.items()):
            print(f"  {a} -> {b}: {reason}", file=sys.stderr)
        return EXIT_NO_SUPPORT
    except AppError as e:
        logger.error(f"CLI caught an application error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
