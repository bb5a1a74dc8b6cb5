"""
Command dispatcher:

    python3 cli.py generate|train|eval|gradcheck|inspect|ablate [flags]

Exit codes: 0 success, 1 runtime/data error, 2 usage error.
"""
import argparse
import sys
import traceback

from dotenv import load_dotenv

import af_ablate
import af_eval
import af_generate
import af_gradcheck
import af_inspect
import af_train
import utils


COMMANDS = {
    "generate": (af_generate, "generate the synthetic dataset"),
    "train": (af_train, "train a model and write a run directory"),
    "eval": (af_eval, "evaluate a model file on a dataset split"),
    "gradcheck": (af_gradcheck, "finite-difference gradient check"),
    "inspect": (af_inspect, "export attention maps, transforms and overlays"),
    "ablate": (af_ablate, "multi-seed variant sweep"),
}

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ArgumentParser(argparse.ArgumentParser):
    """
    argparse that raises instead of exiting, so main() owns the exit code
    """

    def error(self, message):
        raise utils.UsageError(message)


def build_parser():
    parser = ArgumentParser(prog="cli.py", description="Language-guided VQA with self-paced curriculum learning")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)

    subparsers = {}
    for name, (module, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        module.add_arguments(p)
        subparsers[name] = p

    return parser, subparsers


def parse(argv):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise utils.UsageError(f"a command is required: {', '.join(COMMANDS)}")

    if args.config:
        sub = subparsers[args.command]
        sub.set_defaults(**utils.load_config_defaults(args.config, sub))
        args = parser.parse_args(argv)

    return args


def main(argv=None):
    load_dotenv()
    argv = sys.argv[1:] if argv is None else list(argv)

    try:
        args = parse(argv)
    except utils.UsageError as e:
        print(f"[ERROR] usage: {e}")
        return EXIT_USAGE

    module = COMMANDS[args.command][0]
    try:
        code = module.run(args)
        return EXIT_OK if code is None else code

    except utils.UsageError as e:
        print(f"[ERROR] usage: {e}")
        return EXIT_USAGE

    except (ValueError, OSError) as e:
        print(f"[ERROR] {args.command} failed: {e}")
        return EXIT_RUNTIME

    except Exception as e:
        print(f"[ERROR] {args.command} failed: {e}")
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
