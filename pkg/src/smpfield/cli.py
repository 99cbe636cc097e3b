"""Command line entry point.

    smpfield run <config> [--out DIR] [--seed N] [--paths N] [--threads N]
    smpfield validate <config>
    smpfield list-problems

Exit codes: 0 pass (or the expected failures of an expect_fail config),
1 check failure, 2 configuration / simulation / solver error.
"""

import argparse
import os
import sys
from importlib import resources

from . import config, experiments, problems
from .errors import SmpError


def _resolve(path):
    """Accept a file path or the name of a shipped config."""
    if os.path.exists(path):
        return path
    shipped = resources.files("smpfield") / "configs" / f"{path}.toml"
    if shipped.is_file():
        return str(shipped)
    return path


def _parser():
    p = argparse.ArgumentParser(prog="smpfield", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (default: ./out/<name>)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--paths", type=int, default=None)
    r.add_argument("--threads", type=int, default=None)
    v = sub.add_parser("validate", help="check a config against the schema")
    v.add_argument("config")
    sub.add_parser("list-problems", help="list registered problems and shipped configs")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "list-problems":
            for name, doc in problems.describe().items():
                print(f"{name:18s} {doc}")
            shipped = sorted(f.name[:-5] for f in (resources.files("smpfield") / "configs").iterdir()
                             if f.name.endswith(".toml"))
            print("shipped configs: " + ", ".join(shipped))
            return 0
        cfg = config.load(_resolve(args.config))
        if args.command == "validate":
            print(f"{args.config}: valid ({cfg['name']}, checks {cfg['checks']['run']})")
            return 0
        cfg = experiments.apply_overrides(cfg, args.seed, args.paths, args.threads)
        report = experiments.run(cfg)
        out = args.out or os.path.join("out", cfg["name"])
        report.write(out)
        sys.stdout.write(report.text())
        print(f"written to {out}")
        return report.exit_code
    except SmpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return experiments.EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
