"""Command line: ``bridgekit <subcommand> --run DIR [options]``.

Exit codes: 0 success, 2 configuration error (including fingerprint
mismatches), 3 stage-ordering error, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline as P
from .config import ConfigError
from .grid import GridFormatError
from .vqvae import StageError

EXIT_OK, EXIT_CONFIG, EXIT_ORDER, EXIT_IO = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run", required=True, help="run directory")
    common.add_argument("--config", help="JSON config (defaults to the run's saved config.json)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dot path, e.g. train.bridge_steps=200")
    common.add_argument("--force", action="store_true", help="accept artifacts with a different fingerprint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bridgekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="write the synthetic corpus")
    gen.add_argument("--views", help="comma-separated view list, e.g. front,top,left")

    vq = sub.add_parser("train-vqvae", parents=[common], help="train VQ-VAE stage 1 or 2")
    vq.add_argument("--stage", type=int, choices=(1, 2), required=True)
    vq.add_argument("--until", type=int, help="stop (resumably) after this many total steps")

    br = sub.add_parser("train-bridge", parents=[common], help="train the latent bridge denoiser")
    br.add_argument("--until", type=int, help="stop (resumably) after this many total steps")

    comp = sub.add_parser("complete", parents=[common], help="sample completions")
    comp.add_argument("--seed", type=int, help="sampling seed (default: config seed)")
    comp.add_argument("--deterministic", action="store_true", default=None,
                      help="zero the sampler noise between reverse steps")
    comp.add_argument("--input", nargs="+", help="partial SDF grid files (default: the corpus)")
    comp.add_argument("--out", help="output directory (default: RUN/completions)")

    ev = sub.add_parser("eval", parents=[common], help="score completions and the copy-partial baseline")
    ev.add_argument("--no-figures", action="store_true")

    mesh = sub.add_parser("mesh", parents=[common], help="export OBJ meshes")
    mesh.add_argument("--input", nargs="+", help="grid files (default: RUN/completions/*.vgrd)")
    mesh.add_argument("--out", help="output directory (default: RUN/meshes)")
    return parser


def _dispatch(args) -> object:
    overrides = list(args.overrides)
    if args.command == "gen":
        if args.views:
            overrides.append("vqvae.views=" + json.dumps(args.views.split(",")))
        run = P.open_run(args.run, args.config, overrides, args.force, create=True)
        with P.run_lock(run.root):
            return str(P.generate(run))
    run = P.open_run(args.run, args.config, overrides, args.force)
    with P.run_lock(run.root):
        if args.command == "train-vqvae":
            return P.train_vqvae(run, args.stage, args.until)
        if args.command == "train-bridge":
            return P.train_bridge(run, args.until)
        if args.command == "complete":
            return [str(p) for p in P.complete(run, args.seed, args.deterministic, args.input, args.out)]
        if args.command == "eval":
            report, baseline = P.evaluate(run, figures=not args.no_figures)
            return {"bridge": report.means, "copy_partial": baseline.means}
        if args.command == "mesh":
            return [str(p) for p in P.export_meshes(run, args.input, args.out)]
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _dispatch(args)
    except (ConfigError, P.FingerprintError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.StageOrderError, StageError) as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except (OSError, GridFormatError, P.LockedError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
