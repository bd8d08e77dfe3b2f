"""Command-line front end.

  feature-export export --input clip.mp4 --labels clip.csv --out clip.sfb
                        [--rate 5] [--src-fps F] [--encoder resnet50]
                        [--weights auto|none|PATH] [--batch 16] [--jobs N]
  feature-export verify file.sfb [more.sfb ...]

export accepts --input/--labels/--out triples repeated in lockstep; multiple
videos are encoded in parallel (one writer per output file, the encoder is
shared). verify exits nonzero if any file fails.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor

from .encoder import EncoderError, load_encoder
from .export import ExportError, ExportSpec, export_video
from .sfbio import verify_sfb

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="feature-export",
        description="frozen-encoder frame features to .sfb sequence files")
    sub = ap.add_subparsers(dest="cmd", required=True)

    ex = sub.add_parser("export", help="encode video(s) to .sfb")
    ex.add_argument("--input", action="append", required=True,
                    help="video file or directory of frame images (repeatable)")
    ex.add_argument("--labels", action="append", required=True,
                    help="label CSV for the matching --input (repeatable)")
    ex.add_argument("--out", action="append", required=True,
                    help=".sfb path for the matching --input (repeatable)")
    ex.add_argument("--rate", type=float, default=5.0,
                    help="target frames per second (default 5)")
    ex.add_argument("--src-fps", type=float, default=None,
                    help="source fps; required for frame directories, "
                         "overrides video metadata")
    ex.add_argument("--encoder", default="resnet50")
    ex.add_argument("--weights", default="auto",
                    help="auto | none | path to a state dict (default auto)")
    ex.add_argument("--batch", type=int, default=16)
    ex.add_argument("--seed", type=int, default=0,
                    help="init seed when running without pretrained weights")
    ex.add_argument("--jobs", type=int, default=1,
                    help="videos encoded in parallel (default 1)")
    ex.add_argument("--quiet", action="store_true")

    vf = sub.add_parser("verify", help="re-parse .sfb files and report")
    vf.add_argument("paths", nargs="+")
    return ap


def _cmd_export(args) -> int:
    if not (len(args.input) == len(args.labels) == len(args.out)):
        print(f"error: got {len(args.input)} --input, {len(args.labels)} "
              f"--labels, {len(args.out)} --out; counts must match",
              file=sys.stderr)
        return EXIT_USAGE
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    encoder = load_encoder(args.encoder, args.weights, args.seed)
    specs = [ExportSpec(input=i, labels=l, out=o, rate=args.rate,
                        src_fps=args.src_fps, encoder=args.encoder,
                        weights=args.weights, batch=args.batch, seed=args.seed)
             for i, l, o in zip(args.input, args.labels, args.out)]

    def run_one(spec: ExportSpec):
        return export_video(spec, encoder=encoder, log=log)

    if args.jobs > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_one, specs))
    else:
        results = [run_one(s) for s in specs]
    for r in results:
        source = "pretrained" if r.pretrained else "untrained (seeded)"
        print(f"{r.out}: T={r.t} D_in={r.d_in} C={r.c} "
              f"from {r.n_source} source frames, {source} {args.encoder}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    worst = EXIT_OK
    for p in args.paths:
        report = verify_sfb(p)
        print(report.summary())
        if not report.ok:
            worst = EXIT_DATA
    return worst


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "export":
            return _cmd_export(args)
        return _cmd_verify(args)
    except (ExportError, EncoderError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA if isinstance(e, ExportError) else EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
