"""Command-line front end.

  sahc synth    --spec spec.txt --out data/ [--seed N]
  sahc train    --config run.cfg --data data/ --out runs/a [--seed N]
                [--resume ckpt] [--set sec.key=value ...]
  sahc eval     --checkpoint ckpt --data data/ --split test [--report dir]
                [--online] [--seed N]
  sahc predict  --checkpoint ckpt --input video.sfb [--ribbon prefix]

Exit codes: 0 success, 2 usage/config error, 3 data or compatibility error,
4 numeric failure. SAHC_THREADS caps evaluation worker threads.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import load_run_config, load_synth_spec
from .data import (DataError, generate_synthetic, load_dataset, read_sfb,
                   write_dataset)
from .evaluation import (CausalityViolation, dataset_metrics, format_report,
                         online_evaluate, report_kv, ribbon_export,
                         video_metrics)
from .losses import LossConfig
from .model import ConfigError, ModelError, StreamState, forward, stream_step
from .tensor import AutodiffError
from .training import (CheckpointError, TrainingDiverged, load_checkpoint,
                       params_from_checkpoint, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _workers() -> int:
    raw = os.environ.get("SAHC_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"SAHC_THREADS must be an integer, got {raw!r}")
    return min(4, os.cpu_count() or 1)


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    splits, _ = generate_synthetic(spec, seed=args.seed)
    write_dataset(args.out, splits)
    n = sum(len(splits.split(s)) for s in ("train", "val", "test"))
    frames = sum(seq.t for s in ("train", "val", "test") for seq in splits.split(s))
    print(f"wrote {n} videos ({frames} frames) to {args.out} "
          f"[train={len(splits.train)} val={len(splits.val)} test={len(splits.test)}]")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, overrides=args.set or [])
    if args.seed is not None:
        cfg.train.seed = args.seed
    data = load_dataset(args.data)
    if data.manifest.d_in != cfg.model.d_in:
        raise DataError(f"dataset D_in={data.manifest.d_in} but model expects "
                        f"D_in={cfg.model.d_in}")
    if data.manifest.c != cfg.model.c:
        raise DataError(f"dataset C={data.manifest.c} but model expects C={cfg.model.c}")
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(cfg.model, cfg.loss, cfg.train, data.train, data.val,
                   out_dir=args.out, resume=resume,
                   log=None if args.quiet else print)
    print(f"best epoch {result.best_epoch} "
          f"(val accuracy {result.best_val_accuracy:.4f}); "
          f"checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params, config = params_from_checkpoint(ckpt)
    data = load_dataset(args.data)
    if data.manifest.d_in != config.d_in or data.manifest.c != config.c:
        raise DataError(f"dataset (C={data.manifest.c}, D_in={data.manifest.d_in}) "
                        f"incompatible with checkpoint (C={config.c}, D_in={config.d_in})")
    videos = data.split(args.split)
    if not videos:
        raise DataError(f"split {args.split!r} is empty")

    rows = [None] * len(videos)
    if args.online:
        for i, seq in enumerate(videos):
            res = online_evaluate(seq, params, config, n_probe=args.probes,
                                  seed=args.seed)
            rows[i] = res.metrics
            print(f"{seq.video_id}: CERTIFICATE PASS "
                  f"(probed {len(res.certificate.tested_timesteps)} timesteps)")
    else:
        import warnings

        def score(i_seq):
            i, seq = i_seq
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = forward(seq.features, params, config, mode="eval")
            pred = np.argmax(out.frame_logits.data, axis=1)
            return i, video_metrics(pred, seq.labels, config.c, video_id=seq.video_id)

        with ThreadPoolExecutor(max_workers=_workers()) as pool:
            for i, vm in pool.map(score, enumerate(videos)):
                rows[i] = vm

    report = dataset_metrics(rows)
    text = format_report(report)
    print(text, end="")
    if args.report:
        rd = Path(args.report)
        rd.mkdir(parents=True, exist_ok=True)
        (rd / "report.txt").write_text(text)
        (rd / "report.kv").write_text(report_kv(report))
        print(f"report written to {rd}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params, config = params_from_checkpoint(ckpt)
    seq = read_sfb(args.input)
    if seq.d_in != config.d_in:
        raise DataError(f"{seq.video_id}: D_in={seq.d_in} incompatible with "
                        f"checkpoint D_in={config.d_in}")
    state = StreamState()
    all_probs = []
    for t in range(seq.t):
        probs, state = stream_step(seq.features[t], state, params, config)
        cls = int(np.argmax(probs))
        print(f"{t},{cls},{probs[cls]:.6f}")
        all_probs.append(probs)
    if args.ribbon:
        probs = np.stack(all_probs, axis=0)
        pred = np.argmax(probs, axis=1)
        csv_path, svg_path = ribbon_export(args.ribbon, pred, seq.labels, probs)
        print(f"ribbon written to {csv_path} and {svg_path}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sahc",
                                description="surgical-phase recognition over "
                                            "precomputed frame features")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--spec", required=True)
    ps.add_argument("--out", required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(fn=cmd_synth)

    pt = sub.add_parser("train", help="train a model")
    pt.add_argument("--config", required=True)
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True)
    pt.add_argument("--seed", type=int, default=None)
    pt.add_argument("--resume", default=None)
    pt.add_argument("--set", action="append", metavar="SEC.KEY=VALUE")
    pt.add_argument("--quiet", action="store_true")
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", help="score a checkpoint on a split")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--split", default="test", choices=["train", "val", "test"])
    pe.add_argument("--report", default=None)
    pe.add_argument("--online", action="store_true",
                    help="stream frame-by-frame and run the causality certificate")
    pe.add_argument("--probes", type=int, default=20)
    pe.add_argument("--seed", type=int, default=0)
    pe.set_defaults(fn=cmd_eval)

    pp = sub.add_parser("predict", help="stream one video, print t,class,confidence")
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--input", required=True)
    pp.add_argument("--ribbon", default=None,
                    help="path prefix for ribbon .csv/.svg export")
    pp.set_defaults(fn=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ModelError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError, AutodiffError,
            CausalityViolation) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
