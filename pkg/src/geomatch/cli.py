"""Command-line front end.

Subcommands: gen-corpus, gen-data, train, eval, warp, match, ablate,
gradcheck.  Machine-readable results go to stdout as JSON; progress and
diagnostics go to stderr.  Every command that produces files also writes a
run manifest next to them recording the fully resolved configuration.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, GeomatchError, NumericalError
from .evaluation import evaluate_model, run_ablation, write_ablation_report
from .geometry import TransformParams
from .gradcheck import MODULES, run_gradcheck
from .model import (
    RegressorSpec,
    TrainConfig,
    forward_pipeline,
    load_checkpoint,
    save_checkpoint,
    train,
    two_stage_match,
)
from .synth import GenConfig, generate_corpus, generate_dataset, read_dataset
from .warp import load_image, render_alignment, save_image, warp_image

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage problems; the contract wants 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def write_run_manifest(path: Path, command: str, config: dict, seed, artifacts, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "tool_version": __version__,
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _apply_thread_cap() -> None:
    raw = os.environ.get("GEOMATCH_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise DataError(f"GEOMATCH_THREADS must be an integer, got {raw!r}")
    if cap < 0:
        raise DataError("GEOMATCH_THREADS must be >= 0 (0 = auto)")
    if cap > 0:
        import torch

        torch.set_num_threads(cap)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    paths = generate_corpus(out, args.count, args.size, args.seed)
    config = {"out": str(out), "count": args.count, "size": args.size, "seed": args.seed}
    write_run_manifest(out / "run_manifest.json", "gen-corpus", config, args.seed, paths, started)
    _emit({"command": "gen-corpus", "images": len(paths), "out": str(out)})
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    probe = load_image(sorted(Path(args.corpus).glob("*.png"))[0]) if list(Path(args.corpus).glob("*.png")) else None
    if probe is None:
        raise DataError(f"corpus directory holds no PNG images: {args.corpus}")
    cfg = GenConfig(
        count=args.count,
        image_size=probe.height,
        max_perturb_frac=args.max_perturb,
        seed=args.seed,
    )
    n = generate_dataset(args.corpus, out, cfg)
    config = {
        "corpus": str(args.corpus),
        "out": str(out),
        "count": args.count,
        "image_size": cfg.image_size,
        "max_perturb_frac": cfg.max_perturb_frac,
        "seed": args.seed,
    }
    write_run_manifest(
        out / "run_manifest.json", "gen-data", config, args.seed,
        [out / "manifest.jsonl", out / "images"], started,
    )
    _emit({"command": "gen-data", "samples": n, "out": str(out)})
    return EXIT_OK


def _cmd_train(args) -> int:
    started = time.perf_counter()
    samples = read_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    cfg = TrainConfig(
        loss=args.loss,
        corr=args.corr,
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        seed=args.seed,
        sigma=args.sigma,
        gamma=args.gamma,
        grid_n=args.grid_n,
    )
    if args.loss == "mse" and args.transform not in ("homo", "homo8"):
        raise DataError("--loss mse requires --transform homo or homo8 (label kind match)")
    regressor = RegressorSpec(mode=args.transform, conv_channels=args.conv_channels)
    _log(f"training {args.transform}/{args.loss}/{args.corr} on {len(samples)} samples")
    ckpt = train(samples, cfg, regressor=regressor)
    out = Path(args.out)
    save_checkpoint(ckpt, out)

    from .figures import save_loss_curve

    curve = save_loss_curve(ckpt.loss_trace, out.with_suffix(".loss.png"))
    config = {
        "data": str(args.data),
        "out": str(out),
        "transform": args.transform,
        "conv_channels": args.conv_channels,
        **asdict(cfg),
    }
    write_run_manifest(out.parent / (out.name + ".manifest.json"), "train", config,
                       args.seed, [out, curve], started)
    _emit(
        {
            "command": "train",
            "checkpoint": str(out),
            "epochs": cfg.epochs,
            "final_loss": ckpt.loss_trace[-1],
            "loss_curve": str(curve),
        }
    )
    return EXIT_OK


def _cmd_eval(args) -> int:
    started = time.perf_counter()
    samples = read_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    ckpt = load_checkpoint(args.ckpt)
    ckpt2 = load_checkpoint(args.ckpt2) if args.ckpt2 else None
    result = evaluate_model(samples, ckpt, alpha=args.alpha, ckpt2=ckpt2)
    payload = result.to_dict()
    payload["command"] = "eval"
    payload["data"] = str(args.data)
    _emit(payload)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        config = {
            "data": str(args.data),
            "ckpt": str(args.ckpt),
            "ckpt2": str(args.ckpt2) if args.ckpt2 else None,
            "alpha": args.alpha,
            "out": str(out),
        }
        write_run_manifest(out.parent / (out.name + ".manifest.json"), "eval", config,
                           None, [out], started)
    return EXIT_OK


def _parse_params(raw: str) -> TransformParams:
    try:
        values = np.array([float(tok) for tok in raw.split(",")], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"--params must be 9 comma-separated numbers: {exc}")
    if values.size != 9:
        raise DataError(f"--params must hold 9 numbers, got {values.size}")
    return TransformParams.homography(values)


def _cmd_warp(args) -> int:
    started = time.perf_counter()
    img = load_image(args.image)
    t = _parse_params(args.params)
    out_img = warp_image(img, t, img.height, img.width)
    out = Path(args.out)
    save_image(out_img, out)
    config = {"image": str(args.image), "params": args.params, "out": str(out)}
    write_run_manifest(out.parent / (out.name + ".manifest.json"), "warp", config,
                       None, [out], started)
    _emit({"command": "warp", "out": str(out), "size": [out_img.height, out_img.width]})
    return EXIT_OK


def _cmd_match(args) -> int:
    started = time.perf_counter()
    src = load_image(args.source)
    dst = load_image(args.target)
    ckpt = load_checkpoint(args.ckpt)
    artifacts = []
    if args.ckpt2:
        result = two_stage_match(src, dst, ckpt, load_checkpoint(args.ckpt2))
        stages = list(result.stages)
    else:
        stages = [forward_pipeline(src, dst, ckpt)]
    warped = render_alignment(src, stages, dst.height, dst.width)
    out = Path(args.out)
    save_image(warped, out)
    artifacts.append(out)
    payload = {
        "command": "match",
        "out": str(out),
        "stages": [
            {"kind": t.kind.value, "values": [float(v) for v in t.values]} for t in stages
        ],
    }
    if args.dump_transform:
        dump = Path(args.dump_transform)
        dump.parent.mkdir(parents=True, exist_ok=True)
        dump.write_text(json.dumps({"stages": payload["stages"]}, indent=2) + "\n")
        artifacts.append(dump)
    config = {
        "source": str(args.source),
        "target": str(args.target),
        "ckpt": str(args.ckpt),
        "ckpt2": str(args.ckpt2) if args.ckpt2 else None,
        "out": str(out),
        "dump_transform": str(args.dump_transform) if args.dump_transform else None,
    }
    write_run_manifest(out.parent / (out.name + ".manifest.json"), "match", config,
                       None, artifacts, started)
    _emit(payload)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    started = time.perf_counter()
    samples = read_dataset(args.data)
    if not samples:
        raise DataError(f"no samples found under {args.data}")
    try:
        seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]
    except ValueError as exc:
        raise DataError(f"--seeds must be comma-separated integers: {exc}")
    if len(seeds) < 3:
        raise DataError("--seeds needs at least 3 entries")
    base = TrainConfig(
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        sigma=args.sigma,
        gamma=args.gamma,
        grid_n=args.grid_n,
    )
    _log(f"ablation over seeds {seeds} on {len(samples)} samples")
    report = run_ablation(samples, seeds, base, conv_channels=args.conv_channels,
                          alpha=args.alpha)
    out = Path(args.out)
    paths = write_ablation_report(report, out)

    from .figures import save_ablation_figure

    fig_path = save_ablation_figure(report, out / "ablation_pck.png")
    config = {
        "data": str(args.data),
        "seeds": seeds,
        "out": str(out),
        "alpha": args.alpha,
        "conv_channels": args.conv_channels,
        **asdict(base),
    }
    artifacts = [paths["csv"], paths["json"], fig_path]
    write_run_manifest(out / "run_manifest.json", "ablate", config, seeds, artifacts, started)
    _emit(
        {
            "command": "ablate",
            "out": str(out),
            "medians": {k: v for k, v in report.medians().items()},
            "config_order": report.sorted_configs(),
        }
    )
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    modules = MODULES if args.module == "all" else (args.module,)
    results = run_gradcheck(modules)
    table = {
        r.name: {"max_rel_err": r.max_rel_err, "tolerance": r.tolerance, "passed": r.passed}
        for r in results
    }
    worst = max(results, key=lambda r: r.max_rel_err / r.tolerance)
    _emit(
        {
            "command": "gradcheck",
            "checks": table,
            "all_passed": all(r.passed for r in results),
            "worst": worst.name,
        }
    )
    if not all(r.passed for r in results):
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geomatch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"geomatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate toy source images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=32, help="number of images (default 32)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("gen-data", help="generate a corner-perturbation dataset")
    p.add_argument("--corpus", required=True, help="directory of source PNGs")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, default=256, help="number of samples (default 256)")
    p.add_argument(
        "--max-perturb", type=float, default=0.25,
        help="corner offset bound as a fraction of image extent (default 0.25)",
    )
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the matching pipeline")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument(
        "--transform", choices=("affine", "homo", "homo8", "tps"), default="homo",
        help="regressed transform parametrization (default homo)",
    )
    p.add_argument(
        "--loss", choices=("weighted", "grid", "mse"), default="weighted",
        help="training objective (default weighted)",
    )
    p.add_argument(
        "--corr", choices=("pearson", "cosine"), default="pearson",
        help="correlation kind (default pearson)",
    )
    p.add_argument("--sigma", type=float, default=1.0, help="Gaussian weight width (default 1.0)")
    p.add_argument("--gamma", type=float, default=0.5, help="weight cutoff (default 0.5)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default 30)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam step size (default 1e-3)")
    p.add_argument("--batch", type=int, default=16, help="mini-batch size (default 16)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    p.add_argument("--grid-n", type=int, default=20, help="loss grid resolution (default 20)")
    p.add_argument(
        "--conv-channels", type=int, default=32,
        help="regressor conv width (default 32)",
    )
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate PCK on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--ckpt2", default=None, help="optional second-stage checkpoint")
    p.add_argument("--alpha", type=float, default=0.1, help="PCK threshold fraction (default 0.1)")
    p.add_argument("--out", default=None, help="optional JSON result path (also to stdout)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("warp", help="warp an image by explicit homography parameters")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument(
        "--params", required=True,
        help="9 comma-separated values, row-major, used as the output-to-input map",
    )
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("match", help="align a source image onto a target")
    p.add_argument("--source", required=True, help="source PNG")
    p.add_argument("--target", required=True, help="target PNG")
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--ckpt2", default=None, help="optional stage-2 checkpoint")
    p.add_argument("--out", required=True, help="warped output PNG")
    p.add_argument("--dump-transform", default=None, help="optional JSON dump of the stages")
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("ablate", help="run the standard configuration ablation")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seeds", required=True, help="comma-separated seeds (at least 3)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--alpha", type=float, default=0.1, help="PCK threshold fraction (default 0.1)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs (default 30)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam step size (default 1e-3)")
    p.add_argument("--batch", type=int, default=16, help="mini-batch size (default 16)")
    p.add_argument("--sigma", type=float, default=1.0, help="Gaussian weight width (default 1.0)")
    p.add_argument("--gamma", type=float, default=0.5, help="weight cutoff (default 0.5)")
    p.add_argument("--grid-n", type=int, default=20, help="loss grid resolution (default 20)")
    p.add_argument("--conv-channels", type=int, default=32, help="regressor conv width (default 32)")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument(
        "--module", choices=("all",) + MODULES, default="all",
        help="which family of checks to run (default all)",
    )
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except DataError as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL
    except GeomatchError as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
