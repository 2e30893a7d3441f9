"""Command-line surface.

Subcommands: synth, train, infer, eval, ablate {cabl|depth|operator|prompt},
robustness {jpeg|blur}. Exit codes: 0 success, 1 usage error, 2 runtime
error. All artifacts land under --out: model.floc, cam/*.camf, masks/*.png,
report.json, report.csv, curves.svg.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics, pipeline
from .cam import write_camf
from .data import RunConfig, build_config, config_parse, dataset_load, synth_forgery_generate, train_val_split
from .imgproc import write_mask_png
from .metrics import DEFAULT_BLUR_KERNELS, DEFAULT_JPEG_QUALITIES, EvalReport, emit_report
from .model import load_checkpoint, save_checkpoint


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--scales", type=str, help="comma-separated inference scales, e.g. 64,96,128")
    common.add_argument("--refiner", choices=["none", "region", "remote"], help="mask refiner")
    common.add_argument("--remote-url", type=str, help="remote refiner endpoint")
    common.add_argument(
        "--prompt-mode", choices=["null", "point", "box", "box+point"], help="prompt construction mode"
    )
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--epochs", type=int, help="override config epochs")
    common.add_argument("--lr", type=float, help="override learning rate")

    p = _Parser(prog="floc", description="weakly supervised manipulation localization")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic forgery corpus")
    sp.add_argument("--n", type=int, default=400, help="total images (balanced)")
    sp.add_argument("--size", type=int, default=64, help="image side length")
    sp.add_argument("--uniform-paste", action="store_true", help="paste flat-color regions")
    sp.add_argument("--boundary-blur", type=int, default=0, help="odd blur kernel for splice edges")

    tp = sub.add_parser("train", parents=[common], help="train a model")
    tp.add_argument("--data", type=Path, required=True, help="dataset root")

    ip = sub.add_parser("infer", parents=[common], help="localize manipulations in images")
    ip.add_argument("--model", type=Path, required=True, help="checkpoint path")
    ip.add_argument("--data", type=Path, help="dataset root to run on")
    ip.add_argument("--image", type=Path, action="append", help="single image (repeatable)")

    ep = sub.add_parser("eval", parents=[common], help="evaluate on a dataset with masks")
    ep.add_argument("--model", type=Path, required=True)
    ep.add_argument("--data", type=Path, required=True)

    ap = sub.add_parser("ablate", parents=[common], help="run an ablation study")
    ap.add_argument("study", choices=["cabl", "depth", "operator", "prompt"])
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--model", type=Path, help="checkpoint (prompt study only; otherwise trained ad hoc)")

    rp = sub.add_parser("robustness", parents=[common], help="degradation sweep")
    rp.add_argument("kind", choices=["jpeg", "blur"])
    rp.add_argument("--model", type=Path, required=True)
    rp.add_argument("--data", type=Path, required=True)
    rp.add_argument("--levels", type=str, help="comma-separated sweep levels")
    return p


def _config_from_args(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "refiner": args.refiner,
        "prompt_mode": args.prompt_mode,
        "remote_url": args.remote_url,
        "epochs": args.epochs,
        "lr": args.lr,
    }
    if args.scales:
        overrides["scales"] = [int(s) for s in args.scales.split(",")]
    if args.config:
        return config_parse(args.config, overrides)
    return build_config({}, overrides)


def _dump_localizations(model, samples, cfg, out: Path) -> list[dict]:
    cam_dir = out / "cam"
    mask_dir = out / "masks"
    cam_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        res = pipeline.analyze_image(model, s.image, **pipeline._analyze_kwargs(cfg))
        stem = Path(s.path).stem
        write_camf(cam_dir / f"{stem}.camf", res.cam, cfg.scales)
        write_mask_png(mask_dir / f"{stem}.png", res.mask)
        rows.append({"image": Path(s.path).name, "score": round(res.score, 6)})
    return rows


def _cmd_synth(args, cfg: RunConfig) -> None:
    layout = synth_forgery_generate(
        args.n, args.size, cfg.seed, args.out,
        uniform_paste=args.uniform_paste, boundary_blur=args.boundary_blur,
    )
    print(f"wrote {args.n} images under {layout.root}")


def _cmd_train(args, cfg: RunConfig) -> None:
    samples = dataset_load(args.data, eval_mode=False)
    model, history = pipeline.fit(
        samples, cfg, log=lambda e, s: print(f"epoch {e:3d}  loss {s.loss:.4f}  acc {s.accuracy:.3f}")
    )
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "model.floc", model)
    hist = [{"epoch": i, "loss": h.loss, "accuracy": h.accuracy} for i, h in enumerate(history)]
    (args.out / "history.json").write_text(json.dumps(hist, indent=2, sort_keys=True) + "\n")
    (args.out / "config.json").write_text(cfg.to_json())
    print(f"checkpoint: {args.out / 'model.floc'}")


def _cmd_infer(args, cfg: RunConfig) -> None:
    from .imgproc import read_png

    model = load_checkpoint(args.model)
    if args.data:
        samples = dataset_load(args.data, eval_mode=False)
    elif args.image:
        from .data import ManipSample

        samples = [ManipSample(str(p), read_png(p), -1) for p in args.image]
    else:
        raise _UsageError("infer needs --data or --image")
    rows = _dump_localizations(model, samples, cfg, args.out)
    report = EvalReport(tables={"scores": rows}, meta={"seed": cfg.seed})
    emit_report(report, args.out)
    print(f"report: {args.out / 'report.json'}")


def _cmd_eval(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.model)
    samples = dataset_load(args.data, eval_mode=True)
    result = pipeline.evaluate_dataset(model, samples, **pipeline._analyze_kwargs(cfg))
    _dump_localizations(model, samples, cfg, args.out)
    report = EvalReport(datasets={args.data.name: result}, meta={"seed": cfg.seed})
    emit_report(report, args.out)
    for key, value in sorted(result.items()):
        print(f"{args.data.name} {key}: {value if isinstance(value, int) else f'{value:.4f}'}")


def _cmd_ablate(args, cfg: RunConfig) -> None:
    samples = dataset_load(args.data, eval_mode=True)
    train, val = train_val_split(samples)
    if args.study == "prompt":
        if args.model:
            model = load_checkpoint(args.model)
        else:
            model, _ = pipeline.fit(train, cfg)
        rows = pipeline.ablate_prompts(val, model, cfg)
    elif args.study == "cabl":
        rows = pipeline.ablate_cabl(train, val, cfg)
    elif args.study == "depth":
        rows = pipeline.ablate_depth(train, val, cfg)
    else:
        rows = pipeline.ablate_operator(train, val, cfg)
    report = EvalReport(tables={args.study: rows}, meta={"seed": cfg.seed})
    emit_report(report, args.out)
    for row in rows:
        print(row)


def _cmd_robustness(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.model)
    samples = dataset_load(args.data, eval_mode=True)
    if args.levels:
        levels = [int(x) for x in args.levels.split(",")]
    else:
        levels = list(DEFAULT_JPEG_QUALITIES if args.kind == "jpeg" else DEFAULT_BLUR_KERNELS)
    curve = metrics.robustness_sweep(
        model, samples, args.kind, levels, **pipeline._analyze_kwargs(cfg)
    )
    report = EvalReport(curves={args.kind: curve}, meta={"seed": cfg.seed})
    emit_report(report, args.out)
    for level, f1 in curve:
        print(f"{args.kind} {level}: p_f1 {f1:.4f}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_from_args(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        handler = {
            "synth": _cmd_synth,
            "train": _cmd_train,
            "infer": _cmd_infer,
            "eval": _cmd_eval,
            "ablate": _cmd_ablate,
            "robustness": _cmd_robustness,
        }[args.command]
        handler(args, cfg)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
