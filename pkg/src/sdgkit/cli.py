"""``sdgkit`` command line: validate, run, ablate, gradcam, make-synthetic, convert-weights.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from . import engine, plotting
from .config import Config, ConfigError
from .data import DataError, export_wilds_layout, read_png
from .gradcam import DEFAULT_LAYER, UnknownLayerError, gradcam
from .weights import WeightsFormatError, apply_weights, convert_torch_checkpoint, load_weights, save_weights

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")

log = logging.getLogger("sdgkit")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def load_config(spec: str, overrides: list[str] | None = None) -> Config:
    """``spec`` is a file path or ``preset:<name>``; ``overrides`` are ``key=value`` strings."""
    if spec.startswith("preset:"):
        text, source = cfgmod.preset_text(spec[len("preset:"):]), spec
    else:
        path = Path(spec)
        if not path.is_file():
            raise UsageError(f"config file not found: {spec}")
        text, source = path.read_text(), str(path)
    if overrides:
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
        text += "\n" + "\n".join(overrides) + "\n"
    return cfgmod.load_text(text, source)


def _prepare_out_dir(out: Path, force: bool):
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("sdgkit").addHandler(handler)
    return handler


def checkpoint_stem(method: str, source: int, seed: int, variant: str = "") -> str:
    stem = f"{method}_C{source}_seed{seed}"
    if variant and variant != engine.METHODS[method].label:
        stem += "_" + "".join(ch if ch.isalnum() else "_" for ch in variant).strip("_").lower()
    return stem


def write_checkpoint(path: Path, state: dict, cfg: Config, method: str, source: int, seed: int):
    """Parameters in the flat binary layout plus a ``.cfg`` sidecar that rebuilds the network."""
    save_weights(state, path)
    sidecar = cfg.override(**{"experiment.methods": (method,), "experiment.sources": (source,),
                              "train.seeds": (seed,), "model.pretrained": "",
                              "data.norm": engine.Normalizer.from_config(cfg).mode})
    path.with_suffix(".cfg").write_text(sidecar.dumps())


def load_checkpoint(path) -> tuple[torch.nn.Module, Config]:
    path = Path(path)
    sidecar = path.with_suffix(".cfg")
    if not sidecar.is_file():
        raise UsageError(f"missing checkpoint config {sidecar}")
    cfg = cfgmod.load(sidecar)
    net = engine.build_network(cfg, cfg["experiment.methods"][0])
    apply_weights(net, load_weights(path), strict=True)
    net.eval()
    return net, cfg


def _write_outputs(out: Path, result: engine.ProtocolResult, cfg: Config, figures: bool, checkpoints: bool):
    table = result.table
    (out / "results.csv").write_text(table.to_csv())
    (out / "results.json").write_text(json.dumps(table.to_json(), indent=2) + "\n")
    (out / "results.md").write_text(table.to_markdown())
    (out / "runs.csv").write_text(engine.records_to_csv(result.records))
    (out / "runs.json").write_text(engine.records_to_json(result.records) + "\n")
    if checkpoints:
        ck = out / "checkpoints"
        ck.mkdir(exist_ok=True)
        for key, state in result.checkpoints.items():
            variant, method, source, seed = key
            if state is not None:
                write_checkpoint(ck / (checkpoint_stem(method, source, seed, variant) + ".sdgw"),
                                 state, result.configs.get(key, cfg), method, source, seed)
    if figures:
        plotting.plot_results(table, out / "figures" / "results.png")
        plotting.plot_curves(result.records, out / "figures" / "curves.png")


def _progress(msg: str):
    log.info(msg)


# ---------------------------------------------------------------- commands

def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.set)
    sys.stdout.write(cfg.dumps())
    return EXIT_OK


def _run_common(args, runner) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    handler = _attach_log(out)
    try:
        (out / "config.cfg").write_text(cfg.dumps())
        datasets = engine.load_datasets(cfg)
        result = runner(cfg, datasets)
        _write_outputs(out, result, cfg, figures=not args.no_figures, checkpoints=not args.no_checkpoints)
    finally:
        logging.getLogger("sdgkit").removeHandler(handler)
        handler.close()
    sys.stdout.write(result.table.to_markdown())
    aborted = [r for r in result.records if r.status != "ok"]
    if aborted:
        for r in aborted:
            log.error("%s C%d seed %d aborted: %s", r.variant or r.method, r.source, r.seed, r.error)
        return EXIT_ABORT
    return EXIT_OK


def cmd_run(args) -> int:
    methods = None
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        bad = [m for m in methods if m not in engine.METHODS]
        if bad:
            raise UsageError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(engine.METHODS)}")

    def runner(cfg, datasets):
        return engine.run_protocol(cfg, datasets, methods, progress=_progress,
                                   keep_checkpoints=not args.no_checkpoints)
    return _run_common(args, runner)


def cmd_ablate(args) -> int:
    def runner(cfg, datasets):
        fn = engine.run_resolution_ablation if args.which == "resolution" else engine.run_style_ablation
        return fn(cfg, datasets, progress=_progress, keep_checkpoints=not args.no_checkpoints)
    return _run_common(args, runner)


def _images_in(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"no images under {path}")
        return files
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    return [path]


def cmd_gradcam(args) -> int:
    net, cfg = load_checkpoint(args.checkpoint)
    normalize = engine.Normalizer.from_config(cfg)
    src = Path(args.image)
    images = _images_in(src)
    out = Path(args.out)
    batch = src.is_dir()
    if batch:
        out.mkdir(parents=True, exist_ok=True)
    for path in images:
        img = read_png(path)
        x = torch.from_numpy(img.astype(np.float32) / 255.0)
        heat = gradcam(net, normalize(x.unsqueeze(0)), args.layer).numpy()
        target = out / (path.relative_to(src).with_suffix("").as_posix().replace("/", "__") + "_gradcam.png") \
            if batch else out
        plotting.save_overlay(img, heat, target, alpha=args.alpha)
        print(target)
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = load_config(args.config, args.set)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    syn_cfg = cfg.override(**{"data.source": "synthetic"})
    datasets = engine.load_datasets(syn_cfg)
    export_wilds_layout(datasets, out)
    print(f"wrote {sum(len(d) for d in datasets)} patches for {len(datasets)} domains to {out}")
    return EXIT_OK


def cmd_convert_weights(args) -> int:
    n = convert_torch_checkpoint(args.src, args.dst)
    print(f"wrote {n} tensors to {args.dst}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdgkit", description="Single-source domain generalisation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("config", help="config file, or preset:<name> (" + ", ".join(cfgmod.preset_names()) + ")")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")

    def run_args(sp):
        config_args(sp)
        sp.add_argument("-o", "--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="write into a non-empty directory")
        sp.add_argument("--no-figures", action="store_true")
        sp.add_argument("--no-checkpoints", action="store_true")

    sp = sub.add_parser("validate", help="print the resolved config or every error")
    config_args(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("run", help="train and evaluate every method x source x seed")
    run_args(sp)
    sp.add_argument("--methods", help="comma list overriding experiment.methods")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ablate", help="reconstruction resolution or style plugin ablation")
    sp.add_argument("which", choices=("resolution", "style"))
    run_args(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcam", help="Grad-CAM overlay for one image or a directory")
    sp.add_argument("checkpoint", help=".sdgw file with its .cfg sidecar")
    sp.add_argument("image", help="image file or directory")
    sp.add_argument("-o", "--out", required=True, help="output PNG (or directory in batch mode)")
    sp.add_argument("--layer", default=DEFAULT_LAYER)
    sp.add_argument("--alpha", type=float, default=0.45)
    sp.set_defaults(func=cmd_gradcam)

    sp = sub.add_parser("make-synthetic", help="export the synthetic benchmark as PNGs + metadata.csv")
    config_args(sp)
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_make_synthetic)

    sp = sub.add_parser("convert-weights", help="torchvision ResNet-18 .pth to the flat weights format")
    sp.add_argument("src")
    sp.add_argument("dst")
    sp.set_defaults(func=cmd_convert_weights)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logger = logging.getLogger("sdgkit")
    logger.setLevel(logging.INFO)
    stream = None
    if args.verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
        logger.addHandler(stream)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, UnknownLayerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WeightsFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if stream is not None:
            logger.removeHandler(stream)


if __name__ == "__main__":
    sys.exit(main())
