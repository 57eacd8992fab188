"""Command-line entry point.

Exit codes: 0 success, 1 usage error (bad flags, bad prompt), 2 runtime error.
Environment: PGL_RUN_DIR sets the default run directory, PGL_DEVICE the torch
device (only ``cpu`` is supported by this build).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import __version__
from .errors import ContractError, PercepgenError, PromptParseError
from .prompts import canonical_prompt, parse_prompt

log = logging.getLogger("percepgen")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- config layering -------------------------------------------------------------------


def load_config(path) -> dict:
    """Read a JSON config; accepts the checkpoint-header layout.

    Recognised top-level keys: generator, discriminator, provider_id, loss,
    schedule, state (with nested loss/schedule), dataset, codec, preset.
    """
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    state = cfg.get("state") or {}
    for key in ("loss", "schedule"):
        if key not in cfg and key in state:
            cfg[key] = state[key]
    return cfg


def _merge(base: dict, *layers) -> dict:
    out = dict(base)
    for layer in layers:
        out.update({k: v for k, v in (layer or {}).items() if v is not None})
    return out


def _device():
    name = os.environ.get("PGL_DEVICE", "cpu")
    if name != "cpu":
        raise PercepgenError(f"device {name!r} requested via PGL_DEVICE; this build runs on cpu only")
    return torch.device(name)


def _run_dir(arg):
    return Path(arg or os.environ.get("PGL_RUN_DIR") or "runs/latest")


def _emit(args, payload, text=None):
    if args.json:
        print(json.dumps(payload, indent=2, default=str))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, default=str))


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _categories(arg):
    return [c.strip() for c in arg.split(",") if c.strip()] if arg else None


def _checkpoint(args):
    return Path(args.checkpoint) if args.checkpoint else _run_dir(None) / "model.pgck"


# --- dataset ---------------------------------------------------------------------------------


def cmd_dataset(args, cfg):
    from .dataset import (
        DatasetConfig, DatasetManifest, build_dataset, list_sources, sample_counts,
        split_dataset, write_synthetic_sources,
    )

    if args.action == "synth":
        _need(args, "out")
        paths = write_synthetic_sources(args.out, args.count, args.size, args.seed or 0)
        _emit(args, {"sources": len(paths), "dir": str(args.out)}, f"wrote {len(paths)} sources to {args.out}")
        return EXIT_OK
    if args.action == "build":
        _need(args, "sources", "out")
        flags = {
            "categories": _categories(args.categories),
            "per_category": args.per_category,
            "resolution": args.resolution,
            "seed": args.seed,
            "workers": args.workers,
            "depth_dir": args.depth_dir,
            "segments_dir": args.segments_dir,
        }
        dcfg = DatasetConfig.from_dict(_merge(asdict(DatasetConfig()), cfg.get("dataset"), flags))
        manifest = build_dataset(list_sources(args.sources), dcfg, args.out)
        if args.test_fraction:
            manifest = split_dataset(manifest, args.test_fraction, dcfg.seed)
            manifest.save()
        counts = {k.name: v for k, v in manifest.counts.items()}
        _emit(args, {"manifest": str(Path(args.out) / "manifest.jsonl"), "counts": counts},
              f"built {len(manifest.records)} pairs in {args.out}")
        return EXIT_OK

    _need(args, "manifest")
    manifest = DatasetManifest.load(args.manifest)
    if args.action == "split":
        manifest = split_dataset(manifest, args.test_fraction or 0.1, args.seed or 0)
        manifest.save()
        sizes = {s: len(manifest.split(s)) for s in ("train", "test")}
        _emit(args, sizes, f"train {sizes['train']}  test {sizes['test']}")
        return EXIT_OK
    # stats
    counts = {c.name: n for c, n in sample_counts(manifest, args.phase).items()}
    lines = [f"{name:12s} {n}" for name, n in counts.items()]
    _emit(args, counts, "\n".join(lines))
    return EXIT_OK


# --- training / inference --------------------------------------------------------------------


def cmd_train(args, cfg):
    from .dataset import DatasetManifest
    from .model import PRESETS, DiscriminatorConfig, GeneratorConfig, desk_discriminator
    from .training import LossConfig, TrainSchedule, train

    _need(args, "manifest")
    _device()
    preset = args.preset or cfg.get("preset") or "desk"
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    gen_d = _merge(PRESETS[preset]().as_dict(), cfg.get("generator"),
                   {"text_conditioning": False if args.no_text else None})
    gen_cfg = GeneratorConfig.from_dict(gen_d)
    disc_d = _merge(desk_discriminator(text_dim=gen_cfg.text_dim).as_dict(), cfg.get("discriminator"),
                    {"text_conditioning": False if args.no_text else None})
    disc_cfg = DiscriminatorConfig.from_dict(disc_d)
    loss_cfg = LossConfig(**_merge(asdict(LossConfig()), cfg.get("loss"), {
        "lam": args.lam, "b_max": args.b_max,
        "use_gan": False if args.no_gan else None, "use_boost": False if args.no_boost else None,
    }))
    sched_d = _merge(asdict(TrainSchedule()), cfg.get("schedule"), {
        "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed,
        "checkpoint_every": args.checkpoint_every,
    })
    if args.epochs is not None:
        p1 = int(round(args.epochs * args.phase1_fraction))
        sched_d.update(phase1_epochs=p1, phase2_epochs=args.epochs - p1)
    schedule = TrainSchedule(**sched_d)
    run_dir = _run_dir(args.run_dir)
    manifest = DatasetManifest.load(args.manifest)

    def progress(entry):
        if not args.json:
            probes = " ".join(f"{k}={v:.2f}" for k, v in entry["probe_psnr"].items())
            print(f"epoch {entry['epoch']:3d} phase {entry['phase']} taL1 {entry['taL1']:.4f} "
                  f"d {entry['d_loss']:.3f} g {entry['g_loss']:.3f}  {probes}", flush=True)

    result = train(manifest, gen_cfg, disc_cfg, loss_cfg, schedule, run_dir,
                   _categories(args.categories), cfg.get("provider_id", "hashed-token"), progress)
    last = result.history[-1] if result.history else {}
    _emit(args, {"run_dir": str(run_dir), "checkpoint": str(run_dir / "model.pgck"), "final": last},
          f"saved {run_dir / 'model.pgck'}")
    return EXIT_OK


def cmd_infer(args, cfg):
    from .imaging import read_png, write_png
    from .model import load_checkpoint

    _need(args, "prompt")
    spec = parse_prompt(args.prompt)  # grammar errors surface before any I/O
    _need(args, "image", "out")
    _device()
    bundle = load_checkpoint(_checkpoint(args))
    out = bundle.enhance(read_png(args.image), args.prompt)
    write_png(out, args.out)
    _emit(args, {"out": str(args.out), "prompt": canonical_prompt(spec.normalized())}, f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .dataset import DatasetManifest
    from .evaluation import IdentityPredictor, evaluate_model
    from .model import load_checkpoint

    _need(args, "manifest")
    manifest = DatasetManifest.load(args.manifest)
    model = IdentityPredictor() if args.identity else load_checkpoint(_checkpoint(args))
    out_dir = Path(args.out_dir) if args.out_dir else None
    report = evaluate_model(model, manifest, _categories(args.categories), args.split, out_dir)
    payload = {k: v.as_dict() for k, v in report.results.items()}
    lines = [f"{k:12s} PSNR {v.psnr_db:7.2f} dB  SSIM {v.ssim:.4f}  (n={v.n})" for k, v in report.results.items()]
    lines += [f"{k:12s} skipped (no records)" for k in report.skipped]
    _emit(args, {"categories": payload, "skipped": report.skipped}, "\n".join(lines))
    return EXIT_OK


def cmd_bench(args, cfg):
    from .evaluation import benchmark_inference
    from .model import ModelBundle, desk_generator, load_checkpoint

    if args.checkpoint:
        bundle = load_checkpoint(args.checkpoint)
    else:
        bundle = ModelBundle.create(desk_generator(), seed=args.seed or 0)
    chain = [bundle] * max(1, args.chain)
    result = benchmark_inference(chain if args.chain > 1 else bundle, args.input_size, args.warmup,
                                 args.iters, args.prompt, args.include_embedding)
    result["parameters"] = bundle.parameter_count()
    _emit(args, result, f"mean {result['mean_ms']:.2f} ms  p50 {result['p50_ms']:.2f}  "
                        f"p95 {result['p95_ms']:.2f}  ({result['models']} model(s), "
                        f"{result['input_size']}px, {result['iters']} iters)")
    return EXIT_OK


# --- streaming -------------------------------------------------------------------------------


def cmd_codec(args, cfg):
    from .dataset import DatasetManifest
    from .streaming import CodecConfig, codec_round_trip_psnr, save_codec, train_codec

    _need(args, "manifest", "out")
    manifest = DatasetManifest.load(args.manifest)
    ccfg = CodecConfig(**_merge(asdict(CodecConfig()), cfg.get("codec"),
                                {"latent_channels": args.latent_channels, "downscale": args.downscale}))
    train_imgs = [manifest.load_pair(r)[1] for r in manifest.split("train")]
    test_imgs = [manifest.load_pair(r)[1] for r in manifest.split("test")] or train_imgs
    codec = train_codec(train_imgs, ccfg, epochs=args.epochs, seed=args.seed or 0, log_every=5)
    save_codec(codec, args.out)
    score = codec_round_trip_psnr(codec, test_imgs)
    h = w = train_imgs[0].height
    _emit(args, {"codec": str(args.out), "round_trip_psnr_db": score,
                 "latent_shape": ccfg.latent_shape(h, w), "compression_ratio": ccfg.compression_ratio(h, w)},
          f"saved {args.out}; round-trip PSNR {score:.2f} dB")
    return EXIT_OK


def cmd_serve(args, cfg):
    from .model import load_checkpoint
    from .streaming import load_codec, serve

    _need(args, "codec")
    _device()
    bundle = load_checkpoint(_checkpoint(args))
    codec = load_codec(args.codec)
    print(f"serving on {args.host}:{args.port}", flush=True)
    try:
        serve((args.host, args.port), bundle, codec)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_client(args, cfg):
    from .imaging import read_png, write_png
    from .streaming import StreamClient, load_codec

    _need(args, "prompt")
    parse_prompt(args.prompt)
    _need(args, "image", "out", "codec")
    codec = load_codec(args.codec)
    with StreamClient((args.host, args.port), codec) as client:
        img = client.enhance(read_png(args.image), args.prompt)
        received = client.bytes_received
    write_png(img, args.out)
    _emit(args, {"out": str(args.out), "bytes_received": received}, f"wrote {args.out} ({received} bytes received)")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config (defaults < file < flags)")
    common.add_argument("--seed", type=int)
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="percepgen", description="Prompt-driven perceptual image enhancement.")
    p.add_argument("--version", action="version", version=f"percepgen {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="build, split and inspect paired datasets")
    dsub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dsub.add_parser("synth", parents=[common], help="write procedural source images")
    s.add_argument("--out")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=256)
    b = dsub.add_parser("build", parents=[common], help="synthesise (input, target, prompt) triples")
    b.add_argument("--sources")
    b.add_argument("--out")
    b.add_argument("--categories", help="comma separated, e.g. ID,F,ID+F")
    b.add_argument("--per-category", type=int)
    b.add_argument("--resolution", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--depth-dir")
    b.add_argument("--segments-dir")
    b.add_argument("--test-fraction", type=float)
    sp = dsub.add_parser("split", parents=[common], help="stratified train/test split")
    sp.add_argument("manifest", nargs="?")
    sp.add_argument("--test-fraction", type=float)
    st = dsub.add_parser("stats", parents=[common], help="per-category training sample counts")
    st.add_argument("manifest", nargs="?")
    st.add_argument("--phase", type=int, choices=(1, 2))

    t = sub.add_parser("train", parents=[common], help="train a generator")
    t.add_argument("--manifest")
    t.add_argument("--run-dir")
    t.add_argument("--preset")
    t.add_argument("--categories")
    t.add_argument("--epochs", type=int)
    t.add_argument("--phase1-fraction", type=float, default=0.4)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--b-max", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--no-gan", action="store_true")
    t.add_argument("--no-boost", action="store_true")
    t.add_argument("--no-text", action="store_true", help="vanilla U-Net baseline")

    i = sub.add_parser("infer", parents=[common], help="enhance one image")
    i.add_argument("--checkpoint")
    i.add_argument("--image")
    i.add_argument("--prompt")
    i.add_argument("--out")

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM per category")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--split", default="test")
    e.add_argument("--categories")
    e.add_argument("--out-dir")
    e.add_argument("--identity", action="store_true", help="score the identity anchor instead")

    be = sub.add_parser("bench", parents=[common], help="inference timing")
    be.add_argument("--checkpoint")
    be.add_argument("--input-size", type=int)
    be.add_argument("--warmup", type=int, default=3)
    be.add_argument("--iters", type=int, default=20)
    be.add_argument("--chain", type=int, default=1, help="daisy-chain length")
    be.add_argument("--prompt", default="foveate")
    be.add_argument("--include-embedding", action="store_true")

    c = sub.add_parser("codec", help="latent codec for streaming")
    csub = c.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ct = csub.add_parser("train", parents=[common], help="fit the autoencoder on dataset targets")
    ct.add_argument("--manifest")
    ct.add_argument("--out")
    ct.add_argument("--epochs", type=int, default=150)
    ct.add_argument("--latent-channels", type=int)
    ct.add_argument("--downscale", type=int)

    for name, helptext in (("serve", "run the streaming server"), ("client", "request one enhancement")):
        sv = sub.add_parser(name, parents=[common], help=helptext)
        sv.add_argument("--host", default="127.0.0.1")
        sv.add_argument("--port", type=int, default=7860)
        sv.add_argument("--codec")
        if name == "serve":
            sv.add_argument("--checkpoint")
        else:
            sv.add_argument("--image")
            sv.add_argument("--prompt")
            sv.add_argument("--out")
    return p


COMMANDS = {
    "dataset": cmd_dataset, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "bench": cmd_bench, "codec": cmd_codec, "serve": cmd_serve, "client": cmd_client,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config)
        if args.seed is None and "seed" in cfg:
            args.seed = cfg["seed"]
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except PromptParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (PercepgenError, OSError, ConnectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
