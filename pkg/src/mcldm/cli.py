"""Command-line entry point: ``mcldm <subcommand> [flags]``.

Every subcommand writes its artifacts under ``--out`` and accepts ``--seed``
and ``--config``. A YAML config supplies defaults for the subcommand's flags
(top-level keys, or keys under a section named after the subcommand); flags
given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from ._exceptions import ConfigurationError, ContractError, NotFittedError, TrainingDivergedError
from .conditioning import MODES
from .data import (PARTS, RendererSpec, _palette, _to_pixels, export_dataset, generate_dataset,
                   ingest_external, mask_component_swap)
from .metrics import FeatureExtractor, MaskSegmenter, evaluate
from .schedules import P2Config, make_schedule, weight_profile
from .training import (Checkpoint, TrainConfig, load_checkpoint, load_config, save_checkpoint,
                       train_diffusion)

EXPECTED_ERRORS = (ConfigurationError, ContractError, NotFittedError, TrainingDivergedError,
                   OSError, KeyError)


# helpers ----------------------------------------------------------------------------


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args):
    """Exported dataset from ``--data``, or a freshly generated one."""
    if args.data:
        ds, issues = ingest_external(args.data)
        for issue in issues:
            print(f"warning: skipped {issue.id}: {issue.reason}", file=sys.stderr)
        if len(ds) == 0:
            raise ContractError(f"{args.data}: no usable samples")
        return ds
    return generate_dataset(args.n_data, seed=args.data_seed, spec=RendererSpec(size=args.size))


def _split(ds, name):
    train, val = ds.split()
    return {"train": train, "val": val, "all": ds}[name]


def image_grid(images: np.ndarray, ncol: int = 8) -> Image.Image:
    """Tile ``(N, 3, H, W)`` images in [-1, 1] into one RGB image."""
    n, _, h, w = images.shape
    ncol = max(1, min(ncol, n))
    nrow = -(-n // ncol)
    canvas = np.full((nrow * h, ncol * w, 3), 255, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, ncol)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = _to_pixels(img)
    return Image.fromarray(canvas, mode="RGB")


def mask_image(mask: np.ndarray) -> Image.Image:
    """Color rendering of a mask stack; pixels claimed by several parts are white."""
    pal = np.array(_palette(mask.shape[0]), dtype=np.uint8).reshape(-1, 3)
    claims = mask.sum(axis=0)
    labels = np.zeros(mask.shape[1:], dtype=np.int64)
    for c in range(mask.shape[0]):
        labels[mask[c] == 1] = c + 1
    rgb = pal[labels]
    rgb[claims > 1] = 255
    return Image.fromarray(rgb, mode="RGB")


def _save_png(img: Image.Image, path: Path) -> Path:
    img.save(path, format="PNG", optimize=False)
    return path


def _write_json(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _condition_source(model) -> str:
    return {"uncond": "none", "attr": "attributes", "mask_pooled": "mask (pooled)",
            "mask_nopool": "mask (spatial tokens)", "multi": "attributes + mask"}[model.mode]


def _conditions(model, ds, indices):
    kw = {}
    if model.mode in ("attr", "multi"):
        kw["attributes"] = ds.attrs[indices]
    if model.mode in ("mask_pooled", "mask_nopool", "multi"):
        kw["masks"] = ds.masks[indices]
    return kw


# subcommands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = RendererSpec(size=args.size)
    ds = generate_dataset(args.n, seed=args.seed, spec=spec)
    root = export_dataset(ds, args.out, seed=args.seed, spec=spec)
    print(f"wrote {len(ds)} samples to {root}")
    return 0


def cmd_train_codec(args) -> int:
    from .codec import VQCodec

    out = _out(args)
    train = _split(_load_data(args), "train")
    codec = VQCodec(n_codes=args.n_codes, latent_channels=args.latent_channels,
                    epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                    random_state=args.seed, verbose=args.verbose).fit(train.images)
    path = save_checkpoint(codec, out / "codec.ckpt")
    print(f"codec PSNR {codec.score(train.images):.2f} dB; wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig(name=args.name, mode=args.mode, epochs=args.epochs,
                      batch_size=args.batch_size, lr=args.lr, p2_k=args.p2_k,
                      p2_gamma=args.p2_gamma, schedule=args.schedule, timesteps=args.timesteps,
                      sample_steps=args.steps, checkpoint_every=args.checkpoint_every,
                      seed=args.seed)
    train = _split(_load_data(args), "train")
    codec = Checkpoint.load(args.codec)
    resume = Checkpoint.load(args.resume) if args.resume else None
    run_dir = _out(args) / cfg.name
    try:
        ck = train_diffusion(cfg, train, codec, run_dir, resume=resume, verbose=args.verbose)
    except TrainingDivergedError as exc:
        print(f"error: training diverged; diagnostic checkpoint at {exc.checkpoint_path}",
              file=sys.stderr)
        return 1
    print(f"trained {cfg.mode} for {ck.epoch} epochs; checkpoints in {run_dir}")
    return 0


def cmd_sample(args) -> int:
    out = _out(args)
    model = load_checkpoint(args.checkpoint)
    ds = _load_data(args)
    indices = np.arange(args.n) % len(ds)
    kw = {} if model.mode == "uncond" else _conditions(model, ds, indices)
    images = model.sample(n=args.n, steps=args.steps, eta=args.eta, seed=args.seed, **kw)
    grid = _save_png(image_grid(images, args.ncol), out / f"{args.name}.png")
    _write_json({"checkpoint": str(args.checkpoint), "mode": model.mode,
                 "condition_source": _condition_source(model), "eta": args.eta,
                 "steps": args.steps, "seed": args.seed, "n": args.n,
                 "condition_ids": [] if model.mode == "uncond" else [ds.ids[i] for i in indices]},
                out / f"{args.name}.json")
    print(f"wrote {grid}")
    return 0


def _eval_nets(args, ds, out):
    if args.extractor and Path(args.extractor).exists():
        extractor = load_checkpoint(args.extractor)
    else:
        train = _split(ds, "train")
        extractor = FeatureExtractor(epochs=args.net_epochs, random_state=args.seed).fit(
            train.images, train.attrs)
        save_checkpoint(extractor, out / "extractor.ckpt")
    if args.segmenter and Path(args.segmenter).exists():
        segmenter = load_checkpoint(args.segmenter)
    else:
        train = _split(ds, "train")
        segmenter = MaskSegmenter(epochs=args.net_epochs, random_state=args.seed).fit(
            train.images, train.masks)
        save_checkpoint(segmenter, out / "segmenter.ckpt")
    return extractor, segmenter


def cmd_eval(args) -> int:
    out = _out(args)
    model = load_checkpoint(args.checkpoint)
    ds = _load_data(args)
    extractor, segmenter = _eval_nets(args, ds, out)
    split = _split(ds, args.split)
    report = evaluate(model, split, extractor, segmenter, n=args.n or None, steps=args.steps,
                      eta=args.eta, seed=args.seed, n_lpips_conditions=args.lpips_conditions,
                      n_lpips_samples=args.lpips_samples)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    print(report.to_json())
    return 0


def cmd_plot_weights(args) -> int:
    out = _out(args)
    s = make_schedule(args.schedule, args.timesteps, args.beta_start, args.beta_end)
    gammas = [float(g) for g in args.gammas.split(",")]
    cols = weight_profile(s, P2Config(args.k, gammas[0]))
    header = ["t", "beta", "alpha_bar", "snr", "vlb", "lambda"]
    table = [cols[h] for h in header]
    for g in gammas:
        header.append(f"lambda_p2_g{g:g}")
        table.append(weight_profile(s, P2Config(args.k, g))["lambda_p2"])
    with open(out / "weights.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*table):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {out / 'weights.csv'}")
    if args.png:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("warning: matplotlib not installed; skipping PNG", file=sys.stderr)
            return 0
        fig, ax = plt.subplots(figsize=(5, 3.5))
        lam = np.asarray(cols["lambda"])
        for name, col in zip(header[6:], table[6:]):
            ax.plot(cols["t"], np.asarray(col) / lam, label=name.replace("lambda_p2_", ""))
        ax.set_xlabel("t")
        ax.set_ylabel("weight relative to VLB")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "weights.png", dpi=120)
        plt.close(fig)
        print(f"wrote {out / 'weights.png'}")
    return 0


def cmd_mask_swap(args) -> int:
    out = _out(args)
    model = load_checkpoint(args.checkpoint)
    if model.mode not in ("mask_pooled", "mask_nopool", "multi"):
        raise ContractError(f"mask-swap needs a mask-conditioned checkpoint, got mode {model.mode!r}")
    ds = _load_data(args)
    ia = ds.index_of(args.a) if args.a else 0
    ib = ds.index_of(args.b) if args.b else 1
    parts = [p.strip() for p in args.parts.split(",") if p.strip()]
    swap = mask_component_swap(ds.masks[ia], ds.masks[ib], parts, ds.parts)
    _save_png(mask_image(ds.masks[ia]), out / "mask_a.png")
    _save_png(mask_image(ds.masks[ib]), out / "mask_b.png")
    _save_png(mask_image(swap.first), out / "mask_a_swapped.png")
    _save_png(mask_image(swap.second), out / "mask_b_swapped.png")
    for tag, mask, idx in (("a", swap.first, ia), ("b", swap.second, ib)):
        kw = {"masks": np.repeat(mask[None], args.n, axis=0)}
        if model.mode == "multi":
            kw["attributes"] = np.repeat(ds.attrs[idx][None], args.n, axis=0)
        images = model.sample(steps=args.steps, eta=args.eta, seed=args.seed, strict=False, **kw)
        _save_png(image_grid(images, args.n), out / f"samples_{tag}.png")
    summary = {"a": ds.ids[ia], "b": ds.ids[ib], "parts": parts, "mode": model.mode,
               "eta": args.eta, "steps": args.steps, "seed": args.seed, "n": args.n,
               "coherent": bool(swap.coherent),
               "conflict_pixels_a": int(swap.conflicts_first.sum()),
               "conflict_pixels_b": int(swap.conflicts_second.sum())}
    _write_json(summary, out / "swap.json")
    print(json.dumps(summary))
    return 0


def cmd_desk_run(args) -> int:
    from .experiment import DeskConfig, directional_checks, run_desk

    cfg = DeskConfig(epochs=args.epochs, lr=args.lr,
                     seeds=tuple(int(s) for s in args.seeds.split(",")))
    res = run_desk(cfg, args.out, verbose=args.verbose)
    print(json.dumps(directional_checks(res), indent=2))
    return 0


# parser -----------------------------------------------------------------------------


def _common(p, out_default):
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--config", default=None,
                   help="YAML file with flag defaults (default: %(default)s)")
    p.add_argument("--verbose", action="store_true", help="print progress (default: off)")


def _data_flags(p):
    p.add_argument("--data", default=None,
                   help="exported dataset directory; generated on the fly when omitted "
                        "(default: %(default)s)")
    p.add_argument("--n-data", type=int, default=3000,
                   help="images to generate without --data (default: %(default)s)")
    p.add_argument("--data-seed", type=int, default=0,
                   help="generator seed without --data (default: %(default)s)")
    p.add_argument("--size", type=int, default=32, help="image side (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcldm", description="Multi-conditioned latent diffusion lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="render and export the synthetic paired dataset")
    _common(p, "data")
    p.add_argument("--n", type=int, default=3000, help="number of samples (default: %(default)s)")
    p.add_argument("--size", type=int, default=32, help="image side (default: %(default)s)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-codec", help="fit the VQ autoencoder")
    _common(p, "runs")
    _data_flags(p)
    p.add_argument("--epochs", type=int, default=15, help="training epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=64, help="batch size (default: %(default)s)")
    p.add_argument("--lr", type=float, default=2e-3, help="learning rate (default: %(default)s)")
    p.add_argument("--n-codes", type=int, default=64, help="codebook size (default: %(default)s)")
    p.add_argument("--latent-channels", type=int, default=4,
                   help="latent channels (default: %(default)s)")
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train", help="train a latent diffusion model")
    _common(p, "runs")
    _data_flags(p)
    p.add_argument("--codec", default="runs/codec.ckpt", help="codec checkpoint (default: %(default)s)")
    p.add_argument("--name", default="run", help="run name, checkpoints go to OUT/NAME (default: %(default)s)")
    p.add_argument("--mode", choices=MODES, default="uncond", help="conditioning (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=20, help="training epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=64, help="batch size (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate (default: %(default)s)")
    p.add_argument("--p2-k", type=float, default=1.0, help="P2 offset k (default: %(default)s)")
    p.add_argument("--p2-gamma", type=float, default=0.5,
                   help="P2 exponent; 0 gives the unweighted loss (default: %(default)s)")
    p.add_argument("--schedule", choices=("linear", "cosine"), default="linear",
                   help="variance schedule (default: %(default)s)")
    p.add_argument("--timesteps", type=int, default=1000, help="diffusion steps T (default: %(default)s)")
    p.add_argument("--steps", type=int, default=500, help="default DDIM steps stored with the model (default: %(default)s)")
    p.add_argument("--checkpoint-every", type=int, default=1,
                   help="epochs between checkpoints (default: %(default)s)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from (default: %(default)s)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw a grid of samples with DDIM")
    _common(p, "samples")
    _data_flags(p)
    p.add_argument("--checkpoint", default="runs/run/epoch_20.ckpt",
                   help="diffusion checkpoint (default: %(default)s)")
    p.add_argument("--n", type=int, default=16, help="number of samples (default: %(default)s)")
    p.add_argument("--steps", type=int, default=500, help="DDIM steps (default: %(default)s)")
    p.add_argument("--eta", type=float, default=0.0, help="DDIM eta (default: %(default)s)")
    p.add_argument("--ncol", type=int, default=8, help="grid columns (default: %(default)s)")
    p.add_argument("--name", default="grid", help="output file stem (default: %(default)s)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint on a data split")
    _common(p, "eval")
    _data_flags(p)
    p.add_argument("--checkpoint", default="runs/run/epoch_20.ckpt",
                   help="diffusion checkpoint (default: %(default)s)")
    p.add_argument("--split", choices=("train", "val", "all"), default="val",
                   help="data split (default: %(default)s)")
    p.add_argument("--n", type=int, default=0,
                   help="samples to generate; 0 uses the whole split (default: %(default)s)")
    p.add_argument("--steps", type=int, default=500, help="DDIM steps (default: %(default)s)")
    p.add_argument("--eta", type=float, default=0.0, help="DDIM eta (default: %(default)s)")
    p.add_argument("--lpips-conditions", type=int, default=20,
                   help="conditions used for diversity (default: %(default)s)")
    p.add_argument("--lpips-samples", type=int, default=10,
                   help="samples per diversity condition (default: %(default)s)")
    p.add_argument("--extractor", default=None,
                   help="feature extractor checkpoint; trained when missing (default: %(default)s)")
    p.add_argument("--segmenter", default=None,
                   help="mask segmenter checkpoint; trained when missing (default: %(default)s)")
    p.add_argument("--net-epochs", type=int, default=6,
                   help="epochs for evaluation networks trained here (default: %(default)s)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-weights", help="tabulate and plot loss weights over t")
    _common(p, "weights")
    p.add_argument("--schedule", choices=("linear", "cosine"), default="linear",
                   help="variance schedule (default: %(default)s)")
    p.add_argument("--timesteps", type=int, default=1000, help="diffusion steps T (default: %(default)s)")
    p.add_argument("--beta-start", type=float, default=1e-4, help="first beta (default: %(default)s)")
    p.add_argument("--beta-end", type=float, default=2e-2, help="last beta (default: %(default)s)")
    p.add_argument("--k", type=float, default=1.0, help="P2 offset k (default: %(default)s)")
    p.add_argument("--gammas", default="0,0.5,1", help="comma-separated P2 exponents (default: %(default)s)")
    p.add_argument("--png", action="store_true", help="also write weights.png (needs matplotlib; default: off)")
    p.set_defaults(func=cmd_plot_weights)

    p = sub.add_parser("mask-swap", help="swap mask parts between two samples and condition on them")
    _common(p, "swap")
    _data_flags(p)
    p.add_argument("--checkpoint", default="runs/run/epoch_20.ckpt",
                   help="mask-conditioned diffusion checkpoint (default: %(default)s)")
    p.add_argument("--a", default=None, help="first sample id; first sample when omitted (default: %(default)s)")
    p.add_argument("--b", default=None, help="second sample id; second sample when omitted (default: %(default)s)")
    p.add_argument("--parts", default="eyes,mouth",
                   help=f"comma-separated parts from {','.join(PARTS)} (default: %(default)s)")
    p.add_argument("--n", type=int, default=4, help="samples per swapped mask (default: %(default)s)")
    p.add_argument("--steps", type=int, default=500, help="DDIM steps (default: %(default)s)")
    p.add_argument("--eta", type=float, default=0.0, help="DDIM eta (default: %(default)s)")
    p.set_defaults(func=cmd_mask_swap, n_data=64)

    p = sub.add_parser("desk-run", help="train and score every mode over several seeds")
    _common(p, "runs/desk")
    p.add_argument("--epochs", type=int, default=20, help="diffusion epochs (default: %(default)s)")
    p.add_argument("--lr", type=float, default=1e-3, help="diffusion learning rate (default: %(default)s)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default: %(default)s)")
    p.set_defaults(func=cmd_desk_run)

    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` when one is given."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = load_config(args.config)
    section = cfg.get(args.command, cfg)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in section.items() if not isinstance(v, dict)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"{args.config}: unknown keys for {args.command}: {sorted(unknown)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    except ConfigurationError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected: keep the traceback for diagnosis
        traceback.print_exc()
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
