"""Command line interface.

Subcommands: train, eval, compress, decompress, decompose, baseline,
inspect-tokens. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric fault.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, baselines, codec, plots
from .backbone import NumericFault
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import DataError, ImageDataset, load_dataset
from .model import QGVAE, build_model
from .train import evaluate, fit, init_state, load_checkpoint, load_model, set_deterministic

log = logging.getLogger("qgvae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. model.num_tokens=32 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--device", default=None)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qgvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", help="PSNR/SSIM/MSE on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", help="omit to evaluate a freshly initialised model")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int)

    p = sub.add_parser("compress", help="image -> token file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or DATASET:SPLIT:INDEX")

    p = sub.add_parser("decompress", help="token file -> image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="token file")

    p = sub.add_parser("decompose", help="reconstructions from the first k tokens")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or DATASET:SPLIT:INDEX")
    p.add_argument("--ks", default="0,8,16,32,64", help="comma-separated token counts")

    p = sub.add_parser("baseline", help="DFT / Laplacian pyramid rate-distortion curves")
    _common(p)
    p.add_argument("--input", default="mnist:test",
                   help="DATASET:SPLIT, an image directory, or an image file")
    p.add_argument("--n-images", type=int, default=16)
    p.add_argument("--levels", type=int, default=3)

    p = sub.add_parser("inspect-tokens", help="feature-map dump and single-token influence map")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or DATASET:SPLIT:INDEX")
    p.add_argument("--replace", type=int, default=0, help="token whose replacements are probed")
    p.add_argument("--threshold", type=float, default=0.01,
                   help="change counted when above this fraction of the value range")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.device is not None:
        cfg.train.device = args.device
    if args.deterministic is not None:
        cfg.train.deterministic = args.deterministic
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_image(spec: str, cfg, root=None) -> torch.Tensor:
    """``[1, channels, W, H]`` from an image file or ``DATASET:SPLIT:INDEX``."""
    path = Path(spec)
    if path.is_file():
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("L" if cfg.input_channels == 1 else "RGB"))
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        ds = ImageDataset(torch.from_numpy(arr.copy())[None], cfg.value_range)
        x = ds.get(slice(0, 1))
    else:
        parts = spec.split(":")
        if len(parts) != 3:
            raise DataError(f"{spec!r} is neither an image file nor DATASET:SPLIT:INDEX")
        ds = load_dataset(parts[0], parts[1], root, cfg.value_range)
        i = int(parts[2])
        if not 0 <= i < len(ds):
            raise DataError(f"index {i} outside dataset of {len(ds)} images")
        x = ds.get(slice(i, i + 1))
    if tuple(x.shape[1:]) != (cfg.input_channels, *cfg.image_size):
        raise DataError(f"image shape {list(x.shape[1:])} does not match model "
                        f"{[cfg.input_channels, *cfg.image_size]}")
    return x


def cmd_train(args) -> int:
    if args.resume:
        state = load_checkpoint(args.resume, args.device)
        cfg = state.cfg
    else:
        cfg = _run_config(args)
        state = init_state(cfg)
    out = _out_dir(args, "runs/train")
    dump_config(cfg, out / "config.yaml")
    t = cfg.train
    train_ds = load_dataset(t.dataset, "train", t.data_dir, cfg.model.value_range, t.train_limit)
    test_ds = load_dataset(t.dataset, "test", t.data_dir, cfg.model.value_range, t.test_limit)
    record = fit(state, train_ds, test_ds, out, max_steps=args.max_steps)
    plots.training_curves(out / "metrics.jsonl", out / "training_curves")
    if record:
        print(f"epoch {record['epoch']}: psnr {record['psnr']:.2f} dB  "
              f"ssim {record['ssim']:.4f}  mse {record['mse']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.checkpoint:
        model = load_model(args.checkpoint, args.device or "cpu")
        cfg = load_checkpoint_config(args.checkpoint)
        if args.override or args.config:
            extra = load_config(args.config, args.override)
            cfg.train = extra.train
    else:
        cfg = _run_config(args)
        if cfg.train.deterministic:
            set_deterministic(True)
        torch.manual_seed(cfg.train.seed)
        model = build_model(cfg.model).to(cfg.train.device)
    t = cfg.train
    ds = load_dataset(t.dataset, args.split, t.data_dir, cfg.model.value_range,
                      args.limit if args.limit is not None else t.test_limit)
    rec = evaluate(model, ds, t.eval_batch_size, t.device)
    out = _out_dir(args, "runs/eval")
    plots.write_csv(out / "eval.csv", ["split", "n", "psnr", "ssim", "mse"],
                    [[args.split, rec["n"], rec["psnr"], rec["ssim"], rec["mse"]]])
    x = ds.get(slice(0, min(8, len(ds))))
    with torch.no_grad():
        model.eval()
        x_hat = model(x.to(t.device)).x_hat.cpu()
    plots.image_row(out / "samples", [*x.numpy(), *x_hat.numpy()],
                    [*(["input"] * len(x)), *(["output"] * len(x))], cfg.model.value_range)
    print(f"{'split':<8}{'n':>8}{'psnr':>10}{'ssim':>10}{'mse':>12}")
    print(f"{args.split:<8}{rec['n']:>8}{rec['psnr']:>10.3f}{rec['ssim']:>10.4f}"
          f"{rec['mse']:>12.6f}")
    return EXIT_OK


def load_checkpoint_config(path) -> RunConfig:
    obj = torch.load(path, map_location="cpu", weights_only=False)
    return RunConfig.from_dict(obj["config"])


def cmd_compress(args) -> int:
    model = load_model(args.checkpoint, args.device or "cpu")
    cfg = load_checkpoint_config(args.checkpoint)
    x = _load_image(args.input, model.cfg, cfg.train.data_dir)
    tf = codec.compress(x, model)
    out = Path(args.out or "tokens.qgvt")
    out.parent.mkdir(parents=True, exist_ok=True)
    codec.write_token_file(out, tf)
    print(f"{out}: {tf.num_tokens} tokens, {len(tf.to_bytes()) - codec.HEADER_SIZE} "
          f"payload bytes (+{codec.HEADER_SIZE} header)")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = load_model(args.checkpoint, args.device or "cpu")
    tf = codec.read_token_file(args.input)
    img = codec.decompress(tf, model)[0].cpu()
    out = Path(args.out or "decoded.png")
    np.save(out.with_suffix(".npy"), img.numpy())
    plots.save_image(out.with_suffix(".png"), img.numpy(), model.cfg.value_range)
    print(f"wrote {out.with_suffix('.png')} and {out.with_suffix('.npy')}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    model = load_model(args.checkpoint, args.device or "cpu")
    cfg = load_checkpoint_config(args.checkpoint)
    if not isinstance(model, QGVAE):
        raise UsageError("decompose needs a global-token (qgvae) checkpoint")
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError as e:
        raise UsageError(f"bad --ks: {e}") from e
    for k in ks:
        if not 0 <= k <= model.cfg.num_tokens:
            raise UsageError(f"k={k} outside [0, {model.cfg.num_tokens}]")
    x = _load_image(args.input, model.cfg, cfg.train.data_dir)
    outs = analysis.decompose(model, x, ks)
    out = _out_dir(args, "runs/decompose")
    vr = model.cfg.value_range
    rows = []
    for k, img in zip(ks, outs):
        plots.save_image(out / f"k{k:04d}.png", img[0].numpy(), vr)
        rows.append([k, float(((img - x) ** 2).mean())])
    plots.write_csv(out / "decompose.csv", ["k", "mse"], rows)
    plots.image_row(out / "decompose", [x[0].numpy(), *[o[0].numpy() for o in outs]],
                    ["input", *[f"{k} tokens" for k in ks]], vr)
    for k, mse in rows:
        print(f"k={k:<5d} mse={mse:.6f}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _run_config(args)
    spec = Path(args.input)
    if spec.is_file():
        from PIL import Image

        with Image.open(spec) as im:
            images = np.asarray(im.convert("L"), dtype=np.float64)[None] / 255.0
    else:
        if spec.is_dir():
            ds = load_dataset(str(spec), value_range=(0.0, 1.0), limit=args.n_images, channels=1)
        else:
            name, _, split = args.input.partition(":")
            ds = load_dataset(name, split or "test", cfg.train.data_dir, (0.0, 1.0),
                              limit=args.n_images)
        images = ds.get(slice(0, args.n_images)).mean(1).double().numpy()
    groups = baselines.num_frequency_groups(images.shape[1:])
    ns = sorted({int(round(v)) for v in np.geomspace(1, groups, 24)} | {0})
    dft = baselines.dft_curve(images, ns)
    lap = baselines.laplacian_curve(images, args.levels)
    out = _out_dir(args, "runs/baseline")
    plots.curves(out / "dft_curve", "kept frequency groups", "mse", {"DFT": (ns, dft)},
                 logy=True)
    plots.curves(out / "laplacian_curve", "kept band-pass levels", "mse",
                 {"Laplacian": (list(range(args.levels + 1)), lap)}, logy=True)
    print(f"DFT: {len(ns)} points, mse {dft[0]:.5f} -> {dft[-1]:.2e}")
    print(f"Laplacian: mse by kept levels {', '.join(f'{v:.5f}' for v in lap)}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.checkpoint, args.device or "cpu")
    cfg = load_checkpoint_config(args.checkpoint)
    if not 0 <= args.replace < model.tokens_per_image:
        raise UsageError(f"--replace must be in [0, {model.tokens_per_image})")
    x = _load_image(args.input, model.cfg, cfg.train.data_dir)
    out = _out_dir(args, "runs/inspect")
    maps = analysis.feature_map_dump(model, x)
    np.save(out / "feature_maps.npy", maps.numpy())
    plots.feature_map_grid(out / "feature_maps", maps.numpy())
    delta = analysis.token_influence(model, x, args.replace)
    thr = args.threshold * model.cfg.data_range
    cover = analysis.influence_coverage(delta, thr)
    plots.influence_map(out / f"influence_token{args.replace}", x[0].numpy(), delta.numpy(), thr,
                        model.cfg.value_range, f"token {args.replace}: {cover:.0%} of pixels")
    print(f"token {args.replace}: mean change exceeds {thr:.4f} on {cover:.1%} of pixels")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "compress": cmd_compress,
            "decompress": cmd_decompress, "decompose": cmd_decompose,
            "baseline": cmd_baseline, "inspect-tokens": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"qgvae: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:   # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"qgvae: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as e:
        print(f"qgvae: numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, codec.CodecError, FileNotFoundError, OSError) as e:
        print(f"qgvae: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
