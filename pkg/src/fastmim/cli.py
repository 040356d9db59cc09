"""Command-line entry point wiring configs to the library modules.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, imageio, masking, objective
from . import hog as hog_mod
from . import tensor as T
from .config import PRESET_NAMES, ConfigError, RunConfig, preset
from .hog import HogConfig, HogConfigError
from .imageio import IngestionError
from .masking import MaskConfig, MaskConfigError
from .models import ModelConfigError
from .tensor import NumericError

VALIDATION_ERRORS = (ConfigError, MaskConfigError, ModelConfigError,
                     HogConfigError, IngestionError, ValueError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    p = _Parser(prog="fastmim", description=__doc__)
    p.add_argument("--dump-defaults", action="store_true",
                   help="print the default config as TOML and exit")
    sub = p.add_subparsers(dest="command")

    def add_config(sp):
        sp.add_argument("--config", required=True, help="TOML run config")

    sp = sub.add_parser("pretrain", help="fixed-resolution pre-training")
    add_config(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")

    sp = sub.add_parser("pretrain-p", help="progressive-resolution pre-training")
    add_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", default=None)

    sp = sub.add_parser("hog", help="extract a HOG field from a PPM image")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bins", type=int, default=9)
    sp.add_argument("--cell", type=int, default=8)
    sp.add_argument("--signed", action="store_true",
                    help="signed (360 degree) orientation")
    sp.add_argument("--gray", action="store_true",
                    help="single-channel HOG on the channel mean")

    sp = sub.add_parser("maskviz", help="write the masked image as PPM")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mask-size", type=int, default=16)
    sp.add_argument("--ratio", type=float, default=0.75)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--token", default="0.5,0.5,0.5",
                    help="fill value r,g,b in [0,1]")

    sp = sub.add_parser("bench", help="cost model / throughput / kernel bench")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--model-only", action="store_true",
                      help="analytic cost model")
    mode.add_argument("--measure", action="store_true",
                      help="timed pre-training steps")
    mode.add_argument("--kernels", action="store_true",
                      help="compare numba and numpy kernel backends")
    sp.add_argument("--preset", default="isotropic-base", choices=PRESET_NAMES)
    sp.add_argument("--resolutions", default="224,128",
                    help="hi,lo resolutions for --model-only")
    sp.add_argument("--config", default=None, help="run config for --measure")
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--format", default="text", choices=("text", "csv"))
    sp.add_argument("--out", default=None, help="write the report to a file")

    sp = sub.add_parser("reconstruct",
                        help="predictions + PSNR/SSIM against targets")
    add_config(sp)
    sp.add_argument("--ckpt", default=None, help="checkpoint (default: fresh init)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--step", type=int, default=0,
                    help="pipeline step index used to form the batch")

    sp = sub.add_parser("stats", help="dataset per-channel mean/std")
    add_config(sp)
    return p


# ---------------------------------------------------------------------------
# subcommands

def _cmd_pretrain(args, progressive: bool) -> int:
    from . import trainer

    cfg = RunConfig.load(args.config)
    cfg.validate()
    if progressive and len(cfg.schedule.stages) < 2:
        print("note: single-stage schedule; identical to plain pretrain", file=sys.stderr)
    if not progressive and len(cfg.schedule.stages) != 1:
        raise ConfigError("pretrain needs a single-stage schedule; use pretrain-p")
    run = trainer.pretrain_progressive if progressive else trainer.pretrain
    loop = run(cfg, out_dir=args.out, resume=args.resume)
    final = loop.metrics[-1] if loop.metrics else {}
    print(f"done: {cfg.total_steps} steps, digest {loop.digest}, "
          f"final loss {final.get('loss', float('nan')):.6f}")
    return 0


def _cmd_hog(args) -> int:
    img = imageio.read_ppm(args.input)
    cfg = HogConfig(bins=args.bins, cell=args.cell,
                    unsigned_orientation=not args.signed,
                    per_channel=not args.gray)
    field = hog_mod.hog_extract(img, cfg)
    data = field.data[0]
    with open(args.out, "wb") as f:
        f.write(f"hogfield bins={cfg.bins} cell={cfg.cell} "
                f"channels={cfg.channels} grid={data.shape[0]}x{data.shape[1]}\n".encode())
        T.dump_tensor(f, data)
    print(f"wrote {args.out}: grid {data.shape[0]}x{data.shape[1]}, "
          f"{data.shape[2]} values/cell")
    return 0


def read_hog_dump(path):
    """Read a `hog` subcommand dump: (header dict, field array)."""
    with open(path, "rb") as f:
        header = f.readline().decode().strip().split()
        if not header or header[0] != "hogfield":
            raise IngestionError(f"{path}: not a hogfield dump")
        meta = dict(kv.split("=", 1) for kv in header[1:])
        return meta, T.read_tensor(f)


def _cmd_maskviz(args) -> int:
    img = imageio.read_ppm(args.input)
    h, w = img.shape[1:]
    if h != w:
        raise ConfigError(f"maskviz needs a square image, got {w}x{h}")
    cfg = MaskConfig(mask_size=args.mask_size, ratio=args.ratio)
    mask = masking.sample_mask(1, h, cfg, args.seed)
    token_rgb = [float(v) for v in args.token.split(",")]
    if len(token_rgb) != 3:
        raise ConfigError("--token needs r,g,b")
    token = masking.MaskToken.image_level(learnable=False, init=token_rgb)
    out = masking.apply_mask(np.asarray(img)[None], mask, token)
    imageio.write_ppm(args.out, out.data[0])
    print(f"wrote {args.out}: masked {int(mask.masked_count[0])} of {mask.blocks} blocks")
    return 0


def _cmd_bench(args) -> int:
    if args.kernels:
        rows = bench.kernel_bench()
    elif args.model_only:
        cfg = preset(args.preset)
        enc = cfg.model.encoder_config()
        dec = cfg.model.decoder_config()
        hi, lo = (int(r) for r in args.resolutions.split(","))
        rows = [r.to_row() for r in
                bench.compare_regimes(enc, dec, hi, lo, cfg.mask.ratio)]
    else:
        if args.config is None:
            raise ConfigError("--measure needs --config")
        cfg = RunConfig.load(args.config)
        cfg.validate()
        rows = [bench.throughput_run(cfg, args.steps, args.warmup)]
    text = bench.emit_rows(rows, args.format, path=args.out)
    if args.out is None:
        print(text, end="")
    else:
        print(f"wrote {args.out}")
    return 0


def _cmd_reconstruct(args) -> int:
    from .trainer import PretrainLoop

    cfg = RunConfig.load(args.config)
    cfg.validate()
    loop = PretrainLoop(cfg, out_dir=None, resume=args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    batch, mask = loop.build_batch(args.step)
    target = objective.extract_targets(batch, mask, cfg.target.kind,
                                       hog_cfg=cfg.target.hog_config(),
                                       norm_stats=loop.stats)
    pred = loop.forward(batch, mask).data
    with open(out_dir / "predictions.bin", "wb") as f:
        T.dump_tensor(f, pred)

    rows = []
    if cfg.target.kind == "pixel":
        recon = objective.scatter_pixel_prediction(batch.data, mask, pred, loop.stats)
        masked_img = masking.apply_mask(
            np.asarray(batch.data),
            mask, masking.MaskToken.image_level(learnable=False, init=[0.5, 0.5, 0.5]))
        for i in range(batch.data.shape[0]):
            imageio.write_ppm(out_dir / f"orig_{i}.ppm", batch.data[i])
            imageio.write_ppm(out_dir / f"masked_{i}.ppm", masked_img.data[i])
            imageio.write_ppm(out_dir / f"recon_{i}.ppm", np.clip(recon[i], 0, 1))
            rows.append({
                "sample": i,
                "psnr": hog_mod.similarity_report(recon[i], batch.data[i], "psnr"),
                "ssim": hog_mod.similarity_report(recon[i], batch.data[i], "ssim"),
            })
    else:
        field = hog_mod.hog_extract(batch.data, cfg.target.hog_config()).data
        recon = objective.scatter_hog_prediction(field, mask, pred,
                                                 cfg.target.hog_config())
        for i in range(field.shape[0]):
            rows.append({
                "sample": i,
                "psnr": hog_mod.similarity_report(recon[i], field[i], "psnr"),
                "ssim": hog_mod.similarity_report(recon[i], field[i], "ssim",
                                                  channel_axis=-1),
            })
    text = bench.emit_rows(rows, "text", path=out_dir / "report.txt")
    print(text, end="")
    return 0


def _cmd_stats(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.validate(for_training=False)
    dataset = imageio.load_dataset(cfg.data.root or None, cfg.data.format,
                                   seed=cfg.data.seed, count=cfg.data.count,
                                   resolution=cfg.data.resolution)
    stats = imageio.compute_norm_stats(dataset)
    print("mean =", ",".join(f"{v:.6f}" for v in stats.mean))
    print("std =", ",".join(f"{v:.6f}" for v in stats.std))
    return 0


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.dump_defaults:
            print(RunConfig().to_toml(), end="")
            return 0
        if args.command is None:
            print(parser.format_usage(), end="", file=sys.stderr)
            return 1
        if args.command == "pretrain":
            return _cmd_pretrain(args, progressive=False)
        if args.command == "pretrain-p":
            return _cmd_pretrain(args, progressive=True)
        if args.command == "hog":
            return _cmd_hog(args)
        if args.command == "maskviz":
            return _cmd_maskviz(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "reconstruct":
            return _cmd_reconstruct(args)
        if args.command == "stats":
            return _cmd_stats(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
