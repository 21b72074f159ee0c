"""Command-line entry point: train, infer, eval, gradcheck, ablate, stats, synth.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data_io import (
    ManifestDataset,
    SynthDataset,
    load_image,
    open_dataset,
    parse_data_spec,
    restore_model,
    save_checkpoint,
    save_image,
    write_manifest,
)
from .errors import CheckpointError, ConfigError, ImageFormatError, NumericalError, ShapeError
from .network import ModelConfig, ParamStore, build_model, count_flops
from .tensor import Tensor, no_grad, pad
from .training import EpochRecord, LossWeights, ScheduleConfig, ValReport, evaluate, fit, metric_psnr, metric_ssim

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

VARIANTS = ("full", "-OAIBlock", "-HDDAConv", "-HDCTransformer", "-DoubleOut", "UNet-baseline")
VAL_SEED_OFFSET = 1_000_003


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------

def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _threads():
    raw = os.environ.get("MMSHR_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext(), None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MMSHR_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n), n


def _model_config(args, default_preset: str) -> ModelConfig:
    if args.config:
        try:
            return ModelConfig.from_text(Path(args.config).read_text())
        except OSError as exc:
            raise ImageFormatError(f"cannot read config {args.config}: {exc}") from exc
        except (ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"invalid config file {args.config}: {exc}") from exc
    preset = args.preset or default_preset
    return ModelConfig.desk() if preset == "desk" else ModelConfig()


def _write_header(out: Path, command: str, seed: int, cfg: ModelConfig | None, argv: Sequence[str],
                  threads: int | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        ("command", command),
        ("argv", " ".join(argv)),
        ("seed", str(seed)),
        ("config_hash", cfg.digest() if cfg is not None else "-"),
        ("config", cfg.to_text() if cfg is not None else "-"),
        ("version", __version__),
        ("numpy", np.__version__),
        ("threads", str(threads) if threads else "default"),
    ]
    (out / "run_header.tsv").write_text("key\tvalue\n" + "".join(f"{k}\t{v}\n" for k, v in rows))


def _split_data(spec: str, seed: int, val_count: int):
    """Training arrays plus a held-out validation set.

    Synthetic specs draw validation pairs from an independent seed stream;
    manifests hold out their last tenth (at least one pair).
    """
    kind, info = parse_data_spec(spec)
    if kind == "synth":
        train = SynthDataset(info["n"], info["h"], info["w"], seed=seed)
        # clean pairs have an unbounded input-vs-GT PSNR, so validation uses highlighted pairs only
        val = SynthDataset(val_count, info["h"], info["w"], seed=seed + VAL_SEED_OFFSET, empty_every=0)
        return train.materialize(), val.materialize()
    ds = ManifestDataset(info["path"])
    inputs, gts = ds.materialize()
    k = max(1, len(ds) // 10)
    if len(ds) < 2:
        raise ConfigError("a manifest needs at least two pairs to hold one out for validation")
    return (inputs[:-k], gts[:-k]), (inputs[-k:], gts[-k:])


@dataclass
class TrainOutcome:
    history: list[EpochRecord]
    report: ValReport
    store: ParamStore
    optimizer: object
    cfg: ModelConfig


def run_training(cfg: ModelConfig, data: str, epochs: int, batch: int, lr_max: float, lr_min: float,
                 seed: int, val_count: int = 32, log=None) -> TrainOutcome:
    (tx, ty), (vx, vy) = _split_data(data, seed, val_count)
    store, model = build_model(cfg, seed)
    sched = ScheduleConfig(lr_max=lr_max, lr_min=lr_min, total_epochs=epochs, batch=batch)

    def on_epoch(rec: EpochRecord):
        if log is not None:
            log(rec.row())

    if log is not None:
        log(EpochRecord.header())
    history, report, opt = fit(model, tx, ty, vx, vy, sched, LossWeights(), seed=seed, on_epoch=on_epoch)
    return TrainOutcome(history, report, ParamStore.from_module(model), opt, cfg)


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    types = list(base.level_types)
    if name == "full":
        return base
    if name == "-OAIBlock":
        types[0] = "plain"
    elif name == "-HDDAConv":
        types[1] = "plain"
    elif name == "-HDCTransformer":
        types[2] = types[3] = "plain"
    elif name == "-DoubleOut":
        return base.with_(double_out=False)
    elif name == "UNet-baseline":
        return base.with_(level_types=("plain",) * 4, double_out=False)
    else:
        raise UsageError(f"unknown ablation variant {name!r}; choose from {', '.join(VARIANTS)}")
    return base.with_(level_types=tuple(types))


# -- commands ----------------------------------------------------------

def cmd_train(args, argv, threads) -> int:
    cfg = _model_config(args, "desk")
    out = Path(args.out)
    _write_header(out, "train", args.seed, cfg, argv, threads)
    log_path = out / "train_log.tsv"
    with log_path.open("w") as fh:
        def log(line):
            fh.write(line + "\n")
            fh.flush()
            print(line)

        res = run_training(cfg, args.data, args.epochs, args.batch, args.lr_max, args.lr_min,
                           args.seed, args.val, log)
    save_checkpoint(res.store, res.optimizer.state, cfg, out / "model.ckpt")
    rep = res.report
    summary = [
        ("val_psnr", rep.psnr), ("val_ssim", rep.ssim), ("input_psnr", rep.input_psnr),
        ("decomposition_error", rep.decomposition_error), ("residual_mean", rep.residual_mean),
    ]
    (out / "summary.tsv").write_text("metric\tvalue\n" + "".join(f"{k}\t{v:.8g}\n" for k, v in summary))
    return EXIT_OK


def _pad8(image: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = image.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    if ph == 0 and pw == 0:
        return image, (h, w)
    mode = "reflect" if ph < h and pw < w else "cyclic"
    return pad(Tensor(image[None]), ((0, ph), (0, pw)), mode).data[0], (h, w)


def _predict(model, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    padded, (h, w) = _pad8(image.astype(np.float32))
    with no_grad():
        out1, out2 = model(Tensor(padded[None]))
    return out1.data[0, :, :h, :w], out2.data[0, :, :h, :w]


def cmd_infer(args, argv, threads) -> int:
    if not args.checkpoint or not args.input:
        raise UsageError("infer needs --checkpoint and --input")
    model, _, _, cfg = restore_model(args.checkpoint)
    model.eval()
    out = Path(args.out)
    _write_header(out, "infer", args.seed, cfg, argv, threads)
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    elif src.exists():
        files = [src]
    else:
        raise ImageFormatError(f"input {src} does not exist")
    if not files:
        raise ImageFormatError(f"no .png/.ppm files in {src}")
    for path in files:
        clean, residual = _predict(model, load_image(path))
        save_image(clean, out / f"{path.stem}_clean.png")
        save_image(residual, out / f"{path.stem}_residual.png")
        print(f"{path.name}\t{out / (path.stem + '_clean.png')}\t{out / (path.stem + '_residual.png')}")
    return EXIT_OK


def cmd_eval(args, argv, threads) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model, _, _, cfg = restore_model(args.checkpoint)
    model.eval()
    out = Path(args.out)
    _write_header(out, "eval", args.seed, cfg, argv, threads)
    ds = open_dataset(args.data, seed=args.seed)
    rows = ["image\tpsnr\tssim"]
    scores = []
    for i in range(len(ds)):
        pair = ds[i]
        clean, _ = _predict(model, pair.input)
        p, s = metric_psnr(clean, pair.gt), metric_ssim(clean, pair.gt)
        scores.append((p, s))
        rows.append(f"{ds.name(i)}\t{p:.4f}\t{s:.4f}")
    arr = np.asarray(scores)
    rows.append(f"mean\t{arr[:, 0].mean():.4f}\t{arr[:, 1].mean():.4f}")
    text = "\n".join(rows) + "\n"
    (out / "eval.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args, argv, threads) -> int:
    from .gradcheck import run_suite

    out = Path(args.out)
    _write_header(out, "gradcheck", args.seed, None, argv, threads)
    names = [n for n in args.only.split(",") if n] if args.only else None
    results = run_suite(names, n_coords=args.coords, seed=args.seed)
    if not results:
        raise UsageError(f"no gradcheck matches {args.only!r}")
    lines = ["operator\tmax_rel_err\tcoords\tskipped\tresult"] + [r.row() for r in results]
    text = "\n".join(lines) + "\n"
    (out / "gradcheck.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_ablate(args, argv, threads) -> int:
    base = _model_config(args, "desk")
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    configs = [(n, variant_config(base, n)) for n in names]
    out = Path(args.out)
    _write_header(out, "ablate", args.seed, base, argv, threads)
    lines = ["variant\tparams\tval_psnr\tval_ssim\tinput_psnr"]
    print(lines[0])
    for name, cfg in configs:
        vdir = out / name.lstrip("-").lower()
        vdir.mkdir(parents=True, exist_ok=True)
        with (vdir / "train_log.tsv").open("w") as fh:
            def log(line, fh=fh):
                fh.write(line + "\n")
                fh.flush()

            res = run_training(cfg, args.data, args.epochs, args.batch, args.lr_max, args.lr_min,
                               args.seed, args.val, log)
        save_checkpoint(res.store, res.optimizer.state, cfg, vdir / "model.ckpt")
        r = res.report
        line = f"{name}\t{res.store.count()}\t{r.psnr:.4f}\t{r.ssim:.4f}\t{r.input_psnr:.4f}"
        lines.append(line)
        print(line, flush=True)
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_stats(args, argv, threads) -> int:
    cfg = _model_config(args, "full")
    h, w = args.size
    if h % 8 or w % 8:
        raise UsageError(f"--size {h}x{w} must be divisible by 8")
    store, _ = build_model(cfg, args.seed)
    flops = count_flops(cfg, h, w)
    out = Path(args.out)
    _write_header(out, "stats", args.seed, cfg, argv, threads)
    text = ("metric\tvalue\n"
            f"params\t{store.count()}\n"
            f"params_M\t{store.count() / 1e6:.2f}\n"
            f"flops\t{flops}\n"
            f"flops_G\t{flops / 1e9:.2f}\n"
            f"input\t1x{cfg.input_channels}x{h}x{w}\n")
    (out / "stats.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args, argv, threads) -> int:
    kind, _ = parse_data_spec(args.data)
    if kind != "synth":
        raise UsageError("synth needs --data synth:N,HxW")
    out = Path(args.out)
    _write_header(out, "synth", args.seed, None, argv, threads)
    manifest = write_manifest(open_dataset(args.data, seed=args.seed), out)
    print(manifest)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "stats": cmd_stats,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmshr", description="Specular highlight removal at desk scale.")
    parser.add_argument("--version", action="version", version=f"mmshr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def shared(p, preset=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="ModelConfig text file (JSON)")
        p.add_argument("--out", default="mmshr_out", help="output directory")
        if preset:
            p.add_argument("--preset", choices=("desk", "full"),
                           help="model size when --config is absent")

    def training_flags(p):
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--batch", type=int, default=8)
        p.add_argument("--lr-max", type=float, default=1e-3)
        p.add_argument("--lr-min", type=float, default=1e-5)
        p.add_argument("--data", default="synth:200,64x64", help="manifest path or synth:N,HxW")
        p.add_argument("--val", type=int, default=32, help="validation pairs for synthetic data")

    p = sub.add_parser("train", help="train a model (default: desk preset)")
    shared(p)
    training_flags(p)

    p = sub.add_parser("infer", help="write *_clean.png and *_residual.png per input")
    shared(p, preset=False)
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="image file or directory")

    p = sub.add_parser("eval", help="PSNR/SSIM table over a dataset")
    shared(p, preset=False)
    p.add_argument("--checkpoint")
    p.add_argument("--data", default="synth:32,64x64")

    p = sub.add_parser("gradcheck", help="finite-difference checks of every operator and block")
    shared(p, preset=False)
    p.add_argument("--only", help="comma-separated subset of check names")
    p.add_argument("--coords", type=int, default=32)

    p = sub.add_parser("ablate", help="train each variant and tabulate validation metrics")
    shared(p)
    training_flags(p)
    p.add_argument("--variants", default=",".join(VARIANTS))

    p = sub.add_parser("stats", help="parameter count and analytic FLOPs (default: full preset)")
    shared(p)
    p.add_argument("--size", type=_size, default=(256, 256))

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    shared(p, preset=False)
    p.add_argument("--data", default="synth:200,64x64")
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        limiter, threads = _threads()
        with limiter:
            return COMMANDS[args.command](args, argv, threads)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ShapeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ImageFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())
