"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datagen, imgproc
from .autodiff.tensor import ContractError
from .config import ConfigError, RunConfig
from .imgproc import Distortion, Image
from .metrics import evaluate, write_report
from .model import ForgeryNet

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_config(path, overrides) -> RunConfig:
    cfg = RunConfig.from_text(Path(path).read_text()) if path else RunConfig()
    for key, value in overrides:
        cfg.set(key, value)
    return cfg


def _split_overrides(extra) -> list:
    """Turn leftover ``--key value`` tokens into pairs."""
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"missing value for {tok}") from None
        pairs.append((key, value))
    return pairs


def _write_run_json(out_dir: Path, command: str, cfg: RunConfig, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.as_dict(), **extra}
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _model_from_checkpoint(ckpt: Path, config_path=None) -> ForgeryNet:
    cfg_path = Path(config_path) if config_path else ckpt.parent / "config.txt"
    if not cfg_path.exists():
        raise ConfigError(f"no model config found at {cfg_path}")
    cfg = RunConfig.from_text(cfg_path.read_text())
    model = ForgeryNet(cfg.model_config(), seed=cfg.seed or 0)
    model.load(ckpt)
    return model


def _parse_distortions(text) -> list:
    if not text:
        return []
    try:
        return [Distortion.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise UsageError("gen-data requires --seed")
    ds = datagen.make_dataset(cfg.n_samples, cfg.seed, mix=cfg.mix, bucket=cfg.bucket,
                              size=cfg.input_size)
    split_dir = datagen.save_dataset(ds, args.out, args.split)
    _write_run_json(split_dir, "gen-data", cfg, n=len(ds))
    print(f"wrote {len(ds)} samples to {split_dir}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    from .train import train

    if cfg.seed is None:
        raise UsageError("train requires --seed")
    if not cfg.train_data:
        raise UsageError("train requires train_data (a dataset split directory)")
    samples = datagen.load_dataset(cfg.train_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    _write_run_json(out, "train", cfg)
    result = train(cfg, samples, out_dir=out, verbose=args.verbose)
    print(f"trained {len(result.log)} steps, final loss {result.final_loss:.6f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    distortions = _parse_distortions(args.distort)
    model = _model_from_checkpoint(Path(args.checkpoint), args.config)
    data = args.data or cfg.val_data
    if not data:
        raise UsageError("eval requires --data or val_data")
    samples = datagen.load_dataset(data)
    report = evaluate(model, samples, distortions, pooled=args.pooled, threads=cfg.threads)
    out = Path(args.out)
    write_report(report, out)
    _write_run_json(out, "eval", cfg, checkpoint=str(args.checkpoint), data=str(data),
                    distortions=[d.tag for d in distortions], pooled=args.pooled)
    for s in report.summaries():
        if s.scope == "all":
            print(f"{s.distortion}\tauc={s.auc:.4f}\tf1={s.f1:.4f}\tiou={s.iou:.4f}\tn={s.n}")
    return EXIT_OK


def cmd_localize(args, cfg: RunConfig) -> int:
    model = _model_from_checkpoint(Path(args.checkpoint), args.config)
    image = imgproc.read_image(args.image)
    if image.channels != 3:
        image = Image(np.repeat(image.data, 3, axis=2))
    s = model.cfg.input_size
    if (image.height, image.width) != (s, s):
        raise ContractError(f"image is {image.height}×{image.width} but the checkpoint "
                            f"expects {s}×{s}")
    imgproc.write_image(Image(model.predict_full(image)), args.out)
    return EXIT_OK


def cmd_noise(args, cfg: RunConfig) -> int:
    image = imgproc.read_image(args.image)
    if image.channels != 3:
        image = Image(np.repeat(image.data, 3, axis=2))
    res = imgproc.guided_noise(image, r=args.r, eps=args.eps)
    imgproc.write_image(res.guided_noise, args.out)
    sidecar = Path(str(args.out) + ".json")
    sidecar.write_text(json.dumps({"r": args.r, "eps": args.eps, "source": str(args.image)},
                                  indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_distort(args, cfg: RunConfig) -> int:
    d = _parse_distortions(args.spec)
    if len(d) != 1:
        raise UsageError("distort takes exactly one kind:value spec")
    image = imgproc.read_image(args.image)
    imgproc.write_image(imgproc.distort(image, d[0], seed=args.seed or 0), args.out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .verify import mini_config, model_gradcheck

    mcfg = mini_config(cfg)
    names = None
    if args.only:
        names = [k for k in ForgeryNet(mcfg).params if k.startswith(tuple(args.only.split(",")))]
        if not names:
            raise UsageError(f"no parameters match {args.only!r}")
    report = model_gradcheck(mcfg, seed=cfg.seed if cfg.seed is not None else 0,
                             tol=args.tol, names=names)
    for group, check in sorted(report.worst_by_group(2).items()):
        print(f"{group}\tworst_rel_err={check.worst_error:.3e}\tat {check.name}{list(check.worst_index)}")
    total = sum(r.n_checked for r in report.results)
    failed = sum(r.n_failed for r in report.results)
    print(f"checked {total} entries, {failed} failed, tol {args.tol:g}")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_FAIL


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgeloc", description="Forgery localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--distort", help="comma-separated kind:value list")
    p.add_argument("--pooled", action="store_true", help="pool pixels instead of per-image means")

    p = add("localize", cmd_localize, "predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = add("noise", cmd_noise, "write the guided-noise image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-4)

    p = add("distort", cmd_distort, "apply one distortion to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the miniature model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", help="comma-separated parameter name prefixes to check")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        overrides = _split_overrides(extra)
        cfg = _load_config(args.config, overrides)
        # distort takes a plain seed for its noise draw
        args.seed = cfg.seed
        return args.fn(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
