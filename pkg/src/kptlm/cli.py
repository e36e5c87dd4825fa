"""Command line: synth-gen, train, eval, infer, density."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config, write_snapshot
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .decoding import ModelSource, infer_keypoints, is_stochastic, strategy_from_dict, strategy_to_dict
from .density import density_report, gaussian_baseline, kde, sample_keypoint, write_report
from .errors import ConfigError, KptlmError, ZeroVarianceSamplerError
from .evaluation import evaluate, load_pairs, write_outputs
from .instructions import Registry, builtin_registry, render_tokens, build_round, preamble_text
from .model import ModelBundle, set_finetune_mode
from .tokenizer import Vocabulary
from .training import train

EXIT_MISSING = 2
EXIT_INVALID = 3
EXIT_FAILED = 1


class MissingFile(FileNotFoundError):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingFile(f"{what} not found: {path}")
    return path


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.data.path) if cfg.data.path else cfg.out / "data"


def _load_data(cfg: RunConfig) -> Dataset:
    return load_dataset(_require(_data_dir(cfg), "dataset directory"), cfg.model.image_size, cfg.data.drop_invalid)


def _load_model(path: str | None, cfg: RunConfig) -> ModelBundle:
    ckpt = Path(path) if path else cfg.out / "model.ckpt"
    return ModelBundle.load(_require(ckpt, "checkpoint"))


def _read_image(path: str, size: int) -> np.ndarray:
    p = _require(Path(path), "image")
    if p.suffix == ".npy":
        return np.load(p).astype(np.float32)
    from PIL import Image

    with Image.open(p) as im:
        im = im.convert("RGB").resize((size, size), Image.Resampling.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _registry(cfg: RunConfig) -> Registry:
    reg = builtin_registry()
    if (_data_dir(cfg) / "dataset.json").exists():
        reg = reg.merged(_load_data(cfg).registry)
    return reg


# -- subcommands -----------------------------------------------------------------------

def cmd_synth_gen(cfg: RunConfig, args) -> dict:
    d = cfg.data
    ds = generate_synthetic(d.n_categories, d.images_per_category, cfg.data_seed, d.image_size, d.n_test, d.n_val)
    out = save_dataset(ds, _data_dir(cfg), {"generator": "synthetic-shapes", "seed": cfg.data_seed})
    return {"dataset": str(out), "images": len(ds.samples), "splits": ds.splits}


def cmd_train(cfg: RunConfig, args) -> dict:
    ds = _load_data(cfg)
    torch.manual_seed(cfg.seed)
    model = ModelBundle.load(_require(Path(args.init), "init checkpoint")) if args.init else \
        ModelBundle(cfg.model, seed=cfg.seed)
    set_finetune_mode(model, cfg.model.finetune_mode)
    samples = ds.subset("train")
    if not samples:
        raise ConfigError("training split is empty")
    state = train(model, cfg.train, samples, ds.registry, Vocabulary(), cfg.out / "train")
    final = cfg.out / "model.ckpt"
    shutil.copyfile(state.checkpoints[-1], final)
    summary = {"steps": state.step, "epochs": len(state.epoch_losses), "epoch_losses": state.epoch_losses,
               "checkpoint": str(final)}
    (cfg.out / "train" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_eval(cfg: RunConfig, args) -> dict:
    model = _load_model(args.checkpoint, cfg)
    ds = _load_data(cfg)
    samples = ds.subset(cfg.eval.split)
    if cfg.eval.max_images is not None:
        samples = samples[: cfg.eval.max_images]
    pairs = load_pairs(_require(Path(cfg.eval.pairs), "pair list")) if cfg.eval.pairs else None
    result = evaluate(model, samples, ds.registry, Vocabulary(), cfg.eval.mode, pairs,
                      strategy_from_dict(cfg.decode.strategy), cfg.decode.inference_mode, cfg.train.style,
                      cfg.seed, cfg.decode.constrained, cfg.eval.pck_norm, cfg.decode.teacher_forced)
    paths = write_outputs(result, cfg.out / "eval", cfg.eval.split)
    return {"report": str(paths["report"]), "mpck": result.report["mpck"], "pck": result.report["pck"]}


def cmd_infer(cfg: RunConfig, args) -> dict:
    model = _load_model(args.checkpoint, cfg)
    reg = _registry(cfg)
    specs = reg[args.category]
    if args.keypoints:
        specs = [reg.lookup(args.category, n) for n in args.keypoints]
    image = _read_image(args.image, model.cfg.image_size)
    strategy = strategy_from_dict(cfg.decode.strategy)
    preds = infer_keypoints(model, image, specs, Vocabulary(), cfg.decode.inference_mode, strategy,
                            cfg.train.style, np.random.default_rng(cfg.seed), cfg.decode.constrained,
                            category_specs=reg[args.category])
    out = cfg.out / "infer"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{Path(args.image).stem}_predictions.jsonl"
    with open(path, "w") as f:
        for p in preds:
            f.write(json.dumps({"image_id": Path(args.image).stem, "category": args.category, "name": p.name,
                                "x": p.x, "y": p.y, "strategy": strategy_to_dict(strategy),
                                "mode": cfg.decode.inference_mode, "flags": p.flags}, sort_keys=True) + "\n")
    return {"predictions": str(path), "count": len(preds)}


def cmd_density(cfg: RunConfig, args) -> dict:
    strategy = strategy_from_dict(cfg.density.strategy)
    if not is_stochastic(strategy):
        raise ZeroVarianceSamplerError(
            f"{type(strategy).__name__} decoding is deterministic; density sampling needs a stochastic strategy")
    model = _load_model(args.checkpoint, cfg)
    mask = None
    if args.image_id is not None:
        ds = _load_data(cfg)
        by_id = ds.by_id()
        if args.image_id not in by_id:
            raise ConfigError(f"unknown image id {args.image_id}")
        s = by_id[args.image_id]
        image, category, reg, mask = s.image, s.category, ds.registry, s.mask
        k = [sp.name for sp in reg[category]].index(reg.lookup(category, args.keypoint).name)
        gt = tuple(map(float, s.keypoints[k, :2]))
    else:
        if not (args.image and args.category and args.gt):
            raise ConfigError("density needs --image-id, or --image with --category and --gt")
        image, category, reg = _read_image(args.image, model.cfg.image_size), args.category, _registry(cfg)
        gt = tuple(float(v) for v in args.gt.split(","))
    spec = reg.lookup(category, args.keypoint)
    vocab = Vocabulary()
    style = cfg.train.style
    rnd = build_round(spec, style, rng=np.random.default_rng(cfg.seed))
    turns = [(t.question, t.answer, t.supervised) for t in rnd.turns]
    prompt = render_tokens(vocab, turns, preamble_text(style, reg[category]), close=False).ids
    samples = sample_keypoint(ModelSource(model, image), prompt, strategy, cfg.density.samples, cfg.seed, vocab)
    grid = kde(samples.points, cfg.density.resolution, cfg.density.bandwidth)
    base = gaussian_baseline(gt, cfg.density.sigma, cfg.density.resolution)
    out = cfg.out / "density"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{category}_{spec.name}".replace(" ", "_")
    grid.to_csv(out / f"{stem}_kde.csv")
    grid.to_pgm(out / f"{stem}_kde.pgm")
    base.to_csv(out / f"{stem}_gaussian.csv")
    base.to_pgm(out / f"{stem}_gaussian.pgm")
    np.savetxt(out / f"{stem}_samples.csv", samples.points, delimiter=",", fmt="%.3f")
    header = {"strategy": samples.strategy, "samples": samples.count, "seed": cfg.seed, "keypoint": spec.name,
              "category": category}
    report = density_report(grid, base, gt, mask, header)
    write_report(report, out / f"{stem}_report.json")
    return {"report": str(out / f"{stem}_report.json"), "kde_in_square": report["kde"]["in_square_mass"],
            "gaussian_in_square": report["gaussian"]["in_square_mass"]}


COMMANDS = {"synth-gen": cmd_synth_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "density": cmd_density}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (JSON literal or bare string); repeatable")
    p = argparse.ArgumentParser(prog="kptlm", description="Support-free keypoint localization with a small vision-language model.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-gen", parents=[common], help="generate the synthetic shape dataset")
    t = sub.add_parser("train", parents=[common], help="instruction-tune a model on the training split")
    t.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint")
    i = sub.add_parser("infer", parents=[common], help="predict keypoints for one image")
    i.add_argument("--checkpoint")
    i.add_argument("--image", required=True, help=".npy array or image file")
    i.add_argument("--category", required=True)
    i.add_argument("--keypoints", nargs="*", help="keypoint names to query (default: all, in registry order)")
    d = sub.add_parser("density", parents=[common], help="sample one keypoint and estimate its density")
    d.add_argument("--checkpoint")
    d.add_argument("--keypoint", required=True)
    d.add_argument("--image-id", type=int, help="image from the configured dataset")
    d.add_argument("--image")
    d.add_argument("--category")
    d.add_argument("--gt", help="ground truth as x,y in normalized coordinates")
    return p


def _fail(command: str, code: str, message: str, exit_code: int) -> int:
    message = " ".join(str(message).split())
    print(f"kptlm: error[{code}]: {message}", file=sys.stderr)
    print(json.dumps({"command": command, "error": code, "exit_code": exit_code, "message": message},
                     sort_keys=True), file=sys.stderr)
    return exit_code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        write_snapshot(cfg, cfg.out)
        result = COMMANDS[args.command](cfg, args)
    except (MissingFile, FileNotFoundError) as e:
        return _fail(args.command, "missing_file", str(e), EXIT_MISSING)
    except KptlmError as e:
        return _fail(args.command, e.code, str(e), EXIT_INVALID)
    except Exception as e:  # noqa: BLE001  report anything else in the same format
        return _fail(args.command, type(e).__name__, str(e), EXIT_FAILED)
    print(json.dumps({"command": args.command, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
