"""Command-line entry point: ``c2fmae <command> ...``.

Settings resolve as flags > config file > defaults.  Every command prints the
resolved configuration as JSON on stdout before doing any work.  Exit codes:
0 success, 1 usage or validation error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .gradcheck import model_gradient_error
from .masking import MASKING_MODES, build_mask_plan, patch_object_flags, patch_semantic_labels
from .model import export_attention
from .numerics import ContractError, DimensionError
from .synthdata import FormatError, generate_dataset, load_dataset
from .tokenizer import TASKS, visible_positions
from .trainer import CheckpointError, NumericError, load_checkpoint, train_loop
from . import viz

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4

log = logging.getLogger("c2fmae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _task_order(text: str) -> list[str]:
    if sorted(text) != sorted(TASKS):
        raise argparse.ArgumentTypeError(f"task order must be a permutation of {''.join(TASKS)}, got {text!r}")
    return list(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="c2fmae", description="Coarse-to-fine multi-granular masked autoencoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic tri-granular dataset")
    g.add_argument("--config", type=Path)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("pretrain", help="pre-train a model on a dataset")
    t.add_argument("--config", type=Path)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--decoder", choices=("cascaded", "parallel"))
    t.add_argument("--masking", choices=MASKING_MODES)
    t.add_argument("--task-order", type=_task_order)
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    r = sub.add_parser("reconstruct", help="masked input / prediction / target images for one sample")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--index", type=int, required=True)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--u", type=float, default=1.0, help="curriculum fraction used to draw the mask")

    a = sub.add_parser("attn", help="export one encoder attention map")
    a.add_argument("--ckpt", type=Path, required=True)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--index", type=int, required=True)
    a.add_argument("--layer", type=int, required=True)
    a.add_argument("--head", type=int, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--u", type=float, default=1.0)

    c = sub.add_parser("grad-check", help="finite-difference check of the tiny 64-bit model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--decoder", choices=("cascaded", "parallel"), default="cascaded")
    c.add_argument("--max-coords", type=int, default=None, help="probe at most this many entries per tensor")

    m = sub.add_parser("mask-viz", help="mask overlays per granularity at a curriculum fraction")
    m.add_argument("--config", type=Path)
    m.add_argument("--data", type=Path, required=True)
    m.add_argument("--index", type=int, required=True)
    m.add_argument("--u", type=float, required=True)
    m.add_argument("--out", type=Path, required=True)
    m.add_argument("--masking", choices=MASKING_MODES)
    return p


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def resolve_config(path: Path | None, overrides: dict[str, dict]) -> RunConfig:
    """Defaults, then the config file, then flag overrides (section -> {key: value})."""
    try:
        doc = json.loads(path.read_text()) if path is not None else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: {path} is not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<root>: expected a JSON object")
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                if not isinstance(doc.setdefault(section, {}), dict):
                    raise ConfigError(f"{section}: expected an object")
                doc[section][key] = value
    return RunConfig.from_dict(doc)


def _load_config_file(path: Path | None) -> None:
    if path is not None and not path.is_file():
        raise OSError(f"{path}: config file not found")


def echo(command: str, config: dict, **extra) -> None:
    doc = {"command": command, **{k: (str(v) if isinstance(v, Path) else v) for k, v in extra.items()},
           "config": config}
    print(json.dumps(doc, indent=2, sort_keys=True), flush=True)


def _restore(ckpt: Path):
    def build(config: dict, dtype):
        return RunConfig.from_dict(config).build_model(dtype)

    model, state, manifest = load_checkpoint(ckpt, build)
    return model, state, RunConfig.from_dict(manifest["config"])


def _sample(data: Path, index: int):
    samples, _ = load_dataset(data)
    if not 0 <= index < len(samples):
        raise ConfigError(f"--index: {index} outside [0, {len(samples)})")
    return samples[index]


def _check_u(u: float) -> None:
    if not 0.0 <= u <= 1.0:
        raise ConfigError(f"--u: {u} outside [0, 1]")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _load_config_file(args.config)
    if args.count < 1:
        raise ConfigError("--count: must be >= 1")
    cfg = resolve_config(args.config, {"scene": {"seed": args.seed}})
    echo("gen-data", cfg.to_dict(), count=args.count, out=args.out)
    generate_dataset(cfg.scene, args.count, args.out)
    print(f"wrote {args.count} samples to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    _load_config_file(args.config)
    samples, manifest = load_dataset(args.data)
    overrides = {"scene": dict(manifest["config"]),
                 "model": {"decoder_mode": args.decoder, "task_order": args.task_order},
                 "train": {"masking_mode": args.masking}}
    if args.resume:
        model, state, cfg = _restore(args.out)
    else:
        cfg = resolve_config(args.config, overrides)
        model, state = cfg.build_model(), None
    echo("pretrain", cfg.to_dict(), data=args.data, out=args.out, resume=args.resume)
    state, history = train_loop(model, samples, cfg.mask, cfg.train, out_dir=args.out, state=state,
                                config_echo=cfg.to_dict())
    if history:
        print(f"step {history[-1]['step']}: total loss {history[-1]['total']:.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    _check_u(args.u)
    model, _, cfg = _restore(args.ckpt)
    sample = _sample(args.data, args.index)
    echo("reconstruct", cfg.to_dict(), ckpt=args.ckpt, data=args.data, index=args.index, u=args.u, out=args.out)
    layout = model.layout
    plan = build_mask_plan(sample, cfg.mask, layout, args.u, cfg.train.seed, args.index,
                           mode=cfg.train.masking_mode)
    pred = model.predict(sample, plan)
    decoded = viz.decode_predictions(pred, layout, model.n_classes, model.k_max)
    targets = viz.sample_views(sample)
    preds = {"R": viz.rgb_to_bytes(decoded["R"]), "S": viz.colorize(decoded["S"], viz.SEMANTIC_PALETTE),
             "I": viz.colorize(decoded["I"])}
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for t in TASKS:
        name = viz.NAMES[t]
        viz.write_ppm(out / f"{name}_masked.ppm", viz.overlay(targets[t], viz.pixel_mask(plan.masks[t], layout), 0.0))
        viz.write_ppm(out / f"{name}_pred.ppm", preds[t])
        viz.write_ppm(out / f"{name}_target.ppm", targets[t])
    viz.write_pgm(out / "semantic_pred.pgm", decoded["S"])
    viz.write_pgm(out / "instance_pred.pgm", decoded["I"])
    (out / "plan.json").write_text(plan.to_json())
    (out / "predictions.json").write_text(json.dumps({
        "semantic": decoded["S"].tolist(), "instance": decoded["I"].tolist(),
        "rgb": np.round(decoded["R"], 6).tolist()}))
    return EXIT_OK


def cmd_attn(args) -> int:
    _check_u(args.u)
    model, _, cfg = _restore(args.ckpt)
    sample = _sample(args.data, args.index)
    echo("attn", cfg.to_dict(), ckpt=args.ckpt, data=args.data, index=args.index, layer=args.layer,
         head=args.head, u=args.u, out=args.out)
    plan = build_mask_plan(sample, cfg.mask, model.layout, args.u, cfg.train.seed, args.index,
                           mode=cfg.train.masking_mode)
    attn = model.attention_maps(sample, plan, args.layer, args.head)
    positions = visible_positions(plan.masks, model.layout)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_attention(args.out, attn, positions, args.layer, args.head)
    scaled = np.round(255 * attn / max(float(attn.max()), 1e-12)).astype(np.uint8)
    viz.write_pgm(args.out.with_suffix(".pgm"), scaled)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    echo("grad-check", {"seed": args.seed, "decoder_mode": args.decoder, "max_coords": args.max_coords,
                        "tolerance": GRAD_TOLERANCE})
    err = model_gradient_error(args.seed, args.decoder, args.max_coords)
    print(f"max relative error: {err:.3e}")
    if not err < GRAD_TOLERANCE:
        print(f"gradient check failed: {err:.3e} >= {GRAD_TOLERANCE:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_mask_viz(args) -> int:
    _check_u(args.u)
    _load_config_file(args.config)
    samples, manifest = load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index: {args.index} outside [0, {len(samples)})")
    sample = samples[args.index]
    cfg = resolve_config(args.config, {"scene": dict(manifest["config"]),
                                       "train": {"masking_mode": args.masking}})
    echo("mask-viz", cfg.to_dict(), data=args.data, index=args.index, u=args.u, out=args.out)
    layout = cfg.layout
    plan = build_mask_plan(sample, cfg.mask, layout, args.u, cfg.train.seed, args.index,
                           mode=cfg.train.masking_mode)
    views = viz.sample_views(sample)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for t in TASKS:
        viz.write_ppm(out / f"{viz.NAMES[t]}_mask.ppm", viz.overlay(views[t], viz.pixel_mask(plan.masks[t], layout)))
    labels = patch_semantic_labels(sample, layout.patch_size)
    flags = patch_object_flags(sample, layout.patch_size, cfg.mask.object_patch_threshold)
    per_region = {t: {int(c): int(plan.masks[t][labels == c].sum()) for c in np.unique(labels)} for t in TASKS}
    doc = {"u": args.u, "masking_mode": cfg.train.masking_mode, "alphas": list(plan.alphas),
           "masks": {t: plan.masks[t].tolist() for t in TASKS},
           "masked_counts": dict(plan.masked_counts),
           "visible_counts": dict(plan.ratio.visible_counts),
           "patch_semantic_labels": labels.tolist(), "patch_object_flags": flags.astype(int).tolist(),
           "masked_per_region": per_region,
           "masked_objects": {t: int(plan.masks[t][flags].sum()) for t in TASKS}}
    (out / "masks.json").write_text(json.dumps(doc, indent=1))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "reconstruct": cmd_reconstruct,
            "attn": cmd_attn, "grad-check": cmd_grad_check, "mask-viz": cmd_mask_viz}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FormatError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, DimensionError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
