"""Command-line surface: train, eval, predict, audit, ablate, bench, render.

Machine-readable results go to stdout as JSON; human-readable summaries go to
stderr. Config precedence: CLI flags override config-file keys override
built-in defaults. Exit status 0 on success, 2 for usage/config errors,
1 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as datamod
from . import trainer as trainmod
from .errors import ConfigurationError, InputError
from .metrics import format_report, report_as_dict
from .trainer import ExperimentConfig, VARIANTS


@dataclass(frozen=True)
class ErrorMapPalette:
    """RGB colors per confusion category."""

    tp: tuple[int, int, int] = (255, 255, 255)
    tn: tuple[int, int, int] = (0, 0, 0)
    fp: tuple[int, int, int] = (255, 0, 0)
    fn: tuple[int, int, int] = (0, 0, 255)


DEFAULT_PALETTE = ErrorMapPalette()


def render_error_map(
    pred: np.ndarray, gt: np.ndarray, palette: ErrorMapPalette = DEFAULT_PALETTE
) -> np.ndarray:
    """Color each pixel by its confusion category (white/black/red/blue)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(gt, (0, 1)).all()):
        raise InputError("masks must contain only 0 and 1")
    out = np.empty(pred.shape + (3,), dtype=np.uint8)
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    out[pred & gt] = palette.tp
    out[~pred & ~gt] = palette.tn
    out[pred & ~gt] = palette.fp
    out[~pred & gt] = palette.fn
    return out


# -- config assembly ----------------------------------------------------------

_FLAG_FIELDS = {
    "seed": "seed",
    "epochs": "max_epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "channel_scale": "channel_scale",
    "aux_weight": "aux_weight",
    "tile_size": "tile_size",
    "num_heads": "num_heads",
    "token_cap": "token_cap",
    "grad_clip": "grad_clip",
}


def _parse_config_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        try:
            return [int(p) for p in parts]
        except ValueError:
            return parts
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    return raw


def read_config_file(path: str | Path) -> dict:
    """Parse `key = value` lines; `#` starts a comment."""
    values = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_config_value(raw)
    return values


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for flag, field_name in _FLAG_FIELDS.items():
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[field_name] = flag_value
    if getattr(args, "no_augment", False):
        values["augment"] = False
    variant = getattr(args, "variant", None)
    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}"
            )
        values["cgm_stages"] = VARIANTS[variant]
    if getattr(args, "out", None):
        values["out_dir"] = args.out
    return ExperimentConfig.from_dict(values)


def _resolve_dataset(spec: str, out_dir: Path, seed: int) -> Path:
    """A dataset path, or the literal 'synthetic' for a generated one."""
    if spec == "synthetic":
        root = out_dir / "synthetic-data"
        if not (root / "list" / "train.txt").is_file():
            datamod.write_synthetic_dataset(root, seed=seed)
        return root
    return Path(spec)


def _load_splits(root: Path, cfg: ExperimentConfig, which: tuple[str, ...]):
    manifests = datamod.discover_manifests(root, seed=cfg.seed, tile_size=cfg.tile_size)
    return {name: datamod.load_tiled_split(root, manifests[name]) for name in which}


def _emit(payload: dict, out_path: Path | None = None) -> None:
    text = json.dumps(payload, indent=2)
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n")
    print(text)


# -- subcommands ---------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out_dir = Path(args.out)
    root = _resolve_dataset(args.data, out_dir, cfg.seed)
    cfg = replace(cfg, data_root=str(root), out_dir=str(out_dir))
    splits = _load_splits(root, cfg, ("train", "val"))
    result = trainmod.train(cfg, splits["train"], splits["val"], out_dir)
    _emit(
        {
            "best_epoch": result.checkpoint.epoch,
            "val_f1": result.checkpoint.val_f1,
            "val_iou": result.checkpoint.val_iou,
            "checkpoint": str(result.checkpoint_path),
            "log": str(result.log_path),
        }
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = trainmod.load_checkpoint(args.checkpoint)
    model = trainmod.model_from_checkpoint(checkpoint)
    cfg = checkpoint.config
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    root = Path(args.data)
    splits = _load_splits(root, cfg, (args.split,))
    report, counts = trainmod.evaluate(model, splits[args.split], cfg.batch_size)
    print(format_report(report), file=sys.stderr)
    _emit(report_as_dict(report, counts), Path(args.out) / "metrics.json" if args.out else None)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    checkpoint = trainmod.load_checkpoint(args.checkpoint)
    model = trainmod.model_from_checkpoint(checkpoint)
    model.eval()
    t1 = datamod._read_image(Path(args.t1), "RGB")
    t2 = datamod._read_image(Path(args.t2), "RGB")
    if t1.shape != t2.shape:
        raise InputError(f"image sizes differ: {t1.shape} vs {t2.shape}")
    import torch

    with torch.no_grad():
        prediction = model(
            datamod.image_to_tensor(t1).unsqueeze(0), datamod.image_to_tensor(t2).unsqueeze(0)
        )
        probability = prediction.change_probability.squeeze(0).numpy().astype(np.float32)
        binary = prediction.binary_map.squeeze(0).numpy().astype(np.uint8)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_path = out_dir / "prediction.png"
    prob_path = out_dir / "probability.npy"
    Image.fromarray(binary * 255).save(pred_path)
    np.save(prob_path, probability)
    _emit(
        {
            "prediction": str(pred_path),
            "probability": str(prob_path),
            "changed_pixels": int(binary.sum()),
            "total_pixels": int(binary.size),
        }
    )
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    result = datamod.audit_dataset(args.root)
    _emit(result, Path(args.out) / "audit.json" if args.out else None)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out_dir = Path(args.out)
    root = _resolve_dataset(args.dataset, out_dir, cfg.seed)
    cfg = replace(cfg, data_root=str(root))
    splits = _load_splits(root, cfg, ("train", "val", "test"))

    rows = []
    for name, stages in VARIANTS.items():
        variant_cfg = replace(cfg, cgm_stages=stages, out_dir=None)
        result = trainmod.train(
            variant_cfg, splits["train"], splits["val"], out_dir / f"variant-{name}"
        )
        model = trainmod.model_from_checkpoint(result.checkpoint)
        report, _ = trainmod.evaluate(model, splits["test"], variant_cfg.batch_size)
        rows.append({"variant": name, "f1": report.f1, "iou": report.iou})
        print(f"{name:<12} F1 {report.f1 * 100:6.2f}", file=sys.stderr)

    width = max(len(r["variant"]) for r in rows)
    table = ["Model".ljust(width) + "  F1"]
    table += [r["variant"].ljust(width) + f"  {r['f1'] * 100:.2f}" for r in rows]
    print("\n".join(table), file=sys.stderr)
    _emit({"variants": rows}, out_dir / "ablation.json")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out_dir = Path(args.out) if args.out else Path(".")
    root = _resolve_dataset(args.data, out_dir, cfg.seed)
    splits = _load_splits(root, cfg, ("train", "test"))
    result = trainmod.benchmark(cfg, splits["train"], splits["test"])
    _emit(result, Path(args.out) / "bench.json" if args.out else None)
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    pred = datamod._read_label(Path(args.pred))
    gt = datamod._read_label(Path(args.gt))
    rendered = render_error_map(pred, gt)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rendered).save(out_path)
    _emit({"error_map": str(out_path)})
    return 0


# -- parser --------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--variant", choices=sorted(VARIANTS))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--weight-decay", dest="weight_decay", type=float)
    parser.add_argument("--channel-scale", dest="channel_scale", type=float)
    parser.add_argument("--aux-weight", dest="aux_weight", type=float)
    parser.add_argument("--tile-size", dest="tile_size", type=int)
    parser.add_argument("--num-heads", dest="num_heads", type=int)
    parser.add_argument("--token-cap", dest="token_cap", type=int)
    parser.add_argument("--grad-clip", dest="grad_clip", type=float)
    parser.add_argument("--no-augment", dest="no_augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset root, or 'synthetic'")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict change for one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t1", required=True)
    p.add_argument("--t2", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("audit", help="dataset pixel statistics and split sizes")
    p.add_argument("root")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("ablate", help="train and score every ablation variant")
    p.add_argument("--dataset", required=True, help="dataset root, or 'synthetic'")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time one training epoch and test inference")
    p.add_argument("--data", required=True, help="dataset root, or 'synthetic'")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", help="render a TP/TN/FP/FN error map")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: data, shapes, divergence
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
