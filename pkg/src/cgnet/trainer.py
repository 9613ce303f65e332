"""Training and evaluation loop with best-checkpoint selection.

Protocol: decoupled-weight-decay Adam (lr 5e-4, weight decay 2.5e-3), batch
size 8, up to 50 epochs, constant learning rate, validation every epoch; the
checkpoint with the best validation F1 is kept (ties: higher IoU, then the
earlier epoch). The per-epoch log is line-delimited JSON.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import AugmentationPolicy, ImagePair, augment, batch_to_tensors, rng_for_sample
from .decoder import CGNet
from .errors import ConfigurationError, InputError, TrainingDivergenceError
from .loss import total_loss
from .metrics import ConfusionCounts, MetricReport, compute_metrics, confusion_counts
from .tensorio import load_tensor_archive, save_tensor_archive

VARIANTS: dict[str, tuple[int, ...]] = {
    "Base": (),
    "B-CGM-4": (4,),
    "B-CGM-3": (3,),
    "B-CGM-2": (2,),
    "B-CGM-4-3": (4, 3),
    "B-CGM-4-2": (4, 2),
    "B-CGM-3-2": (3, 2),
    "CGNet": (4, 3, 2),
}


@dataclass
class ExperimentConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 2.5e-3
    batch_size: int = 8
    max_epochs: int = 50
    cgm_stages: tuple[int, ...] = (4, 3, 2)
    aux_weight: float = 1.0
    seed: int = 0
    data_root: str | None = None
    out_dir: str | None = None
    channel_scale: float = 1.0
    num_heads: int = 4
    token_cap: int = 4096
    grad_clip: float | None = None
    augment: bool = True
    tile_size: int = 256

    def __post_init__(self):
        self.cgm_stages = tuple(self.cgm_stages)
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.aux_weight < 0:
            raise ConfigurationError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.channel_scale <= 0:
            raise ConfigurationError(f"channel_scale must be > 0, got {self.channel_scale}")

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "cgm_stages" in values:
            values = dict(values, cgm_stages=tuple(values["cgm_stages"]))
        return cls(**values)


@dataclass
class EpochLog:
    epoch: int
    main_loss: float
    aux_loss: float
    total_loss: float
    val_f1: float
    val_iou: float
    wall_seconds: float

    def as_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class Checkpoint:
    """A parameter snapshot plus the validation scores that selected it."""

    params: dict[str, np.ndarray]
    epoch: int
    val_f1: float
    val_iou: float
    config: ExperimentConfig


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochLog]
    log_path: Path | None = None
    checkpoint_path: Path | None = None


def build_model(cfg: ExperimentConfig) -> CGNet:
    """Construct the configured network with seeded random initialization."""
    torch.manual_seed(cfg.seed)
    return CGNet(
        channel_scale=cfg.channel_scale,
        cgm_stages=cfg.cgm_stages,
        num_heads=cfg.num_heads,
        token_cap=cfg.token_cap,
    )


def build_variant(name: str, cfg: ExperimentConfig) -> CGNet:
    """Instantiate one of the named ablation variants."""
    if name not in VARIANTS:
        raise ConfigurationError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return build_model(replace(cfg, cgm_stages=VARIANTS[name]))


def select_checkpoint(history: Sequence[tuple[int, float, float]]) -> int:
    """Epoch with max val F1; ties break to higher IoU, then the earlier epoch."""
    if not history:
        raise InputError("cannot select a checkpoint from an empty history")
    return max(history, key=lambda row: (row[1], row[2], -row[0]))[0]


def _snapshot_params(model: CGNet) -> dict[str, np.ndarray]:
    return {
        key: value.detach().cpu().numpy().astype(np.float32, copy=True)
        for key, value in model.state_dict().items()
    }


def _restore_params(model: CGNet, params: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = set(state) - set(params)
    extra = set(params) - set(state)
    if missing or extra:
        raise InputError(
            f"checkpoint does not match model (missing {sorted(missing)}, extra {sorted(extra)})"
        )
    with torch.no_grad():
        for key, value in params.items():
            state[key].copy_(torch.from_numpy(value).to(state[key].dtype))


def model_from_checkpoint(checkpoint: Checkpoint) -> CGNet:
    model = build_model(checkpoint.config)
    _restore_params(model, checkpoint.params)
    return model


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write the tensor archive plus a JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tensor_archive(path, checkpoint.params)
    sidecar = {
        "epoch": checkpoint.epoch,
        "val_f1": checkpoint.val_f1,
        "val_iou": checkpoint.val_iou,
        "config": asdict(checkpoint.config),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return Checkpoint(
        params=load_tensor_archive(path),
        epoch=sidecar["epoch"],
        val_f1=sidecar["val_f1"],
        val_iou=sidecar["val_iou"],
        config=ExperimentConfig.from_dict(sidecar["config"]),
    )


def evaluate(
    model: CGNet, pairs: Sequence[ImagePair], batch_size: int = 8
) -> tuple[MetricReport, ConfusionCounts]:
    """Global confusion counts over a split in eval mode, no augmentation."""
    if not pairs:
        raise InputError("cannot evaluate an empty split")
    counts = ConfusionCounts()
    model.eval()
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = list(pairs[start : start + batch_size])
            t1, t2, labels = batch_to_tensors(batch)
            prediction = model(t1, t2)
            counts = counts + confusion_counts(
                prediction.binary_map.numpy(), labels.numpy().astype(np.uint8)
            )
    return compute_metrics(counts), counts


def benchmark(
    cfg: ExperimentConfig,
    train_pairs: Sequence[ImagePair],
    test_pairs: Sequence[ImagePair],
) -> dict:
    """Wall-clock seconds for one training epoch and one test-set inference."""
    if not train_pairs or not test_pairs:
        raise InputError("benchmark needs non-empty train and test splits")
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    model.train()
    started = time.perf_counter()
    for start in range(0, len(train_pairs), cfg.batch_size):
        t1, t2, labels = batch_to_tensors(list(train_pairs[start : start + cfg.batch_size]))
        report = total_loss(model(t1, t2), labels, cfg.aux_weight)
        optimizer.zero_grad()
        report.total.backward()
        optimizer.step()
    epoch_seconds = time.perf_counter() - started

    started = time.perf_counter()
    evaluate(model, test_pairs, cfg.batch_size)
    test_seconds = time.perf_counter() - started
    return {
        "seconds_per_epoch": epoch_seconds,
        "seconds_test_set": test_seconds,
        "train_pairs": len(train_pairs),
        "test_pairs": len(test_pairs),
    }


def train(
    cfg: ExperimentConfig,
    train_pairs: Sequence[ImagePair],
    val_pairs: Sequence[ImagePair],
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the full protocol and return the best checkpoint plus the log."""
    if not train_pairs:
        raise InputError("training split is empty")
    if not val_pairs:
        raise InputError("validation split is empty")
    out_dir = Path(out_dir) if out_dir else (Path(cfg.out_dir) if cfg.out_dir else None)

    model = build_model(cfg)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    policy = AugmentationPolicy(seed=cfg.seed) if cfg.augment else None

    log_file = None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_file = open(log_path, "w")

    history: list[EpochLog] = []
    best: Checkpoint | None = None
    step = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            model.train()
            order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_pairs))
            sums = {"main": 0.0, "aux": 0.0, "total": 0.0}
            seen = 0
            for start in range(0, len(order), cfg.batch_size):
                indices = order[start : start + cfg.batch_size]
                batch = []
                for index in indices:
                    pair = train_pairs[int(index)]
                    if policy is not None:
                        pair = augment(pair, policy, rng_for_sample(cfg.seed, epoch, int(index)))
                    batch.append(pair)
                t1, t2, labels = batch_to_tensors(batch)
                report = total_loss(model(t1, t2), labels, cfg.aux_weight)
                loss_value = float(report.total)
                if not np.isfinite(loss_value):
                    raise TrainingDivergenceError(epoch, step, loss_value)
                optimizer.zero_grad()
                report.total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1
                sums["main"] += float(report.main) * len(batch)
                sums["aux"] += float(report.aux) * len(batch)
                sums["total"] += loss_value * len(batch)
                seen += len(batch)

            val_report, _ = evaluate(model, val_pairs, cfg.batch_size)
            log = EpochLog(
                epoch=epoch,
                main_loss=sums["main"] / seen,
                aux_loss=sums["aux"] / seen,
                total_loss=sums["total"] / seen,
                val_f1=val_report.f1,
                val_iou=val_report.iou,
                wall_seconds=time.perf_counter() - started,
            )
            history.append(log)
            if log_file is not None:
                log_file.write(log.as_json() + "\n")
                log_file.flush()

            key = (val_report.f1, val_report.iou, -epoch)
            if best is None or key > (best.val_f1, best.val_iou, -best.epoch):
                best = Checkpoint(
                    params=_snapshot_params(model),
                    epoch=epoch,
                    val_f1=val_report.f1,
                    val_iou=val_report.iou,
                    config=cfg,
                )
    finally:
        if log_file is not None:
            log_file.close()

    assert best is not None
    assert best.epoch == select_checkpoint([(h.epoch, h.val_f1, h.val_iou) for h in history])

    checkpoint_path = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        checkpoint_path = save_checkpoint(best, ckpt_dir / f"epoch_{best.epoch:04d}.ckpt")
        (ckpt_dir / "best").write_text(checkpoint_path.name + "\n")
    return TrainResult(
        checkpoint=best, history=history, log_path=log_path, checkpoint_path=checkpoint_path
    )
