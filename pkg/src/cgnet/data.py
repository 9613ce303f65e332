"""Bi-temporal dataset ingestion, tiling, augmentation, and auditing.

On-disk layout::

    root/A/<id>.png          first-date RGB rasters
    root/B/<id>.png          second-date RGB rasters
    root/label/<id>.png      binary change masks, values {0, 255}
    root/list/{train,val,test}.txt   one pair id per line

When ``list/val.txt`` is absent, a seeded 10% of the training ids is carved
out as the validation split.

Model inputs are normalized as x/255 then (x - mean) / std per channel with
the conventional constants for the backbone family (CHANNEL_MEAN/STD below);
both are arguments of :func:`pair_to_tensors` for anyone who needs to change
them.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, IngestionError, InputError
from .metrics import DatasetStats, format_imbalance, imbalance_ratio

CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)
QUARTER_TURNS = (0, 90, 180, 270)
SPLITS = ("train", "val", "test")


@dataclass
class ImagePair:
    """Co-registered bi-temporal rasters plus a binary change label."""

    id: str
    t1: np.ndarray  # uint8 [H,W,3]
    t2: np.ndarray  # uint8 [H,W,3]
    label: np.ndarray  # uint8 [H,W], values {0,1}

    def __post_init__(self):
        if self.t1.shape != self.t2.shape or self.t1.shape[:2] != self.label.shape:
            raise InputError(
                f"pair {self.id}: rasters disagree in size "
                f"({self.t1.shape}, {self.t2.shape}, {self.label.shape})"
            )


@dataclass(frozen=True)
class SplitManifest:
    split: str
    pair_ids: tuple[str, ...]
    tile_size: int = 256

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(set(self.pair_ids)) != len(self.pair_ids):
            raise ConfigurationError(f"{self.split} manifest contains duplicate ids")
        if self.tile_size < 1:
            raise ConfigurationError(f"tile_size must be >= 1, got {self.tile_size}")

    def __len__(self) -> int:
        return len(self.pair_ids)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ranges for the four training-time augmentations.

    Geometric transforms (quarter-turn rotation, crop + resize back) apply
    identically to t1/t2/label; photometric noise perturbs t1 and t2
    independently and never touches the label.
    """

    rotations: tuple[int, ...] = QUARTER_TURNS
    gaussian_sigma_range: tuple[float, float] = (0.0, 8.0)
    salt_pepper_density_range: tuple[float, float] = (0.0, 0.02)
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    seed: int = 0

    def __post_init__(self):
        if any(angle not in QUARTER_TURNS for angle in self.rotations) or not self.rotations:
            raise ConfigurationError(f"rotations must be a non-empty subset of {QUARTER_TURNS}")
        lo, hi = self.gaussian_sigma_range
        if not (0 <= lo <= hi <= 25):
            raise ConfigurationError("gaussian sigma range must lie within [0, 25]")
        lo, hi = self.salt_pepper_density_range
        if not (0 <= lo <= hi <= 0.05):
            raise ConfigurationError("salt-and-pepper density range must lie within [0, 0.05]")
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ConfigurationError("crop scale range must lie within (0, 1]")


IDENTITY_POLICY = AugmentationPolicy(
    rotations=(0,),
    gaussian_sigma_range=(0.0, 0.0),
    salt_pepper_density_range=(0.0, 0.0),
    crop_scale_range=(1.0, 1.0),
)


# -- tiling -------------------------------------------------------------------


def tile_grid(height: int, width: int, tile: int) -> tuple[int, int]:
    return height // tile, width // tile


def tile_pair(pair: ImagePair, tile: int) -> list[ImagePair]:
    """Cut a pair into non-overlapping tile x tile pairs, row-major."""
    height, width = pair.label.shape
    if height % tile or width % tile:
        raise InputError(
            f"pair {pair.id}: size {height}x{width} is not divisible by tile {tile}"
        )
    rows, cols = tile_grid(height, width, tile)
    tiles = []
    for r in range(rows):
        for c in range(cols):
            ys = slice(r * tile, (r + 1) * tile)
            xs = slice(c * tile, (c + 1) * tile)
            tiles.append(
                ImagePair(
                    id=f"{pair.id}_{r:03d}_{c:03d}",
                    t1=pair.t1[ys, xs].copy(),
                    t2=pair.t2[ys, xs].copy(),
                    label=pair.label[ys, xs].copy(),
                )
            )
    return tiles


def detile(tiles: list[ImagePair], rows: int, cols: int, pair_id: str = "") -> ImagePair:
    """Reassemble row-major tiles into the source pair, bit-exact."""
    if rows * cols != len(tiles):
        raise InputError(f"expected {rows * cols} tiles, got {len(tiles)}")
    t1 = np.block([[tiles[r * cols + c].t1 for c in range(cols)] for r in range(rows)])
    t2 = np.block([[tiles[r * cols + c].t2 for c in range(cols)] for r in range(rows)])
    label = np.block(
        [[tiles[r * cols + c].label for c in range(cols)] for r in range(rows)]
    )
    return ImagePair(id=pair_id or tiles[0].id.rsplit("_", 2)[0], t1=t1, t2=t2, label=label)


# -- augmentation -------------------------------------------------------------


def rng_for_sample(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample random state; depends only on (seed, epoch, index)."""
    return np.random.default_rng((seed, epoch, index))


def _resize(arr: np.ndarray, size: tuple[int, int], *, nearest: bool) -> np.ndarray:
    resample = Image.Resampling.NEAREST if nearest else Image.Resampling.BILINEAR
    return np.asarray(Image.fromarray(arr).resize((size[1], size[0]), resample))


def _gaussian_noise(arr: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    noisy = arr.astype(np.float64) + rng.normal(0.0, sigma, arr.shape)
    return np.clip(np.rint(noisy), 0, 255).astype(np.uint8)


def _salt_pepper(arr: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    height, width = arr.shape[:2]
    count = int(round(density * height * width))
    if count == 0:
        return arr
    out = arr.copy()
    ys = rng.integers(0, height, count)
    xs = rng.integers(0, width, count)
    values = rng.integers(0, 2, count).astype(np.uint8) * 255
    out[ys, xs] = values[:, None]
    return out


def augment(pair: ImagePair, policy: AugmentationPolicy, rng: np.random.Generator) -> ImagePair:
    """Apply one random draw of the policy; deterministic for a given rng state."""
    angle = int(rng.choice(np.asarray(policy.rotations)))
    scale = float(rng.uniform(*policy.crop_scale_range))

    quarters = (angle // 90) % 4
    t1 = np.rot90(pair.t1, quarters) if quarters else pair.t1
    t2 = np.rot90(pair.t2, quarters) if quarters else pair.t2
    label = np.rot90(pair.label, quarters) if quarters else pair.label

    height, width = label.shape
    crop_h = max(1, round(height * scale))
    crop_w = max(1, round(width * scale))
    if (crop_h, crop_w) != (height, width):
        oy = int(rng.integers(0, height - crop_h + 1))
        ox = int(rng.integers(0, width - crop_w + 1))
        window = (slice(oy, oy + crop_h), slice(ox, ox + crop_w))
        t1 = _resize(np.ascontiguousarray(t1[window]), (height, width), nearest=False)
        t2 = _resize(np.ascontiguousarray(t2[window]), (height, width), nearest=False)
        label = _resize(np.ascontiguousarray(label[window]), (height, width), nearest=True)

    sigma = float(rng.uniform(*policy.gaussian_sigma_range))
    density = float(rng.uniform(*policy.salt_pepper_density_range))
    t1 = np.ascontiguousarray(t1)
    t2 = np.ascontiguousarray(t2)
    if sigma > 0:
        t1 = _gaussian_noise(t1, sigma, rng)
        t2 = _gaussian_noise(t2, sigma, rng)
    if density > 0:
        t1 = _salt_pepper(t1, density, rng)
        t2 = _salt_pepper(t2, density, rng)

    return ImagePair(id=pair.id, t1=t1, t2=t2, label=np.ascontiguousarray(label))


# -- loading ------------------------------------------------------------------


def _read_image(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except IngestionError:
        raise
    except Exception as exc:
        raise IngestionError(f"cannot read raster {path}: {exc}") from exc


def _read_label(path: Path) -> np.ndarray:
    mask = _read_image(path, "L")
    if not np.isin(mask, (0, 255)).all():
        raise IngestionError(f"label {path} has values outside {{0, 255}}")
    return (mask // 255).astype(np.uint8)


def load_pair(root: str | Path, pair_id: str) -> ImagePair:
    root = Path(root)
    t1 = _read_image(root / "A" / f"{pair_id}.png", "RGB")
    t2 = _read_image(root / "B" / f"{pair_id}.png", "RGB")
    label = _read_label(root / "label" / f"{pair_id}.png")
    if t1.shape != t2.shape or t1.shape[:2] != label.shape:
        raise IngestionError(
            f"pair {pair_id}: raster sizes disagree "
            f"(A {t1.shape}, B {t2.shape}, label {label.shape})"
        )
    return ImagePair(id=pair_id, t1=t1, t2=t2, label=label)


def load_split(root: str | Path, manifest: SplitManifest) -> Iterator[ImagePair]:
    """Yield the manifest's pairs in order."""
    for pair_id in manifest.pair_ids:
        yield load_pair(root, pair_id)


def load_tiled_split(root: str | Path, manifest: SplitManifest) -> list[ImagePair]:
    """Load a split, cutting any larger-than-tile sources into tiles."""
    tile = manifest.tile_size
    pairs: list[ImagePair] = []
    for pair in load_split(root, manifest):
        if pair.label.shape == (tile, tile):
            pairs.append(pair)
        else:
            pairs.extend(tile_pair(pair, tile))
    return pairs


def image_to_tensor(
    img: np.ndarray,
    mean: tuple[float, float, float] = CHANNEL_MEAN,
    std: tuple[float, float, float] = CHANNEL_STD,
) -> torch.Tensor:
    """uint8 [H,W,3] -> normalized float [3,H,W]: x/255 then (x - mean)/std."""
    mean_arr = np.asarray(mean, dtype=np.float32)
    std_arr = np.asarray(std, dtype=np.float32)
    scaled = (img.astype(np.float32) / 255.0 - mean_arr) / std_arr
    return torch.from_numpy(scaled.transpose(2, 0, 1).copy())


def pair_to_tensors(
    pair: ImagePair,
    mean: tuple[float, float, float] = CHANNEL_MEAN,
    std: tuple[float, float, float] = CHANNEL_STD,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Normalize to model inputs: t1/t2 as float [3,H,W], label as float [H,W]."""
    label = torch.from_numpy(pair.label.astype(np.float32))
    return image_to_tensor(pair.t1, mean, std), image_to_tensor(pair.t2, mean, std), label


def batch_to_tensors(pairs: list[ImagePair]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    tensors = [pair_to_tensors(p) for p in pairs]
    return (
        torch.stack([t[0] for t in tensors]),
        torch.stack([t[1] for t in tensors]),
        torch.stack([t[2] for t in tensors]),
    )


# -- manifests ---------------------------------------------------------------


def read_manifest(root: str | Path, split: str, tile_size: int = 256) -> SplitManifest:
    path = Path(root) / "list" / f"{split}.txt"
    if not path.is_file():
        raise IngestionError(f"missing manifest: {path}")
    ids = tuple(line.strip() for line in path.read_text().splitlines() if line.strip())
    return SplitManifest(split=split, pair_ids=ids, tile_size=tile_size)


def write_manifest(root: str | Path, manifest: SplitManifest) -> Path:
    path = Path(root) / "list" / f"{manifest.split}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{pid}\n" for pid in manifest.pair_ids))
    return path


def carve_validation(
    train_ids: tuple[str, ...], fraction: float = 0.1, seed: int = 0
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Split off a seeded random fraction of training ids for validation."""
    count = max(1, round(len(train_ids) * fraction))
    rng = np.random.default_rng((seed, 0x7A11))  # fixed salt keeps the carve split-local
    picked = set(rng.choice(len(train_ids), size=count, replace=False).tolist())
    val = tuple(pid for i, pid in enumerate(train_ids) if i in picked)
    train = tuple(pid for i, pid in enumerate(train_ids) if i not in picked)
    return train, val


def discover_manifests(
    root: str | Path, seed: int = 0, tile_size: int = 256
) -> dict[str, SplitManifest]:
    """Read train/val/test manifests, carving val from train when absent."""
    root = Path(root)
    manifests = {"train": read_manifest(root, "train", tile_size)}
    if (root / "list" / "val.txt").is_file():
        manifests["val"] = read_manifest(root, "val", tile_size)
    else:
        train_ids, val_ids = carve_validation(manifests["train"].pair_ids, seed=seed)
        manifests["train"] = SplitManifest("train", train_ids, tile_size)
        manifests["val"] = SplitManifest("val", val_ids, tile_size)
    manifests["test"] = read_manifest(root, "test", tile_size)
    return manifests


# -- auditing -----------------------------------------------------------------


def audit_dataset(root: str | Path) -> dict:
    """Exact label pixel statistics plus split sizes, JSON-serializable."""
    root = Path(root)
    label_dir = root / "label"
    if not label_dir.is_dir():
        raise IngestionError(f"missing label directory: {label_dir}")
    changed = 0
    unchanged = 0
    for path in sorted(label_dir.glob("*.png")):
        mask = _read_label(path)
        positives = int(np.count_nonzero(mask))
        changed += positives
        unchanged += mask.size - positives
    stats = DatasetStats(changed_pixels=changed, unchanged_pixels=unchanged)
    ratio = imbalance_ratio(stats)
    splits = {}
    for split in SPLITS:
        if (root / "list" / f"{split}.txt").is_file():
            splits[split] = len(read_manifest(root, split))
    return {
        "changed_pixels": changed,
        "unchanged_pixels": unchanged,
        "imbalance_ratio": ratio,
        "imbalance": format_imbalance(ratio),
        "splits": splits,
    }


# -- synthetic data -----------------------------------------------------------


def write_synthetic_dataset(
    root: str | Path,
    counts: dict[str, int] | None = None,
    size: int = 64,
    seed: int = 0,
) -> Path:
    """Generate a small rectangular-change dataset in the standard layout.

    Each pair is a textured background photographed twice (with slight noise)
    where a random rectangle in t2 is repainted with a contrasting color; the
    label marks that rectangle.
    """
    root = Path(root)
    counts = counts or {"train": 8, "val": 4, "test": 4}
    rng = np.random.default_rng(seed)
    for sub in ("A", "B", "label", "list"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for split, n_pairs in counts.items():
        ids = []
        for i in range(n_pairs):
            pair_id = f"{split}_{i:03d}"
            ids.append(pair_id)
            base = rng.integers(40, 180, size=3)
            texture = rng.normal(0.0, 10.0, size=(size, size, 3))
            t1 = np.clip(base + texture, 0, 255).astype(np.uint8)
            t2 = np.clip(
                t1.astype(np.float64) + rng.normal(0.0, 3.0, size=t1.shape), 0, 255
            ).astype(np.uint8)

            rect_h = int(rng.integers(size // 4, size // 2 + 1))
            rect_w = int(rng.integers(size // 4, size // 2 + 1))
            oy = int(rng.integers(0, size - rect_h + 1))
            ox = int(rng.integers(0, size - rect_w + 1))
            fill = (base + 120) % 256
            t2[oy : oy + rect_h, ox : ox + rect_w] = np.clip(
                fill + rng.normal(0.0, 6.0, size=(rect_h, rect_w, 3)), 0, 255
            ).astype(np.uint8)
            label = np.zeros((size, size), dtype=np.uint8)
            label[oy : oy + rect_h, ox : ox + rect_w] = 255

            Image.fromarray(t1).save(root / "A" / f"{pair_id}.png")
            Image.fromarray(t2).save(root / "B" / f"{pair_id}.png")
            Image.fromarray(label).save(root / "label" / f"{pair_id}.png")
        write_manifest(root, SplitManifest(split=split, pair_ids=tuple(ids), tile_size=size))
    return root
