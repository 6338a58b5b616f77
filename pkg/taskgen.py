"""
Synthetic multi-domain segmentation tasks.

Each tile is procedural background texture with rectangles and blobs painted
in palette colours on top. The mask is the exact rasterisation of the painted
objects, so labels are noise-free. Domains differ in texture frequency,
viewpoint (oblique = integer shear), effective resolution and palette.
"""
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, field_validator

from handlers.errors import ChecksumMismatchError, ConfigError, DataError
from handlers.logger import logger
from model import read_container, write_container

NUM_OBJECT_CLASSES = 3
NUM_CLASSES = NUM_OBJECT_CLASSES + 1  # background is class 0
OBLIQUE_SHEAR = 0.5
MIN_TILE = 16
MANIFEST_NAME = "manifest.txt"
_SPLIT_FILES = ("unlabeled.cbt", "train.cbt", "val.cbt", "test.cbt", "objects.cbt")
_FRACTION_TAG = 0x4C46


class Viewpoint(str, Enum):
    NADIR = "nadir"
    OBLIQUE = "oblique"


RGB = Tuple[float, float, float]


class DomainSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    texture_freq: float = Field(3.0, gt=0)
    viewpoint: Viewpoint = Viewpoint.NADIR
    resolution_scale: float = Field(1.0, gt=0, le=1)
    palette: Tuple[RGB, RGB, RGB] = ((0.8, 0.2, 0.2), (0.2, 0.7, 0.2), (0.55, 0.55, 0.6))
    background: RGB = (0.5, 0.5, 0.45)
    object_density: float = Field(2.0, ge=0)
    seed: int = Field(0, ge=0)

    @field_validator("palette", "background")
    @classmethod
    def _unit_colors(cls, v):
        flat = np.asarray(v, dtype=float).ravel()
        if ((flat < 0) | (flat > 1)).any():
            raise ValueError(f"colours must lie in [0, 1], got {v}")
        return v


class TaskCounts(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    unlabeled: int = Field(96, gt=0)
    train: int = Field(64, gt=0)
    val: int = Field(16, gt=0)
    test: int = Field(32, gt=0)

    @property
    def total(self) -> int:
        return self.unlabeled + self.train + self.val + self.test


PRESETS: Dict[str, DomainSpec] = {
    "aerialoid": DomainSpec(name="aerialoid", texture_freq=3.0, viewpoint=Viewpoint.NADIR, resolution_scale=1.0,
                            palette=((0.8, 0.2, 0.2), (0.2, 0.65, 0.2), (0.55, 0.55, 0.6)),
                            background=(0.6, 0.55, 0.4), object_density=2.0, seed=11),
    "droneoid": DomainSpec(name="droneoid", texture_freq=6.0, viewpoint=Viewpoint.OBLIQUE, resolution_scale=1.0,
                           palette=((0.9, 0.45, 0.1), (0.1, 0.5, 0.3), (0.3, 0.3, 0.35)),
                           background=(0.4, 0.5, 0.35), object_density=3.0, seed=23),
    "satelloid": DomainSpec(name="satelloid", texture_freq=1.5, viewpoint=Viewpoint.NADIR, resolution_scale=0.5,
                            palette=((0.7, 0.6, 0.5), (0.3, 0.45, 0.25), (0.2, 0.25, 0.5)),
                            background=(0.45, 0.4, 0.35), object_density=1.5, seed=37),
}


@dataclass
class LabeledTile:
    image: torch.Tensor
    mask: torch.Tensor
    tile_id: int


@dataclass
class LabeledSplit:
    images: torch.Tensor
    masks: torch.Tensor
    ids: List[int]

    def __len__(self):
        return self.images.shape[0]

    def tile(self, i: int) -> LabeledTile:
        return LabeledTile(self.images[i], self.masks[i], self.ids[i])

    def subset(self, rows: Sequence[int]) -> "LabeledSplit":
        idx = torch.as_tensor(list(rows), dtype=torch.long)
        return LabeledSplit(self.images.index_select(0, idx), self.masks.index_select(0, idx),
                            [self.ids[r] for r in rows])


class HeldOutSplit:
    """Test tiles: images are readable, labels are only used to score predictions."""

    def __init__(self, images: torch.Tensor, masks: torch.Tensor, ids: List[int]):
        self.images = images
        self.ids = ids
        self._masks = masks

    def __len__(self):
        return self.images.shape[0]

    def score(self, predicted: torch.Tensor, num_classes: int):
        from evaluation import compute_metrics

        return compute_metrics(predicted, self._masks, num_classes)

    def _export(self) -> LabeledSplit:
        return LabeledSplit(self.images, self._masks, self.ids)


@dataclass
class TaskDataset:
    domain: DomainSpec
    counts: TaskCounts
    tile_size: int
    num_classes: int
    unlabeled: torch.Tensor
    unlabeled_ids: List[int]
    labeled_train: LabeledSplit
    labeled_val: LabeledSplit
    labeled_test: HeldOutSplit
    object_counts: np.ndarray

    @property
    def name(self) -> str:
        return self.domain.name


def _texture(spec: DomainSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    angle, phase = rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    proj = xx * math.cos(angle) + yy * math.sin(angle)
    wave = np.sin(2 * math.pi * spec.texture_freq * proj + phase)
    wave += 0.5 * np.sin(4 * math.pi * spec.texture_freq * proj.T + 2 * phase)
    return 0.5 + wave / 3.0


def _render_tile(spec: DomainSpec, size: int, tile_index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, tile_index]))
    tex = _texture(spec, size, rng)
    image = np.asarray(spec.background, dtype=np.float64)[:, None, None] * (0.7 + 0.6 * (tex - 0.5))[None]
    mask = np.zeros((size, size), dtype=np.int64)
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)

    whole = int(math.floor(spec.object_density))
    n_objects = whole + int(rng.random() < spec.object_density - whole)
    yy, xx = np.mgrid[0:size, 0:size]
    for j in range(n_objects):
        # stratified class assignment keeps per-class frequencies at density / 3
        cls = 1 + (tile_index + j + spec.seed) % NUM_OBJECT_CLASSES
        is_rect = rng.random() < 0.5
        hh, ww = rng.integers(3, max(4, size // 3) + 1, size=2)
        cy, cx = rng.integers(0, size, size=2)
        jitter = rng.normal(0.0, 0.02, size=3)
        if is_rect:
            region = (np.abs(yy - cy) <= hh // 2) & (np.abs(xx - cx) <= ww // 2)
        else:
            region = ((yy - cy) / (hh / 2.0)) ** 2 + ((xx - cx) / (ww / 2.0)) ** 2 <= 1.0
        color = np.asarray(spec.palette[cls - 1]) + jitter
        image[:, region] = color[:, None] + 0.05 * (tex[region] - 0.5)[None]
        mask[region] = cls
        counts[cls] += 1

    if spec.viewpoint == Viewpoint.OBLIQUE:
        for r in range(size):
            shift = int(math.floor(r * OBLIQUE_SHEAR))
            image[:, r] = np.roll(image[:, r], shift, axis=-1)
            mask[r] = np.roll(mask[r], shift)

    if spec.resolution_scale < 1.0:
        low = max(1, int(round(size * spec.resolution_scale)))
        t = torch.from_numpy(image)[None]
        t = F.interpolate(F.interpolate(t, size=(low, low), mode="area"), size=(size, size), mode="nearest")
        image = t[0].numpy()

    return np.clip(image, 0.0, 1.0), mask, counts


def generate_task(spec: DomainSpec, counts: TaskCounts = TaskCounts(), tile_size: int = 32) -> TaskDataset:
    """Deterministic from ``spec.seed``; tile ids are positions in the generated population."""
    if tile_size < MIN_TILE:
        raise ConfigError(f"tile_size must be >= {MIN_TILE}, got {tile_size}")

    rendered = [_render_tile(spec, tile_size, i) for i in range(counts.total)]
    images = torch.from_numpy(np.stack([r[0] for r in rendered]))
    masks = torch.from_numpy(np.stack([r[1] for r in rendered]))
    object_counts = np.stack([r[2] for r in rendered])

    bounds = np.cumsum([0, counts.unlabeled, counts.train, counts.val, counts.test])
    ranges = [list(range(bounds[i], bounds[i + 1])) for i in range(4)]

    def split(rows):
        return LabeledSplit(images[rows[0]:rows[-1] + 1], masks[rows[0]:rows[-1] + 1], rows)

    train, val, test = split(ranges[1]), split(ranges[2]), split(ranges[3])
    ds = TaskDataset(domain=spec, counts=counts, tile_size=tile_size, num_classes=NUM_CLASSES,
                     unlabeled=images[:counts.unlabeled], unlabeled_ids=ranges[0],
                     labeled_train=train, labeled_val=val,
                     labeled_test=HeldOutSplit(test.images, test.masks, test.ids),
                     object_counts=object_counts)
    logger.info(f"Generated task '{spec.name}': {counts.total} tiles of {tile_size}x{tile_size}, "
                f"{int(object_counts.sum())} objects")
    return ds


def object_class_histogram(ds: TaskDataset) -> np.ndarray:
    """Painted objects per class over the whole generated population."""
    return ds.object_counts.sum(axis=0)


def _tile_features(images: torch.Tensor) -> torch.Tensor:
    x = images.to(torch.float64)
    mean = x.mean(dim=(2, 3))
    std = x.std(dim=(2, 3), unbiased=False)
    dx = (x[:, :, :, 1:] - x[:, :, :, :-1]).abs().mean(dim=(1, 2, 3))
    dy = (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().mean(dim=(1, 2, 3))
    gray = x.mean(dim=1)
    power = torch.fft.rfft2(gray - gray.mean(dim=(1, 2), keepdim=True)).abs() ** 2
    h = gray.shape[1]
    fy = torch.fft.fftfreq(h).abs()[:, None]
    fx = torch.fft.rfftfreq(gray.shape[2])[None, :]
    high = (torch.sqrt(fy ** 2 + fx ** 2) > 0.25).to(power.dtype)
    high_ratio = (power * high).sum(dim=(1, 2)) / (power.sum(dim=(1, 2)) + 1e-12)
    return torch.cat([mean, std, dx[:, None], dy[:, None], high_ratio[:, None]], dim=1)


def domain_divergence(task_a: TaskDataset, task_b: TaskDataset) -> float:
    """
    Mean cross-task distance between tile feature vectors minus the average
    within-task mean distance (an energy-distance form, so it is >= 0 and 0 for
    identical tile sets).
    """
    fa, fb = _tile_features(task_a.unlabeled), _tile_features(task_b.unlabeled)
    if fa.shape[0] == 0 or fb.shape[0] == 0:
        raise DataError("domain_divergence needs non-empty tasks")
    # canonical argument order makes the score exactly symmetric
    if fa.numpy().tobytes() > fb.numpy().tobytes():
        fa, fb = fb, fa
    cross = torch.cdist(fa, fb).mean()
    within = (torch.cdist(fa, fa).mean() + torch.cdist(fb, fb).mean()) / 2
    return float(cross - within)


def label_fraction_view(ds: TaskDataset, fraction: float, seed: int) -> TaskDataset:
    """Keep floor(fraction * N) training tiles; smaller fractions are prefixes of larger ones."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(ds.labeled_train)
    keep = int(math.floor(fraction * n + 1e-9))
    if keep < 1:
        raise DataError(f"fraction {fraction} of {n} training tiles leaves no tiles")
    if keep == n:
        return ds
    order = np.random.default_rng(np.random.SeedSequence([seed, _FRACTION_TAG])).permutation(n)
    rows = sorted(order[:keep].tolist())
    return dataclasses.replace(ds, labeled_train=ds.labeled_train.subset(rows))


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fp:
        for chunk in iter(lambda: fp.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def read_key_values(path) -> Dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError(f"{path}: malformed line '{line}'")
            out[key.strip()] = value.strip()
    return out


def write_key_values(path, values: Dict[str, object]):
    with open(path, "w", encoding="utf-8") as fp:
        for key, value in values.items():
            fp.write(f"{key}={value}\n")


def save_task(ds: TaskDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = lambda xs: torch.as_tensor(xs, dtype=torch.int64)
    train, val, test = ds.labeled_train, ds.labeled_val, ds.labeled_test._export()
    write_container(directory / "unlabeled.cbt", [("images", ds.unlabeled), ("ids", ids(ds.unlabeled_ids))], [], {})
    for fname, split in (("train.cbt", train), ("val.cbt", val), ("test.cbt", test)):
        write_container(directory / fname, [("images", split.images), ("masks", split.masks),
                                            ("ids", ids(split.ids))], [], {})
    write_container(directory / "objects.cbt", [("object_counts", torch.from_numpy(ds.object_counts))], [], {})

    spec = ds.domain.model_dump(mode="json")
    manifest = {"format": "cbt-task-1"}
    manifest.update({f"spec.{k}": json.dumps(v) for k, v in spec.items()})
    manifest.update({f"counts.{k}": v for k, v in ds.counts.model_dump().items()})
    manifest.update({"tile_size": ds.tile_size, "num_classes": ds.num_classes})
    manifest.update({f"checksum.{f}": file_sha256(directory / f) for f in _SPLIT_FILES})
    write_key_values(directory / MANIFEST_NAME, manifest)
    logger.info(f"Saved task '{ds.name}' to {directory}")
    return directory


def verify_task(directory) -> Dict[str, str]:
    """Check every tile file against the manifest; returns the manifest."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"No task manifest in {directory}")
    manifest = read_key_values(manifest_path)
    for fname in _SPLIT_FILES:
        expected = manifest.get(f"checksum.{fname}")
        path = directory / fname
        if expected is None or not path.exists():
            raise DataError(f"{directory}: missing tile file or checksum for {fname}")
        actual = file_sha256(path)
        if actual != expected:
            logger.error(f"Checksum failure on {path}")
            raise ChecksumMismatchError(str(path), expected, actual)
    return manifest


def load_task(directory, verify: bool = True) -> TaskDataset:
    directory = Path(directory)
    manifest = verify_task(directory) if verify else read_key_values(directory / MANIFEST_NAME)
    spec = DomainSpec.model_validate({k[5:]: json.loads(v) for k, v in manifest.items() if k.startswith("spec.")})
    counts = TaskCounts.model_validate({k[7:]: int(v) for k, v in manifest.items() if k.startswith("counts.")})

    def load(fname):
        tensors, _, _, _ = read_container(directory / fname)
        return dict(tensors)

    unl = load("unlabeled.cbt")
    splits = {}
    for fname in ("train.cbt", "val.cbt", "test.cbt"):
        t = load(fname)
        splits[fname] = LabeledSplit(t["images"], t["masks"], t["ids"].tolist())
    test = splits["test.cbt"]
    return TaskDataset(domain=spec, counts=counts, tile_size=int(manifest["tile_size"]),
                       num_classes=int(manifest["num_classes"]), unlabeled=unl["images"],
                       unlabeled_ids=unl["ids"].tolist(), labeled_train=splits["train.cbt"],
                       labeled_val=splits["val.cbt"],
                       labeled_test=HeldOutSplit(test.images, test.masks, test.ids),
                       object_counts=load("objects.cbt")["object_counts"].numpy())
