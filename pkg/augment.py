"""
Two-view augmentation for the self-supervised objective.

Every random draw comes from a numpy Generator seeded by the counter tuple
(seed, stream, draw_index, view_id, sample_id), so any view of any sample can
be replayed without touching the others. Streams separate training draws from
the Fisher pass and the downstream probe.
"""
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from handlers.errors import ConfigError, NumericError, ShapeError

TRAIN_STREAM = 0
FISHER_STREAM = 1
PROBE_STREAM = 2
EVAL_STREAM = 3

MIN_SIDE = 8
_SHUFFLE_TAG = 0x5348  # keeps shuffle seeds apart from augmentation seeds


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    noise_sigma: float = Field(0.02, ge=0.0)
    brightness_delta: float = Field(0.1, ge=0.0)
    contrast_range: Tuple[float, float] = (0.8, 1.2)
    crop_scale_range: Tuple[float, float] = (0.6, 1.0)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def _check_ranges(self):
        lo, hi = self.contrast_range
        if not (0 < lo <= 1 <= hi):
            raise ValueError(f"contrast_range must satisfy 0 < lo <= 1 <= hi, got {self.contrast_range}")
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range must lie in (0, 1] and be ordered, got {self.crop_scale_range}")
        return self

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(flip_prob=0.0, noise_sigma=0.0, brightness_delta=0.0,
                   contrast_range=(1.0, 1.0), crop_scale_range=(1.0, 1.0), seed=seed)


@dataclass
class ViewPair:
    view_a: torch.Tensor
    view_b: torch.Tensor
    source_ids: List[int]
    draw_index: int


def substream(cfg_seed: int, stream: int, draw_index: int, view_id: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed, stream, draw_index, view_id, sample_id]))


def _augment_one(img: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    c, h, w = img.shape
    # draws happen in a fixed order whether or not an op is active
    flip = rng.random() < cfg.flip_prob
    scale = rng.uniform(*cfg.crop_scale_range)
    top_u, left_u = rng.random(), rng.random()
    brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    contrast = rng.uniform(*cfg.contrast_range)
    noise = rng.standard_normal((c, h, w))

    out = img
    ch, cw = max(1, int(np.floor(scale * h))), max(1, int(np.floor(scale * w)))
    if ch != h or cw != w:
        top = int(np.floor(top_u * (h - ch + 1)))
        left = int(np.floor(left_u * (w - cw + 1)))
        rows = top + (torch.arange(h) * ch) // h
        cols = left + (torch.arange(w) * cw) // w
        out = out[:, rows][:, :, cols]
    if flip:
        out = torch.flip(out, dims=[2])
    if brightness != 0.0:
        out = out + brightness
    if contrast != 1.0:
        mean = out.mean()
        out = (out - mean) * contrast + mean
    if cfg.noise_sigma > 0.0:
        out = out + cfg.noise_sigma * torch.from_numpy(noise).to(out.dtype)
    if out is img:
        return img.clone()
    return out.clamp(0.0, 1.0)


def make_view_pair(x: torch.Tensor, cfg: AugmentConfig, draw_index: int,
                   source_ids: Optional[Sequence[int]] = None, stream: int = TRAIN_STREAM) -> ViewPair:
    """Two independent augmentations of each sample of a B x C x H x W batch."""
    if x.dim() != 4:
        raise ShapeError(f"make_view_pair expects B x C x H x W, got {tuple(x.shape)}")
    b, _, h, w = x.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ShapeError(f"Images must be at least {MIN_SIDE}x{MIN_SIDE} for cropping, got {h}x{w}")
    if not bool(torch.isfinite(x).all()):
        raise NumericError("Non-finite pixels in augmentation input")
    ids = list(range(b)) if source_ids is None else [int(i) for i in source_ids]
    if len(ids) != b:
        raise ShapeError(f"{len(ids)} source ids for a batch of {b}")

    views = []
    for view_id in (0, 1):
        views.append(torch.stack([
            _augment_one(x[i], cfg, substream(cfg.seed, stream, draw_index, view_id, sid))
            for i, sid in enumerate(ids)
        ]))
    return ViewPair(view_a=views[0], view_b=views[1], source_ids=ids, draw_index=draw_index)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Deterministic shuffle keyed by (seed, epoch); a short final batch is dropped."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for a cross-correlation, got {batch_size}")
    if n <= 0:
        raise ShapeError("Cannot batch an empty dataset")
    order = np.random.default_rng(np.random.SeedSequence([seed, _SHUFFLE_TAG, epoch])).permutation(n)
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(n // batch_size)]


def augmentation_stream(images: torch.Tensor, cfg: AugmentConfig, epoch: int, batch_size: int,
                        stream: int = TRAIN_STREAM,
                        ids: Optional[Sequence[int]] = None) -> Iterator[Tuple[torch.Tensor, ViewPair]]:
    """
    Yield (X, ViewPair) for every full batch of one epoch.

    ``ids`` are the dataset-level sample identifiers (default: row index); they
    key the augmentation substreams. Draw indices are numbered
    epoch * batches_per_epoch + batch.
    """
    n = images.shape[0]
    ids = np.arange(n) if ids is None else np.asarray(ids)
    batches = epoch_batches(n, batch_size, cfg.seed, epoch)
    for b, rows in enumerate(batches):
        idx = torch.as_tensor(rows, dtype=torch.long)
        x = images.index_select(0, idx)
        draw = epoch * len(batches) + b
        yield x, make_view_pair(x, cfg, draw, source_ids=ids[rows].tolist(), stream=stream)


def flip_pair(images: torch.Tensor, masks: torch.Tensor, prob: float,
              rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Flip image and mask together, per sample, for supervised training."""
    flips = rng.random(images.shape[0]) < prob
    if not flips.any():
        return images, masks
    sel = torch.as_tensor(flips)
    images = torch.where(sel[:, None, None, None], torch.flip(images, dims=[3]), images)
    masks = torch.where(sel[:, None, None], torch.flip(masks, dims=[2]), masks)
    return images, masks
