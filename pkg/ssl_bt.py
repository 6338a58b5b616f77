"""Barlow Twins objective: cross-correlation of two views and its redundancy-reduction loss."""
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import torch
from pydantic import BaseModel, ConfigDict, Field

from augment import TRAIN_STREAM, AugmentConfig, ViewPair, make_view_pair
from handlers.errors import ShapeError
from model import EncoderConfig, embed
from numerics import DEFAULT_STD_EPS, ParameterVector, standardize_columns

CORRELATION_TOL = 1e-4


class BtLossConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mu: float = Field(0.005, gt=0)
    eps: float = Field(DEFAULT_STD_EPS, gt=0)


@dataclass
class CrossCorrelation:
    matrix: torch.Tensor
    batch_size: int


class BtLossTerms(NamedTuple):
    total: torch.Tensor
    invariance: torch.Tensor
    redundancy: torch.Tensor


def cross_correlation(z_a: torch.Tensor, z_b: torch.Tensor, eps: float = DEFAULT_STD_EPS) -> CrossCorrelation:
    if z_a.shape != z_b.shape:
        raise ShapeError(f"Embedding shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if z_a.dim() != 2 or z_a.shape[0] < 2:
        raise ShapeError(f"cross_correlation needs B x D embeddings with B >= 2, got {tuple(z_a.shape)}")
    b = z_a.shape[0]
    c = standardize_columns(z_a, eps).T @ standardize_columns(z_b, eps) / b
    return CrossCorrelation(matrix=c, batch_size=b)


def bt_loss(c: CrossCorrelation, cfg: BtLossConfig = BtLossConfig()) -> BtLossTerms:
    m = c.matrix
    if m.dim() != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"Cross-correlation must be square, got {tuple(m.shape)}")
    diag = torch.diagonal(m)
    invariance = ((1.0 - diag) ** 2).sum()
    off_diag = m - torch.diag_embed(diag)
    redundancy = (off_diag ** 2).sum()
    return BtLossTerms(total=invariance + cfg.mu * redundancy, invariance=invariance, redundancy=redundancy)


def bt_loss_on_views(params: ParameterVector, model_cfg: EncoderConfig, views: ViewPair,
                     bt_cfg: BtLossConfig = BtLossConfig()) -> BtLossTerms:
    z_a = embed(params, model_cfg, views.view_a)
    z_b = embed(params, model_cfg, views.view_b)
    return bt_loss(cross_correlation(z_a, z_b, bt_cfg.eps), bt_cfg)


def bt_loss_on_batch(params: ParameterVector, model_cfg: EncoderConfig, x: torch.Tensor,
                     aug_cfg: AugmentConfig, bt_cfg: BtLossConfig, draw_index: int,
                     source_ids: Optional[Sequence[int]] = None, stream: int = TRAIN_STREAM) -> BtLossTerms:
    views = make_view_pair(x, aug_cfg, draw_index, source_ids=source_ids, stream=stream)
    return bt_loss_on_views(params, model_cfg, views, bt_cfg)
