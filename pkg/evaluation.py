"""
Downstream evaluation of pretrained encoders.

A small per-pixel head is trained with Jaccard loss on top of frozen or
finetuned encoder features; OA/mIoU/F1 come from the confusion matrix
(rows = truth, columns = prediction).
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from augment import EVAL_STREAM, PROBE_STREAM, AugmentConfig, augmentation_stream, flip_pair
from handlers.errors import DataError, ShapeError
from handlers.logger import logger
from model import Checkpoint, EncoderConfig, feature_maps
from numerics import DTYPE, AdamConfig, ParameterVector, adam_step, init_adam, value_and_grad
from ssl_bt import BtLossConfig, bt_loss_on_views
from taskgen import TaskDataset, label_fraction_view

JACCARD_SMOOTH = 1.0
LABEL_FRACTIONS = (0.1, 0.5, 1.0)


class ProbeMode(str, Enum):
    FROZEN = "frozen"
    FINETUNE = "finetune"


class ProbeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: int = Field(16, gt=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    adam: AdamConfig = AdamConfig(lr=1e-2)
    flip_prob: float = Field(0.5, ge=0, le=1)


@dataclass
class SegHead:
    params: ParameterVector
    num_classes: int

    def probs(self, features: torch.Tensor, images: torch.Tensor, params: Optional[ParameterVector] = None):
        return head_probs(params if params is not None else self.params, features, images)


@dataclass
class SegMetrics:
    oa: float
    miou: float
    f1: float
    per_class_iou: List[float]
    confusion: np.ndarray

    def equal(self, other: "SegMetrics") -> bool:
        same_iou = np.array_equal(np.asarray(self.per_class_iou), np.asarray(other.per_class_iou), equal_nan=True)
        return (self.oa == other.oa and self.miou == other.miou and self.f1 == other.f1 and same_iou
                and np.array_equal(self.confusion, other.confusion))


@dataclass
class ForgettingEntry:
    task: str
    metric_at_own_end: float
    metric_after_final: float
    forgetting: float
    bt_loss_at_own_end: float
    bt_loss_after_final: float
    bt_drift: float


@dataclass
class ForgettingReport:
    metric: str
    entries: List[ForgettingEntry] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(e) for e in self.entries])

    def forgetting_of(self, task: str) -> float:
        return next(e.forgetting for e in self.entries if e.task == task)


def jaccard_loss(probs: torch.Tensor, mask: torch.Tensor, smooth: float = JACCARD_SMOOTH) -> torch.Tensor:
    """1 − mean over classes of soft IoU, intersections and unions summed over the batch."""
    if probs.dim() != 4 or mask.shape != (probs.shape[0],) + tuple(probs.shape[2:]):
        raise ShapeError(f"jaccard_loss: probs {tuple(probs.shape)} and mask {tuple(mask.shape)} disagree")
    k = probs.shape[1]
    onehot = F.one_hot(mask.long(), k).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dim=dims)
    union = probs.sum(dim=dims) + onehot.sum(dim=dims) - inter
    return 1.0 - ((inter + smooth) / (union + smooth)).mean()


def compute_metrics(pred_mask, true_mask, num_classes: int) -> SegMetrics:
    pred = np.asarray(pred_mask).astype(np.int64).ravel()
    true = np.asarray(true_mask).astype(np.int64).ravel()
    if pred.shape != true.shape:
        raise ShapeError(f"Prediction has {pred.size} pixels, truth has {true.size}")
    for name, arr in (("prediction", pred), ("truth", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} contains class ids outside [0, {num_classes})")

    confusion = np.bincount(num_classes * true + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    present = (confusion.sum(axis=0) + confusion.sum(axis=1)) > 0
    total = confusion.sum()
    if total == 0:
        raise DataError("compute_metrics needs at least one pixel")

    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / (tp + fp + fn), np.nan)
        f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), np.nan)
    return SegMetrics(oa=float(tp.sum() / total), miou=float(iou[present].mean()), f1=float(f1[present].mean()),
                      per_class_iou=[float(v) for v in iou], confusion=confusion)


def init_head(in_channels: int, hidden: int, num_classes: int, seed: int) -> SegHead:
    gen = torch.Generator().manual_seed(seed)
    params = ParameterVector([
        ("head.0.weight", torch.randn((hidden, in_channels), generator=gen, dtype=DTYPE) / math.sqrt(in_channels)),
        ("head.0.bias", torch.zeros(hidden, dtype=DTYPE)),
        ("head.1.weight", torch.randn((num_classes, hidden), generator=gen, dtype=DTYPE) / math.sqrt(hidden)),
        ("head.1.bias", torch.zeros(num_classes, dtype=DTYPE)),
    ])
    return SegHead(params=params, num_classes=num_classes)


def head_probs(head_params: ParameterVector, features: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    """Softmax class probabilities per pixel from [encoder features, raw pixels]."""
    x = torch.cat([features, images.to(DTYPE)], dim=1).permute(0, 2, 3, 1)
    x = torch.tanh(F.linear(x, head_params["head.0.weight"], head_params["head.0.bias"]))
    logits = F.linear(x, head_params["head.1.weight"], head_params["head.1.bias"])
    return torch.softmax(logits, dim=-1).permute(0, 3, 1, 2)


def predict(encoder_params: ParameterVector, encoder_cfg: EncoderConfig, head: SegHead,
            images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images[start:start + batch_size]
            out.append(head.probs(feature_maps(encoder_params, encoder_cfg, x), x).argmax(dim=1))
    return torch.cat(out)


def _probe_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    # keeps the short final batch: Jaccard has no minimum batch size
    order = np.random.default_rng(np.random.SeedSequence([seed, PROBE_STREAM, epoch])).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_probe(encoder_ckpt: Checkpoint, task_dataset: TaskDataset, fraction: float,
                mode: ProbeMode = ProbeMode.FROZEN, cfg: ProbeConfig = ProbeConfig(),
                seed: int = 0) -> Tuple[SegHead, SegMetrics]:
    """
    Train a segmentation head on ``fraction`` of the labelled tiles and score it
    on the held-out test split. The head with the best validation mIoU is kept.
    """
    mode = ProbeMode(mode)
    enc_cfg = encoder_ckpt.encoder_config
    view = label_fraction_view(task_dataset, fraction, seed)
    train, val = view.labeled_train, view.labeled_val
    k = task_dataset.num_classes

    head = init_head(enc_cfg.map_channels + enc_cfg.input_shape[0], cfg.hidden, k, seed)
    encoder = encoder_ckpt.params.clone()
    trainable = head.params.merged(encoder) if mode == ProbeMode.FINETUNE else head.params
    adam = init_adam(trainable, cfg.adam)

    def split_params(p: ParameterVector):
        if mode == ProbeMode.FINETUNE:
            return p.select("head."), p.select("encoder.").merged(p.select("projector."))
        return p, encoder

    best, best_miou = (trainable.clone(), -1.0), -1.0
    for epoch in range(cfg.epochs):
        for b, rows in enumerate(_probe_batches(len(train), cfg.batch_size, seed, epoch)):
            idx = torch.as_tensor(rows, dtype=torch.long)
            rng = np.random.default_rng(np.random.SeedSequence([seed, PROBE_STREAM, epoch, b]))
            images, masks = flip_pair(train.images.index_select(0, idx), train.masks.index_select(0, idx),
                                      cfg.flip_prob, rng)

            def loss_fn(p, images=images, masks=masks):
                head_p, enc_p = split_params(p)
                feats = feature_maps(enc_p, enc_cfg, images)
                if mode == ProbeMode.FROZEN:
                    feats = feats.detach()
                return jaccard_loss(head_probs(head_p, feats, images), masks)

            _, grads = value_and_grad(loss_fn, trainable)
            adam, trainable = adam_step(adam, trainable, grads)

        head_p, enc_p = split_params(trainable)
        val_pred = predict(enc_p, enc_cfg, SegHead(head_p, k), val.images)
        val_miou = compute_metrics(val_pred, val.masks, k).miou
        if val_miou > best_miou:
            best_miou, best = val_miou, (trainable.clone(), epoch)

    head_p, enc_p = split_params(best[0])
    final_head = SegHead(head_p, k)
    test_pred = predict(enc_p, enc_cfg, final_head, task_dataset.labeled_test.images)
    metrics = task_dataset.labeled_test.score(test_pred, k)
    logger.info(f"Probe {mode.value} on '{task_dataset.name}' fraction={fraction} seed={seed}: "
                f"best val mIoU {best_miou:.4f} at epoch {best[1]}, test mIoU {metrics.miou:.4f}")
    return final_head, metrics


def probe_bt_loss(params: ParameterVector, encoder_cfg: EncoderConfig, images: torch.Tensor,
                  aug_cfg: AugmentConfig, bt_cfg: BtLossConfig, batch_size: int) -> float:
    """Mean BT loss over fixed evaluation draws; a label-free drift signal."""
    batch_size = max(2, min(batch_size, images.shape[0]))
    with torch.no_grad():
        losses = [float(bt_loss_on_views(params, encoder_cfg, views, bt_cfg).total)
                  for _, views in augmentation_stream(images, aug_cfg, 0, batch_size, stream=EVAL_STREAM)]
    if not losses:
        raise DataError("Not enough validation images for a BT loss batch")
    return float(np.mean(losses))


def forgetting_report(records: pd.DataFrame, task_order: Sequence[str], metric: str = "miou") -> ForgettingReport:
    """
    ``records`` holds one row per (step, task) probe with columns
    step, task, <metric>, bt_val_loss. forgetting_k = metric at the end of
    step k minus metric after the final step.
    """
    if not task_order:
        raise DataError("forgetting_report needs at least one task")
    final_step = len(task_order) - 1
    indexed = records.set_index(["step", "task"])
    report = ForgettingReport(metric=metric)

    def lookup(step, task):
        try:
            return indexed.loc[(step, task)]
        except KeyError as e:
            raise DataError(f"Missing probe record for task '{task}' after step {step}") from e

    for k, task in enumerate(task_order):
        own, final = lookup(k, task), lookup(final_step, task)
        report.entries.append(ForgettingEntry(
            task=task,
            metric_at_own_end=float(own[metric]),
            metric_after_final=float(final[metric]),
            forgetting=float(own[metric]) - float(final[metric]),
            bt_loss_at_own_end=float(own["bt_val_loss"]),
            bt_loss_after_final=float(final["bt_val_loss"]),
            bt_drift=float(final["bt_val_loss"]) - float(own["bt_val_loss"]),
        ))
    return report


METRIC_COLUMNS = ["oa", "miou", "f1"]


def metrics_to_frame(rows: Sequence[Tuple[Dict[str, object], SegMetrics]]) -> pd.DataFrame:
    records = []
    for labels, m in rows:
        rec = dict(labels)
        rec.update(oa=m.oa, miou=m.miou, f1=m.f1)
        rec.update({f"iou_{i}": v for i, v in enumerate(m.per_class_iou)})
        k = m.confusion.shape[0]
        rec.update({f"conf_{i}_{j}": int(m.confusion[i, j]) for i in range(k) for j in range(k)})
        records.append(rec)
    return pd.DataFrame(records)


def metrics_from_frame(df: pd.DataFrame) -> List[Tuple[Dict[str, object], SegMetrics]]:
    iou_cols = sorted((c for c in df.columns if c.startswith("iou_")), key=lambda c: int(c[4:]))
    k = len(iou_cols)
    label_cols = [c for c in df.columns if c not in METRIC_COLUMNS and not c.startswith(("iou_", "conf_"))]
    out = []
    for _, row in df.iterrows():
        confusion = np.array([[int(row[f"conf_{i}_{j}"]) for j in range(k)] for i in range(k)], dtype=np.int64)
        metrics = SegMetrics(oa=float(row["oa"]), miou=float(row["miou"]), f1=float(row["f1"]),
                             per_class_iou=[float(row[c]) for c in iou_cols], confusion=confusion)
        out.append(({c: row[c] for c in label_cols}, metrics))
    return out
