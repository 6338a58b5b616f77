"""
Continual self-supervised pretraining: BT loss plus an elastic-weight-consolidation
penalty anchored at the previous task's weights.

Only one TaskSnapshot is ever active. After each task the Fisher diagonal is
recomputed on that task's data and the snapshot is replaced, never merged.
"""
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from augment import FISHER_STREAM, TRAIN_STREAM, AugmentConfig, ViewPair, augmentation_stream, make_view_pair
from handlers.errors import CheckpointFormatError, DataError, NumericError, ShapeError
from handlers.logger import logger
from model import Checkpoint, EncoderConfig, init_params, read_container, write_container
from numerics import DTYPE, AdamConfig, AdamState, ParameterVector, adam_step, init_adam, value_and_grad
from ssl_bt import BtLossConfig, bt_loss_on_views

LAMBDA_PRESETS = {"literal": 0.1, "power_of_ten": 0.01}


class CbtConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    lam: float = Field(LAMBDA_PRESETS["power_of_ten"], ge=0, alias="lambda")
    bt: BtLossConfig = BtLossConfig()
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(16, ge=2)
    adam: AdamConfig = AdamConfig()
    seed: int = Field(0, ge=0)


@dataclass
class FisherDiag:
    values: ParameterVector
    source_task: str
    num_batches: int


@dataclass(frozen=True)
class TaskSnapshot:
    theta_star: ParameterVector
    fisher: FisherDiag
    task_name: str

    def __post_init__(self):
        self.theta_star.assert_same_layout(self.fisher.values, "snapshot Fisher vs weights")


class TaskStream(NamedTuple):
    """Unlabeled images of one task plus the ids keying their augmentation substreams."""
    name: str
    images: torch.Tensor
    ids: Optional[Sequence[int]] = None


class CbtTerms(NamedTuple):
    total: torch.Tensor
    bt: torch.Tensor
    invariance: torch.Tensor
    redundancy: torch.Tensor
    penalty: torch.Tensor


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    bt: float
    invariance: float
    redundancy: float
    penalty: float


@dataclass
class TrainLog:
    task_name: str
    batch_size: int
    batches_per_epoch: int
    embed_dim: int
    lam: float
    epochs: List[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def processed_sample_count(self) -> int:
        return len(self.epochs) * self.batch_size * self.batches_per_epoch

    @property
    def epoch_losses(self) -> List[float]:
        return [r.loss for r in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([vars(r) for r in self.epochs],
                          columns=["epoch", "loss", "bt", "invariance", "redundancy", "penalty"])
        df.insert(0, "task", self.task_name)
        df["processed_samples"] = (df["epoch"] + 1) * self.batch_size * self.batches_per_epoch
        df["embed_dim"] = self.embed_dim
        df["lam"] = self.lam
        df["wall_seconds"] = self.wall_seconds
        return df


def estimate_fisher(params: ParameterVector, batch_losses: Iterable[Callable[[ParameterVector], torch.Tensor]],
                    source_task: str) -> FisherDiag:
    """F_i = mean over minibatch losses of (dL/dθ_i)²; summed in batch order."""
    acc = params.map(lambda t: torch.zeros_like(t, dtype=DTYPE))
    n = 0
    for loss_fn in batch_losses:
        _, grads = value_and_grad(loss_fn, params)
        acc = acc.zip_map(grads, lambda a, g: a + g * g)
        n += 1
    if n == 0:
        raise DataError(f"No minibatches available to estimate the Fisher diagonal for '{source_task}'")
    return FisherDiag(values=acc.map(lambda a: a / n), source_task=source_task, num_batches=n)


def fisher_diagonal(params: ParameterVector, model_cfg: EncoderConfig, images: torch.Tensor,
                    aug_cfg: AugmentConfig, bt_cfg: BtLossConfig, batch_size: int,
                    source_task: str = "task", ids: Optional[Sequence[int]] = None) -> FisherDiag:
    """Fisher diagonal of the BT loss at ``params`` over one pass of the task's minibatches."""
    pairs = [views for _, views in augmentation_stream(images, aug_cfg, 0, batch_size,
                                                        stream=FISHER_STREAM, ids=ids)]

    def losses():
        for views in pairs:
            yield lambda p, v=views: bt_loss_on_views(p, model_cfg, v, bt_cfg).total

    fisher = estimate_fisher(params, losses(), source_task)
    logger.info(f"Fisher diagonal for '{source_task}' over {fisher.num_batches} batches: "
                f"mean {float(fisher.values.flatten().mean()):.3e}")
    return fisher


def ewc_penalty(params: ParameterVector, snapshot: TaskSnapshot, lam: float) -> torch.Tensor:
    """Σ_i (λ/2) F_i (θ_i − θ*_i)²."""
    params.assert_same_layout(snapshot.theta_star, "EWC penalty")
    total = torch.zeros((), dtype=DTYPE)
    for name, theta in params.items():
        diff = theta - snapshot.theta_star[name]
        total = total + (0.5 * lam * snapshot.fisher.values[name] * diff * diff).sum()
    return total


def cbt_loss_on_views(params: ParameterVector, model_cfg: EncoderConfig, views: ViewPair,
                      cfg: CbtConfig, snapshot: Optional[TaskSnapshot]) -> CbtTerms:
    terms = bt_loss_on_views(params, model_cfg, views, cfg.bt)
    if snapshot is None or cfg.lam == 0:
        return CbtTerms(terms.total, terms.total, terms.invariance, terms.redundancy,
                        torch.zeros((), dtype=DTYPE))
    penalty = ewc_penalty(params, snapshot, cfg.lam)
    return CbtTerms(terms.total + penalty, terms.total, terms.invariance, terms.redundancy, penalty)


def cbt_loss(params: ParameterVector, model_cfg: EncoderConfig, x: torch.Tensor, aug_cfg: AugmentConfig,
             cfg: CbtConfig, snapshot: Optional[TaskSnapshot], draw_index: int,
             source_ids: Optional[Sequence[int]] = None) -> CbtTerms:
    views = make_view_pair(x, aug_cfg, draw_index, source_ids=source_ids, stream=TRAIN_STREAM)
    return cbt_loss_on_views(params, model_cfg, views, cfg, snapshot)


def _train_aug(aug_cfg: AugmentConfig, cfg: CbtConfig) -> AugmentConfig:
    # the run seed keys both shuffling and augmentation
    return aug_cfg.model_copy(update={"seed": cfg.seed})


def train_task(start_params: ParameterVector, images: torch.Tensor, model_cfg: EncoderConfig,
               aug_cfg: AugmentConfig, cfg: CbtConfig, snapshot: Optional[TaskSnapshot] = None,
               task_name: str = "task", ids: Optional[Sequence[int]] = None,
               start_epoch: int = 0, adam_state: Optional[AdamState] = None,
               prior_records: Sequence[EpochRecord] = (),
               on_epoch_end: Optional[Callable[[int, ParameterVector, AdamState, "TrainLog"], None]] = None,
               ) -> Tuple[ParameterVector, TrainLog]:
    """
    Adam on the combined loss for ``cfg.epochs`` epochs over one task.

    ``start_epoch``, ``adam_state`` and ``prior_records`` resume an interrupted
    run; with counter-based seeding the remaining trajectory is unchanged.
    """
    n = images.shape[0]
    if n == 0:
        raise DataError(f"Task '{task_name}' has no unlabeled images")
    batches_per_epoch = n // cfg.batch_size
    if batches_per_epoch == 0:
        raise DataError(f"Task '{task_name}' has {n} images, fewer than one batch of {cfg.batch_size}")

    aug = _train_aug(aug_cfg, cfg)
    params = start_params.clone()
    adam = adam_state if adam_state is not None else init_adam(params, cfg.adam)
    log = TrainLog(task_name=task_name, batch_size=cfg.batch_size, batches_per_epoch=batches_per_epoch,
                   embed_dim=model_cfg.embed_dim, lam=cfg.lam if snapshot is not None else 0.0,
                   epochs=list(prior_records))
    started = time.perf_counter()

    for epoch in tqdm(range(start_epoch, cfg.epochs), desc=f"train {task_name}", leave=False):
        sums = np.zeros(5)
        for b, (_, views) in enumerate(augmentation_stream(images, aug, epoch, cfg.batch_size, ids=ids)):
            def step_loss(p, v=views):
                terms = cbt_loss_on_views(p, model_cfg, v, cfg, snapshot)
                return terms.total, terms

            try:
                _, grads, terms = value_and_grad(step_loss, params, has_aux=True)
            except NumericError as e:
                logger.error(f"Non-finite loss on task '{task_name}' at epoch {epoch}, batch {b}")
                raise NumericError(f"{e} (task '{task_name}', epoch {epoch}, batch {b})", epoch=epoch, batch=b) from e
            adam, params = adam_step(adam, params, grads)
            sums += np.array([terms.total, terms.bt, terms.invariance, terms.redundancy, terms.penalty])

        means = sums / batches_per_epoch
        record = EpochRecord(epoch, *(float(v) for v in means))
        log.epochs.append(record)
        log.wall_seconds = time.perf_counter() - started
        logger.info(f"[{task_name}] epoch {epoch + 1}/{cfg.epochs} loss={record.loss:.5f} "
                    f"bt={record.bt:.5f} inv={record.invariance:.5f} red={record.redundancy:.5f} "
                    f"ewc={record.penalty:.5f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, adam, log)

    return params, log


def advance_snapshot(end_params: ParameterVector, images: torch.Tensor, model_cfg: EncoderConfig,
                     aug_cfg: AugmentConfig, cfg: CbtConfig, task_name: str,
                     ids: Optional[Sequence[int]] = None) -> TaskSnapshot:
    """A fresh snapshot for ``task_name``; it replaces whatever snapshot came before."""
    fisher = fisher_diagonal(end_params, model_cfg, images, _train_aug(aug_cfg, cfg), cfg.bt,
                             cfg.batch_size, source_task=task_name, ids=ids)
    return TaskSnapshot(theta_star=end_params.clone(), fisher=fisher, task_name=task_name)


def run_continual(tasks: Sequence[TaskStream], model_cfg: EncoderConfig, aug_cfg: AugmentConfig,
                  cfg: CbtConfig, start: Optional[Checkpoint] = None,
                  snapshot: Optional[TaskSnapshot] = None,
                  on_task_end: Optional[Callable[[int, TaskStream, Checkpoint, TaskSnapshot, TrainLog], None]] = None,
                  ) -> Tuple[Checkpoint, List[TrainLog], Optional[TaskSnapshot]]:
    """
    Train on each task in order, touching only that task's data at each step.

    ``start``/``snapshot`` continue an earlier chain; otherwise the encoder is
    freshly initialised and the first task trains on the plain BT loss.
    """
    if not tasks:
        raise DataError("run_continual needs at least one task")
    params = start.params.clone() if start is not None else init_params(model_cfg)
    provenance = list(start.provenance) if start is not None else []
    logs = []

    for k, task in enumerate(tasks):
        logger.info(f"Continual step {k + 1}/{len(tasks)}: task '{task.name}' "
                    f"(snapshot: {snapshot.task_name if snapshot else 'none'}, lambda={cfg.lam})")
        params, log = train_task(params, task.images, model_cfg, aug_cfg, cfg, snapshot,
                                 task_name=task.name, ids=task.ids)
        snapshot = advance_snapshot(params, task.images, model_cfg, aug_cfg, cfg, task.name, ids=task.ids)
        provenance.append(task.name)
        logs.append(log)
        ckpt = Checkpoint(params=params.clone(), encoder_config=model_cfg, provenance=list(provenance))
        if on_task_end is not None:
            on_task_end(k, task, ckpt, snapshot, log)

    return ckpt, logs, snapshot


def joint_stream(tasks: Sequence[TaskStream]) -> TaskStream:
    """Union of several tasks with ids kept unique across them."""
    images, ids, offset = [], [], 0
    for task in tasks:
        n = task.images.shape[0]
        local = np.arange(n) if task.ids is None else np.asarray(task.ids)
        images.append(task.images)
        ids.append(local + offset)
        offset += int(local.max()) + 1 if n else 0
    return TaskStream("+".join(t.name for t in tasks), torch.cat(images), np.concatenate(ids).tolist())


def run_joint_baseline(tasks: Sequence[TaskStream], k: int, model_cfg: EncoderConfig,
                       aug_cfg: AugmentConfig, cfg: CbtConfig) -> Tuple[Checkpoint, TrainLog]:
    """Fresh-init BT training on the union of the first ``k`` tasks."""
    if not 1 <= k <= len(tasks):
        raise DataError(f"Joint baseline step k={k} outside 1..{len(tasks)}")
    union = joint_stream(tasks[:k])
    params, log = train_task(init_params(model_cfg), union.images, model_cfg, aug_cfg, cfg,
                             snapshot=None, task_name=union.name, ids=union.ids)
    ckpt = Checkpoint(params=params, encoder_config=model_cfg, provenance=[t.name for t in tasks[:k]],
                      extra={"mode": "bt_joint"})
    return ckpt, log


def cbt_sample_count(task_size: int, epochs: int, batch_size: int) -> int:
    return epochs * batch_size * (task_size // batch_size)


def joint_sample_count(task_sizes: Sequence[int], k: int, epochs: int, batch_size: int) -> int:
    return epochs * batch_size * (sum(task_sizes[:k]) // batch_size)


_FISHER_SUFFIX = ".fisher"


def save_snapshot(snapshot: TaskSnapshot, path, encoder_config: EncoderConfig):
    tensors = list(snapshot.theta_star.items())
    tensors += [(k + _FISHER_SUFFIX, v) for k, v in snapshot.fisher.values.items()]
    meta = {"kind": "snapshot", "encoder_config": encoder_config.model_dump(mode="json"),
            "source_task": snapshot.fisher.source_task, "num_batches": snapshot.fisher.num_batches}
    write_container(path, tensors, [snapshot.task_name], meta)


def load_snapshot(path) -> Tuple[TaskSnapshot, EncoderConfig]:
    tensors, strings, meta, _ = read_container(path)
    if meta.get("kind") != "snapshot" or len(strings) != 1:
        raise CheckpointFormatError(f"{path} is not a snapshot container")
    theta = ParameterVector((k, v) for k, v in tensors if not k.endswith(_FISHER_SUFFIX))
    fisher = ParameterVector((k[:-len(_FISHER_SUFFIX)], v) for k, v in tensors if k.endswith(_FISHER_SUFFIX))
    try:
        theta.assert_same_layout(fisher, "stored snapshot")
    except ShapeError as e:
        raise CheckpointFormatError(f"{path}: {e}") from e
    snapshot = TaskSnapshot(theta_star=theta,
                            fisher=FisherDiag(fisher, meta["source_task"], int(meta["num_batches"])),
                            task_name=strings[0])
    return snapshot, EncoderConfig.model_validate(meta["encoder_config"])
