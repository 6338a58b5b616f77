"""
Command line for the continual pretraining experiments.

    python cli.py gen-tasks      --config run.toml
    python cli.py pretrain       --config run.toml
    python cli.py continue       --config run.toml --snapshot <run>/snapshot.cbt
    python cli.py joint-baseline --config run.toml --k 2
    python cli.py probe          --config run.toml --checkpoint <run>/checkpoint.cbt
    python cli.py sweep          --config run.toml
    python cli.py report         --workdir <workdir>

Every command echoes its resolved config into a fresh run directory, holds a
lock file while it works and finishes by writing a checksummed run manifest.
Completed run directories are never modified.
"""
import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from augment import AugmentConfig
from continual import (LAMBDA_PRESETS, CbtConfig, EpochRecord, TaskStream, advance_snapshot, load_snapshot,
                       run_continual, run_joint_baseline, save_snapshot, train_task)
from evaluation import ProbeConfig, ProbeMode, forgetting_report, metrics_to_frame, probe_bt_loss, train_probe
from handlers.config_reader import ConfigReader
from handlers.errors import (EXIT_OK, CbtError, ChecksumMismatchError, ConfigError, DataError, RunExistsError,
                             RunLockedError)
from handlers.logger import logger
from handlers.retry_logic import retry_with_exponential_backoff
from model import Activation, Checkpoint, EncoderConfig, EncoderKind, init_params, load_checkpoint, save_checkpoint
from numerics import AdamConfig
from ssl_bt import BtLossConfig
from taskgen import PRESETS, TaskCounts, TaskDataset, file_sha256, generate_task, load_task, read_key_values, \
    save_task, verify_task, write_key_values

CONFIG_ECHO = "config.resolved.toml"
RUN_MANIFEST = "run_manifest.txt"
LOCK_FILE = ".lock"
PROGRESS_FILE = "progress.cbt"


class BaselineMode(str, Enum):
    CBT = "cbt"
    BT_SEQUENTIAL = "bt_sequential"
    BT_JOINT = "bt_joint"
    NONE_PRETRAIN = "none_pretrain"


class RunConfig(BaseModel):
    """Every tunable of the pipeline as one flat document."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    workdir: str = "cbt_workdir"
    task_order: List[str] = ["satelloid", "droneoid", "aerialoid"]
    baseline: BaselineMode = BaselineMode.CBT
    seed: int = Field(0, ge=0)
    seeds: List[int] = Field([0, 1, 2], min_length=1)

    data_seed_offset: int = Field(0, ge=0)
    tile_size: int = Field(32, ge=16)
    count_unlabeled: int = Field(96, gt=0)
    count_train: int = Field(64, gt=0)
    count_val: int = Field(16, gt=0)
    count_test: int = Field(32, gt=0)

    encoder_kind: EncoderKind = EncoderKind.MLP
    hidden_widths: List[int] = [64, 32]
    embed_dim: int = Field(16, ge=2)
    projector_widths: List[int] = [32, 32]
    activation: Activation = Activation.TANH
    init_seed: int = Field(0, ge=0)

    aug_flip_prob: float = 0.5
    aug_noise_sigma: float = 0.02
    aug_brightness_delta: float = 0.1
    aug_contrast_lo: float = 0.8
    aug_contrast_hi: float = 1.2
    aug_crop_lo: float = 0.6
    aug_crop_hi: float = 1.0

    bt_mu: float = 0.005
    bt_eps: float = 1e-5
    lam: float = Field(LAMBDA_PRESETS["power_of_ten"], ge=0)
    lambda_preset: str = ""
    epochs: int = 5
    batch_size: int = 16
    adam_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    probe_mode: ProbeMode = ProbeMode.FROZEN
    probe_hidden: int = 16
    probe_epochs: int = 30
    probe_batch_size: int = 8
    probe_lr: float = 1e-2
    probe_flip_prob: float = 0.5
    fractions: List[float] = [0.1, 0.5, 1.0]

    forgetting_lambdas: List[float] = Field([0.0, 0.01, 0.1], min_length=1)

    def resolved_lambda(self) -> float:
        if not self.lambda_preset:
            return self.lam
        if self.lambda_preset not in LAMBDA_PRESETS:
            raise ConfigError(f"Unknown lambda_preset '{self.lambda_preset}'; choose from {sorted(LAMBDA_PRESETS)}")
        return LAMBDA_PRESETS[self.lambda_preset]

    def encoder_config(self, seed_offset: int = 0) -> EncoderConfig:
        return EncoderConfig(input_shape=(3, self.tile_size, self.tile_size), kind=self.encoder_kind,
                             hidden_widths=tuple(self.hidden_widths), embed_dim=self.embed_dim,
                             projector_widths=tuple(self.projector_widths), activation=self.activation,
                             init_seed=self.init_seed + seed_offset)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(flip_prob=self.aug_flip_prob, noise_sigma=self.aug_noise_sigma,
                             brightness_delta=self.aug_brightness_delta,
                             contrast_range=(self.aug_contrast_lo, self.aug_contrast_hi),
                             crop_scale_range=(self.aug_crop_lo, self.aug_crop_hi), seed=self.seed)

    def cbt_config(self, lam: Optional[float] = None, seed: Optional[int] = None) -> CbtConfig:
        if lam is None:
            lam = 0.0 if self.baseline == BaselineMode.BT_SEQUENTIAL else self.resolved_lambda()
        return CbtConfig(lam=lam, bt=BtLossConfig(mu=self.bt_mu, eps=self.bt_eps), epochs=self.epochs,
                         batch_size=self.batch_size,
                         adam=AdamConfig(lr=self.adam_lr, beta1=self.adam_beta1, beta2=self.adam_beta2,
                                         eps=self.adam_eps),
                         seed=self.seed if seed is None else seed)

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(hidden=self.probe_hidden, epochs=self.probe_epochs, batch_size=self.probe_batch_size,
                           adam=AdamConfig(lr=self.probe_lr), flip_prob=self.probe_flip_prob)

    def task_counts(self) -> TaskCounts:
        return TaskCounts(unlabeled=self.count_unlabeled, train=self.count_train, val=self.count_val,
                          test=self.count_test)

    def domain_specs(self):
        specs = []
        for name in self.task_order:
            if name not in PRESETS:
                raise ConfigError(f"Unknown task '{name}'; available presets: {sorted(PRESETS)}")
            preset = PRESETS[name]
            specs.append(preset.model_copy(update={"seed": preset.seed + self.data_seed_offset}))
        return specs

    def to_text(self) -> str:
        dumped = self.model_dump(mode="json")
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in dumped.items())

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def validate_all(self) -> "RunConfig":
        """Build every sub-config once so range errors surface before any work."""
        try:
            self.encoder_config(), self.augment_config(), self.cbt_config(), self.probe_config()
            self.task_counts(), self.domain_specs()
            for lam in self.forgetting_lambdas:
                for seed in self.seeds:
                    self.cbt_config(lam=lam, seed=seed), self.encoder_config(seed_offset=seed)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"fractions must lie in (0, 1], got {f}")
        return self


def load_run_config(path: Optional[str] = None, **overrides) -> RunConfig:
    doc = ConfigReader().read_flat(path) if path else {}
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"Invalid run config: {e}") from e
    return cfg.validate_all()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    created_at: str
    finished_at: str = ""
    artifacts: Dict[str, str] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)
    processed_samples: Dict[str, int] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)

    def add_artifact(self, run_dir: Path, name: str, path: Path):
        rel = os.path.relpath(path, run_dir)
        self.artifacts[name] = rel
        self.checksums[name] = file_sha256(path)

    def write(self, run_dir: Path):
        values = {"command": self.command, "config_hash": self.config_hash,
                  "created_at": self.created_at, "finished_at": self.finished_at}
        values.update({f"artifact.{k}": v for k, v in self.artifacts.items()})
        values.update({f"checksum.{k}": v for k, v in self.checksums.items()})
        values.update({f"processed_samples.{k}": v for k, v in self.processed_samples.items()})
        values.update({f"note.{k}": v for k, v in self.notes.items()})
        write_key_values(run_dir / RUN_MANIFEST, values)

    @classmethod
    def read(cls, run_dir: Path) -> "RunManifest":
        kv = read_key_values(Path(run_dir) / RUN_MANIFEST)

        def section(prefix):
            return {k[len(prefix):]: v for k, v in kv.items() if k.startswith(prefix)}

        return cls(command=kv.get("command", ""), config_hash=kv.get("config_hash", ""),
                   created_at=kv.get("created_at", ""), finished_at=kv.get("finished_at", ""),
                   artifacts=section("artifact."), checksums=section("checksum."),
                   processed_samples={k: int(v) for k, v in section("processed_samples.").items()},
                   notes=section("note."))

    def verify(self, run_dir: Path):
        for name, rel in self.artifacts.items():
            path = Path(run_dir) / rel
            if not path.exists():
                raise DataError(f"{run_dir}: artifact '{name}' missing ({rel})")
            actual = file_sha256(path)
            if actual != self.checksums.get(name):
                raise ChecksumMismatchError(str(path), self.checksums.get(name), actual)


def _lock_owner_alive(lock_path: Path) -> bool:
    try:
        pid = int(lock_path.read_text(encoding="utf-8").strip())
    except (OSError, ValueError):
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@retry_with_exponential_backoff(retry_on=(RunLockedError,), max_retries=5)
def _acquire_lock(lock_path: Path):
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        if _lock_owner_alive(lock_path):
            raise RunLockedError(f"{lock_path.parent} is locked by another command") from e
        logger.warning(f"Removing stale lock {lock_path} left by a process that is no longer running")
        lock_path.unlink(missing_ok=True)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as race:
            raise RunLockedError(f"{lock_path.parent} is locked by another command") from race
    with os.fdopen(fd, "w") as fp:
        fp.write(str(os.getpid()))


@contextlib.contextmanager
def run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_FILE
    _acquire_lock(lock_path)
    try:
        yield directory
    finally:
        lock_path.unlink(missing_ok=True)


@contextlib.contextmanager
def run_directory(cfg: RunConfig, command: str, label: str, salt: str = ""):
    """Fresh (or resumable, unfinished) run directory holding the config echo."""
    digest = hashlib.sha256((cfg.config_hash + salt).encode("utf-8")).hexdigest()[:10]
    path = Path(cfg.workdir) / "runs" / f"{command}-{label}-{digest}"
    if (path / RUN_MANIFEST).exists():
        raise RunExistsError(f"{path} is a completed run; it will not be modified")
    with run_lock(path):
        echo = path / CONFIG_ECHO
        echo.write_text(cfg.to_text(), encoding="utf-8")
        manifest = RunManifest(command=command, config_hash=cfg.config_hash,
                               created_at=datetime.now(timezone.utc).isoformat())
        manifest.add_artifact(path, "config", echo)
        yield path, manifest
        manifest.finished_at = datetime.now(timezone.utc).isoformat()
        manifest.write(path)
        logger.info(f"Run complete: {path}")


def _task_dir(cfg: RunConfig, spec) -> Path:
    key = json.dumps({"spec": spec.model_dump(mode="json"), "counts": cfg.task_counts().model_dump(),
                      "tile_size": cfg.tile_size}, sort_keys=True)
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:8]
    return Path(cfg.workdir) / "tasks" / f"{spec.name}-s{spec.seed}-{digest}"


def cmd_gen_tasks(cfg: RunConfig) -> Dict[str, Tuple[Path, str]]:
    """Generate missing task directories; existing ones are checksum-verified, not rebuilt."""
    out = {}
    tasks_root = Path(cfg.workdir) / "tasks"
    with run_lock(tasks_root):
        for spec in cfg.domain_specs():
            directory = _task_dir(cfg, spec)
            if (directory / "manifest.txt").exists():
                verify_task(directory)
                logger.info(f"Task '{spec.name}' at {directory}: verified, no regeneration")
                out[spec.name] = (directory, "verified")
                continue
            save_task(generate_task(spec, cfg.task_counts(), cfg.tile_size), directory)
            out[spec.name] = (directory, "generated")
    return out


def _load_tasks(cfg: RunConfig, names: Optional[List[str]] = None) -> Dict[str, TaskDataset]:
    dirs = cmd_gen_tasks(cfg)
    names = names or cfg.task_order
    return {n: load_task(dirs[n][0]) for n in names}


def _stream(ds: TaskDataset) -> TaskStream:
    return TaskStream(ds.name, ds.unlabeled, ds.unlabeled_ids)


def _save_progress(path: Path, params, enc_cfg, provenance, adam, log, epoch: int):
    ckpt = Checkpoint(params=params, encoder_config=enc_cfg, provenance=list(provenance), adam_state=adam,
                      extra={"epochs_done": epoch + 1, "records": [vars(r) for r in log.epochs]})
    save_checkpoint(ckpt, path)


def _write_trainlog(run_dir: Path, manifest: RunManifest, log, mode: str, step: int):
    df = log.to_frame()
    df.insert(0, "mode", mode)
    df.insert(1, "step", step)
    path = run_dir / "trainlog.csv"
    df.to_csv(path, index=False, float_format="%.17g")
    manifest.add_artifact(run_dir, "trainlog", path)
    manifest.processed_samples[f"step{step}"] = log.processed_sample_count


def _train_step(run_dir: Path, manifest: RunManifest, cfg: RunConfig, ds: TaskDataset,
                start_params, snapshot, provenance: List[str], mode: str):
    """One continual step with per-epoch progress checkpoints and resume."""
    enc_cfg, aug_cfg, cbt_cfg = cfg.encoder_config(), cfg.augment_config(), cfg.cbt_config()
    progress = run_dir / PROGRESS_FILE
    start_epoch, adam, records, params = 0, None, [], start_params
    if progress.exists():
        saved = load_checkpoint(progress)
        start_epoch, adam, params = int(saved.extra["epochs_done"]), saved.adam_state, saved.params
        records = [EpochRecord(**r) for r in saved.extra["records"]]
        logger.info(f"Resuming '{ds.name}' from epoch {start_epoch} in {run_dir}")

    params, log = train_task(
        params, ds.unlabeled, enc_cfg, aug_cfg, cbt_cfg, snapshot, task_name=ds.name, ids=ds.unlabeled_ids,
        start_epoch=start_epoch, adam_state=adam, prior_records=records,
        on_epoch_end=lambda e, p, a, lg: _save_progress(progress, p, enc_cfg, provenance, a, lg, e))
    new_snapshot = advance_snapshot(params, ds.unlabeled, enc_cfg, aug_cfg, cbt_cfg, ds.name, ids=ds.unlabeled_ids)

    step = len(provenance) + 1
    ckpt = Checkpoint(params=params, encoder_config=enc_cfg, provenance=list(provenance) + [ds.name],
                      extra={"mode": mode})
    save_checkpoint(ckpt, run_dir / "checkpoint.cbt")
    save_snapshot(new_snapshot, run_dir / "snapshot.cbt", enc_cfg)
    manifest.add_artifact(run_dir, "checkpoint", run_dir / "checkpoint.cbt")
    manifest.add_artifact(run_dir, "snapshot", run_dir / "snapshot.cbt")
    _write_trainlog(run_dir, manifest, log, mode, step)
    progress.unlink(missing_ok=True)
    return ckpt, new_snapshot, log


def cmd_pretrain(cfg: RunConfig) -> Path:
    """Train on the first task of ``task_order`` from a fresh encoder."""
    if cfg.baseline not in (BaselineMode.CBT, BaselineMode.BT_SEQUENTIAL):
        raise ConfigError(f"pretrain runs the cbt or bt_sequential chain, not '{cfg.baseline.value}'")
    first = cfg.task_order[0]
    ds = _load_tasks(cfg, [first])[first]
    with run_directory(cfg, "pretrain", first) as (run_dir, manifest):
        _train_step(run_dir, manifest, cfg, ds, init_params(cfg.encoder_config()), None, [],
                    cfg.baseline.value)
    return run_dir


def cmd_continue(cfg: RunConfig, snapshot_path: str) -> Path:
    """Train the next task of ``task_order`` anchored at the given snapshot."""
    snapshot_path = Path(snapshot_path)
    snapshot, snap_cfg = load_snapshot(snapshot_path)
    previous = load_checkpoint(snapshot_path.parent / "checkpoint.cbt")
    if snap_cfg != cfg.encoder_config() or previous.encoder_config != snap_cfg:
        raise ConfigError("Snapshot was produced with a different encoder configuration")
    done = previous.provenance
    if done != cfg.task_order[:len(done)] or snapshot.task_name != done[-1]:
        raise ConfigError(f"Snapshot provenance {done} does not follow task_order {cfg.task_order}")
    if len(done) >= len(cfg.task_order):
        raise ConfigError(f"All tasks of {cfg.task_order} are already trained")

    nxt = cfg.task_order[len(done)]
    ds = _load_tasks(cfg, [nxt])[nxt]
    with run_directory(cfg, "continue", nxt, salt=file_sha256(snapshot_path)) as (run_dir, manifest):
        manifest.notes["parent_snapshot"] = str(snapshot_path.resolve())
        manifest.notes["lambda"] = str(cfg.cbt_config().lam)
        _train_step(run_dir, manifest, cfg, ds, snapshot.theta_star, snapshot, list(done), cfg.baseline.value)
    return run_dir


def cmd_joint_baseline(cfg: RunConfig, k: int) -> Path:
    """Fresh-init BT on the union of the first ``k`` tasks; never loads earlier checkpoints."""
    if not 1 <= k <= len(cfg.task_order):
        raise ConfigError(f"k must lie in 1..{len(cfg.task_order)}, got {k}")
    datasets = _load_tasks(cfg, cfg.task_order[:k])
    streams = [_stream(datasets[n]) for n in cfg.task_order[:k]]
    with run_directory(cfg, "joint", f"k{k}") as (run_dir, manifest):
        ckpt, log = run_joint_baseline(streams, k, cfg.encoder_config(), cfg.augment_config(),
                                       cfg.cbt_config(lam=0.0))
        save_checkpoint(ckpt, run_dir / "checkpoint.cbt")
        manifest.add_artifact(run_dir, "checkpoint", run_dir / "checkpoint.cbt")
        _write_trainlog(run_dir, manifest, log, BaselineMode.BT_JOINT.value, k)
    return run_dir


def _encoder_label(ckpt: Checkpoint) -> str:
    if not ckpt.provenance:
        return BaselineMode.NONE_PRETRAIN.value
    return f"{ckpt.extra.get('mode', 'cbt')}:{'+'.join(ckpt.provenance)}"


def cmd_probe(cfg: RunConfig, checkpoint_path: Optional[str] = None) -> Path:
    """Segmentation probe over tasks x fractions x seeds; no checkpoint means a random encoder."""
    if checkpoint_path:
        ckpt = load_checkpoint(checkpoint_path)
        salt = file_sha256(checkpoint_path)
    else:
        ckpt = Checkpoint(params=init_params(cfg.encoder_config()), encoder_config=cfg.encoder_config())
        salt = "random"
    label = _encoder_label(ckpt)
    datasets = _load_tasks(cfg)
    rows = []
    with run_directory(cfg, "probe", label.replace(":", "_").replace("+", "_"), salt=salt) as (run_dir, manifest):
        for name in cfg.task_order:
            for fraction in cfg.fractions:
                for seed in cfg.seeds:
                    _, metrics = train_probe(ckpt, datasets[name], fraction, cfg.probe_mode, cfg.probe_config(),
                                             seed)
                    rows.append(({"encoder": label, "task": name, "fraction": fraction, "seed": seed}, metrics))
        path = run_dir / "metrics.csv"
        metrics_to_frame(rows).to_csv(path, index=False, float_format="%.17g")
        manifest.add_artifact(run_dir, "metrics", path)
    return run_dir


def cmd_sweep(cfg: RunConfig) -> Path:
    """Continual chains for every (lambda, seed), probing every seen task after each step."""
    datasets = _load_tasks(cfg)
    streams = [_stream(datasets[n]) for n in cfg.task_order]
    aug_cfg, probe_cfg = cfg.augment_config(), cfg.probe_config()
    records, reports, logs = [], [], []

    with run_directory(cfg, "sweep", "forgetting") as (run_dir, manifest):
        for lam in cfg.forgetting_lambdas:
            for seed in cfg.seeds:
                cbt_cfg = cfg.cbt_config(lam=lam, seed=seed)
                enc_cfg = cfg.encoder_config(seed_offset=seed)
                chain = []

                def probe_seen(k, task, ckpt, snapshot, log, lam=lam, seed=seed, chain=chain):
                    for name in cfg.task_order[:k + 1]:
                        _, m = train_probe(ckpt, datasets[name], 1.0, ProbeMode.FROZEN, probe_cfg, seed)
                        bt_val = probe_bt_loss(ckpt.params, enc_cfg, datasets[name].labeled_val.images,
                                               aug_cfg, cbt_cfg.bt, cbt_cfg.batch_size)
                        chain.append({"lam": lam, "seed": seed, "step": k, "task": name, "oa": m.oa,
                                      "miou": m.miou, "f1": m.f1, "bt_val_loss": bt_val,
                                      "processed_samples": log.processed_sample_count})
                    df = log.to_frame()
                    df.insert(0, "seed", seed)
                    df.insert(1, "step", k + 1)
                    logs.append(df)

                run_continual(streams, enc_cfg, aug_cfg, cbt_cfg, on_task_end=probe_seen)
                chain_df = pd.DataFrame(chain)
                report = forgetting_report(chain_df, cfg.task_order).to_frame()
                report.insert(0, "lam", lam)
                report.insert(1, "seed", seed)
                records.append(chain_df)
                reports.append(report)

        for name, frames in (("forgetting_records", records), ("forgetting", reports), ("sweep_trainlog", logs)):
            path = run_dir / f"{name}.csv"
            pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
            manifest.add_artifact(run_dir, name, path)
    return run_dir


def cmd_report(workdir: str) -> Path:
    from report import write_report

    return write_report(Path(workdir))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Continual Barlow Twins desk experiments")
    parser.add_argument("command", choices=["gen-tasks", "pretrain", "continue", "joint-baseline", "probe",
                                            "sweep", "report"])
    parser.add_argument("--config", help="Flat key=value run config")
    parser.add_argument("--workdir", help="Override the config's workdir")
    parser.add_argument("--seed", type=int, help="Override seed (and seeds) from the config")
    parser.add_argument("--snapshot", help="Snapshot file to continue from")
    parser.add_argument("--checkpoint", help="Encoder checkpoint to probe (omit for a random encoder)")
    parser.add_argument("--k", type=int, help="Number of tasks in the joint baseline")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            workdir = args.workdir or load_run_config(args.config).workdir
            cmd_report(workdir)
            return EXIT_OK

        overrides = {"workdir": args.workdir}
        if args.seed is not None:
            overrides.update(seed=args.seed, seeds=[args.seed])
        cfg = load_run_config(args.config, **overrides)
        logger.info(f"{args.command}: workdir={cfg.workdir} config_hash={cfg.config_hash[:10]} "
                    f"lambda={cfg.resolved_lambda()} baseline={cfg.baseline.value}")

        if args.command == "gen-tasks":
            cmd_gen_tasks(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg)
        elif args.command == "continue":
            if not args.snapshot:
                raise ConfigError("continue needs --snapshot")
            cmd_continue(cfg, args.snapshot)
        elif args.command == "joint-baseline":
            cmd_joint_baseline(cfg, args.k or len(cfg.task_order))
        elif args.command == "probe":
            cmd_probe(cfg, args.checkpoint)
        elif args.command == "sweep":
            cmd_sweep(cfg)
    except CbtError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
