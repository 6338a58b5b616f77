import hashlib
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
import plotly.graph_objects as go
import torch

from cli import RUN_MANIFEST, RunManifest
from continual import LAMBDA_PRESETS
from handlers.errors import DataError
from handlers.logger import logger
from model import Checkpoint, embed, load_checkpoint
from taskgen import MANIFEST_NAME, TaskDataset, load_task

CHAIN_COMMANDS = ("pretrain", "continue")
_PALETTE = ["#1E88E5", "#EF5350", "#66BB6A", "#FFA726", "#26A69A", "#AB47BC"]


def _style(fig: go.Figure, title: str, x_title: str, y_title: str) -> go.Figure:
    fig.update_layout(
        title=title,
        height=420,
        margin=dict(l=10, r=10, t=50, b=10),
        paper_bgcolor='rgba(0,0,0,0)',
        font={'color': "#2196F3", 'family': "Arial"},
        xaxis_title=x_title,
        yaxis_title=y_title,
    )
    return fig


def collect_runs(workdir: Path) -> List[Tuple[Path, RunManifest]]:
    """Completed run directories under ``workdir/runs``, each verified against its manifest."""
    runs = []
    for run_dir in sorted((Path(workdir) / "runs").glob("*")):
        if not (run_dir / RUN_MANIFEST).exists():
            logger.warning(f"Skipping unfinished run directory {run_dir}")
            continue
        manifest = RunManifest.read(run_dir)
        manifest.verify(run_dir)
        runs.append((run_dir, manifest))
    return runs


def _concat(runs, artifact: str) -> pd.DataFrame:
    frames = []
    for run_dir, manifest in runs:
        if artifact in manifest.artifacts:
            df = pd.read_csv(run_dir / manifest.artifacts[artifact])
            df.insert(0, "run", run_dir.name)
            frames.append(df)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def summarize_workdir(workdir: Path) -> Dict[str, pd.DataFrame]:
    runs = collect_runs(workdir)
    if not runs:
        raise DataError(f"No completed runs under {workdir}")
    return {
        "trainlog": _concat(runs, "trainlog"),
        "metrics": _concat(runs, "metrics"),
        "forgetting": _concat(runs, "forgetting"),
        "forgetting_records": _concat(runs, "forgetting_records"),
        "runs": pd.DataFrame([{"run": d.name, "command": m.command, "config_hash": m.config_hash,
                               "finished_at": m.finished_at} for d, m in runs]),
    }


def loss_curve_figure(trainlog: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    for i, (run, df) in enumerate(trainlog.groupby("run", sort=True)):
        fig.add_trace(go.Scatter(x=df["processed_samples"], y=df["loss"], mode="lines+markers",
                                 name=f"{df['mode'].iloc[0]} {df['task'].iloc[0]}",
                                 line={'color': _PALETTE[i % len(_PALETTE)]}))
    return _style(fig, "Training loss", "processed samples", "loss")


def forgetting_figure(forgetting: pd.DataFrame) -> go.Figure:
    fig = go.Figure()
    summary = forgetting.groupby(["lam", "task"], sort=False)["forgetting"].mean().reset_index()
    for i, (lam, df) in enumerate(summary.groupby("lam")):
        fig.add_trace(go.Bar(x=df["task"], y=df["forgetting"], name=f"lambda={lam:g}",
                             marker_color=_PALETTE[i % len(_PALETTE)]))
    fig.update_layout(barmode="group")
    return _style(fig, "Forgetting (mIoU at own step minus after final step)", "task", "forgetting")


def compute_savings(trainlog: pd.DataFrame) -> pd.DataFrame:
    """Samples processed per step by the continual chain against joint retraining."""
    if trainlog.empty:
        return pd.DataFrame(columns=["step", "continual_samples", "joint_samples", "ratio"])
    final = trainlog.groupby("run").tail(1)
    chain = final[final["mode"].isin(["cbt", "bt_sequential"])].groupby("step")["processed_samples"].max()
    joint = final[final["mode"] == "bt_joint"].groupby("step")["processed_samples"].max()
    steps = sorted(set(chain.index) | set(joint.index))
    out = pd.DataFrame({"step": steps,
                        "continual_samples": chain.reindex(steps).astype(float).to_numpy(),
                        "joint_samples": joint.reindex(steps).astype(float).to_numpy()})
    out["ratio"] = out["continual_samples"] / out["joint_samples"]
    return out


def _md_table(df: pd.DataFrame) -> str:
    if df.empty:
        return "_no data_\n"
    cols = [str(c) for c in df.columns]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in df.itertuples(index=False):
        lines.append("| " + " | ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def _latest_chain_checkpoint(workdir: Path, runs) -> Optional[Checkpoint]:
    best = None
    for run_dir, manifest in runs:
        if manifest.command in CHAIN_COMMANDS and "checkpoint" in manifest.artifacts:
            ckpt = load_checkpoint(run_dir / manifest.artifacts["checkpoint"])
            if best is None or len(ckpt.provenance) > len(best.provenance):
                best = ckpt
    return best


def load_workdir_tasks(workdir: Path) -> List[TaskDataset]:
    return [load_task(d) for d in sorted((Path(workdir) / "tasks").glob("*")) if (d / MANIFEST_NAME).exists()]


def export_embeddings(ckpt: Checkpoint, datasets: List[TaskDataset], path: Path) -> pd.DataFrame:
    """Projector embeddings of every unlabeled tile, one row per tile."""
    frames = []
    with torch.no_grad():
        for ds in datasets:
            if tuple(ds.unlabeled.shape[1:]) != tuple(ckpt.encoder_config.input_shape):
                logger.warning(f"Skipping '{ds.name}': tile shape does not match the encoder")
                continue
            z = embed(ckpt.params, ckpt.encoder_config, ds.unlabeled).numpy()
            df = pd.DataFrame(z, columns=[f"z{i}" for i in range(z.shape[1])])
            df.insert(0, "domain", ds.name)
            df.insert(0, "tile_id", list(ds.unlabeled_ids))
            frames.append(df)
    out = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["tile_id", "domain"])
    out.to_csv(path, index=False, float_format="%.17g")
    return out


def _render_markdown(summary: Dict[str, pd.DataFrame]) -> str:
    trainlog, metrics, forgetting = summary["trainlog"], summary["metrics"], summary["forgetting"]
    parts = ["# Continual Barlow Twins report\n", "## Runs\n", _md_table(summary["runs"])]

    parts.append("\n## Training\n")
    if not trainlog.empty:
        last = trainlog.groupby("run").tail(1)[["run", "mode", "step", "task", "loss", "bt", "penalty",
                                                  "processed_samples", "embed_dim", "wall_seconds"]]
        parts.append(_md_table(last.reset_index(drop=True)))
    else:
        parts.append(_md_table(trainlog))

    savings = compute_savings(trainlog)
    parts.append("\n## Compute\n")
    parts.append(_md_table(savings))
    paired = savings.dropna()
    if not paired.empty:
        parts.append(f"\nContinual steps processed {int(paired['continual_samples'].sum())} samples where joint "
                     f"retraining processed {int(paired['joint_samples'].sum())} "
                     f"(ratio {paired['continual_samples'].sum() / paired['joint_samples'].sum():.4f}).\n")

    parts.append("\n## Probe metrics (median over seeds)\n")
    if not metrics.empty:
        med = metrics.groupby(["encoder", "task", "fraction"], sort=False)[["oa", "miou", "f1"]].median()
        parts.append(_md_table(med.reset_index()))
    else:
        parts.append(_md_table(metrics))

    parts.append("\n## Forgetting (median over seeds)\n")
    if not forgetting.empty:
        fg = forgetting.groupby(["lam", "task"], sort=False)[["forgetting", "bt_drift"]].median()
        parts.append(_md_table(fg.reset_index()))
    else:
        parts.append(_md_table(forgetting))

    parts.append(f"\nThe penalty weight '10e-2' reads as {LAMBDA_PRESETS['literal']} taken literally or "
                 f"{LAMBDA_PRESETS['power_of_ten']} as the intended power of ten; both ship as lambda_preset "
                 f"values and the sweep covers the range.\n")
    return "".join(parts)


def write_report(workdir: Path) -> Path:
    """Aggregate every completed run into ``workdir/reports/report-<digest>``."""
    workdir = Path(workdir)
    runs = collect_runs(workdir)
    if not runs:
        raise DataError(f"No completed runs under {workdir}")
    digest = hashlib.sha256("".join(
        d.name + m.config_hash + "".join(sorted(m.checksums.values())) for d, m in runs).encode()).hexdigest()[:10]
    out_dir = workdir / "reports" / f"report-{digest}"
    if (out_dir / RUN_MANIFEST).exists():
        logger.info(f"Report {out_dir} is up to date")
        return out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = summarize_workdir(workdir)
    manifest = RunManifest(command="report", config_hash=digest, created_at=pd.Timestamp.utcnow().isoformat())
    (out_dir / "report.md").write_text(_render_markdown(summary), encoding="utf-8")
    manifest.add_artifact(out_dir, "report", out_dir / "report.md")

    if not summary["trainlog"].empty:
        loss_curve_figure(summary["trainlog"]).write_html(out_dir / "report_losses.html", include_plotlyjs="cdn")
        manifest.add_artifact(out_dir, "losses", out_dir / "report_losses.html")
    if not summary["forgetting"].empty:
        forgetting_figure(summary["forgetting"]).write_html(out_dir / "forgetting.html", include_plotlyjs="cdn")
        manifest.add_artifact(out_dir, "forgetting", out_dir / "forgetting.html")

    ckpt = _latest_chain_checkpoint(workdir, runs)
    if ckpt is not None:
        export_embeddings(ckpt, load_workdir_tasks(workdir), out_dir / "embeddings.csv")
        manifest.add_artifact(out_dir, "embeddings", out_dir / "embeddings.csv")

    manifest.finished_at = pd.Timestamp.utcnow().isoformat()
    manifest.write(out_dir)
    logger.info(f"Report written to {out_dir}")
    return out_dir
