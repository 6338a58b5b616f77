import pytest
import torch

from cli import RunConfig
from model import EncoderConfig
from taskgen import PRESETS, TaskCounts, generate_task


@pytest.fixture
def tiny_cfg():
    """Small enough for coordinate-wise finite differences."""
    return EncoderConfig(input_shape=(1, 8, 8), hidden_widths=(4,), embed_dim=3, projector_widths=(),
                         activation="tanh", init_seed=0)


@pytest.fixture
def toy_images():
    gen = torch.Generator().manual_seed(1234)
    return torch.rand((16, 1, 8, 8), generator=gen, dtype=torch.float64)


@pytest.fixture
def small_counts():
    return TaskCounts(unlabeled=16, train=8, val=4, test=4)


@pytest.fixture
def small_task(small_counts):
    return generate_task(PRESETS["aerialoid"], small_counts, tile_size=16)


@pytest.fixture
def tiny_run_config(tmp_path):
    return RunConfig(
        workdir=str(tmp_path / "work"),
        seeds=[0],
        tile_size=16,
        count_unlabeled=8,
        count_train=4,
        count_val=4,
        count_test=4,
        hidden_widths=[8],
        embed_dim=4,
        projector_widths=[8],
        epochs=2,
        batch_size=4,
        probe_epochs=2,
        probe_batch_size=4,
        fractions=[0.5, 1.0],
        forgetting_lambdas=[0.0, 0.1],
    )


@pytest.fixture
def write_config(tmp_path):
    def _write(cfg: RunConfig, name: str = "run.toml"):
        path = tmp_path / name
        path.write_text(cfg.to_text(), encoding="utf-8")
        return str(path)

    return _write
