import numpy as np
import pytest
import torch
from pydantic import ValidationError

from augment import FISHER_STREAM, AugmentConfig, augmentation_stream
from continual import (LAMBDA_PRESETS, CbtConfig, FisherDiag, TaskSnapshot, TaskStream, advance_snapshot, cbt_loss,
                       cbt_sample_count, ewc_penalty, estimate_fisher, fisher_diagonal, joint_sample_count,
                       load_snapshot, run_continual, run_joint_baseline, save_snapshot, train_task)
from handlers.errors import CheckpointFormatError, DataError, NumericError, ShapeError
from model import Checkpoint, EncoderConfig, init_params, save_checkpoint
from numerics import AdamConfig, ParameterVector, finite_diff_grad, max_relative_error, value_and_grad
from ssl_bt import BtLossConfig, bt_loss_on_batch, bt_loss_on_views
from taskgen import PRESETS, TaskCounts, generate_task


def vec(**entries):
    return ParameterVector({k: torch.as_tensor(v, dtype=torch.float64) for k, v in entries.items()})


def snapshot_at(theta, fisher, name="previous"):
    return TaskSnapshot(theta_star=theta.clone(), fisher=FisherDiag(fisher, name, 1), task_name=name)


def random_fisher(params, seed):
    gen = torch.Generator().manual_seed(seed)
    return params.map(lambda t: torch.rand(t.shape, generator=gen, dtype=torch.float64))


def test_lambda_presets_ship_both_readings():
    assert LAMBDA_PRESETS == {"literal": 0.1, "power_of_ten": 0.01}
    assert CbtConfig().lam == 0.01
    assert CbtConfig.model_validate({"lambda": 0.1}).lam == 0.1


def test_config_ranges():
    with pytest.raises(ValidationError):
        CbtConfig(epochs=0)
    with pytest.raises(ValidationError):
        CbtConfig(batch_size=1)
    with pytest.raises(ValidationError):
        CbtConfig(lam=-1.0)


def test_ewc_penalty_examples():
    theta_star = vec(w=[1.0])
    snap = snapshot_at(theta_star, vec(w=[2.0]))
    assert float(ewc_penalty(vec(w=[4.0]), snap, 0.1)) == pytest.approx(0.9, abs=1e-12)
    assert float(ewc_penalty(theta_star, snap, 0.1)) == 0.0
    assert float(ewc_penalty(vec(w=[-7.0]), snapshot_at(theta_star, vec(w=[0.0])), 0.1)) == 0.0


def test_ewc_penalty_layout_mismatch():
    snap = snapshot_at(vec(w=[1.0]), vec(w=[1.0]))
    with pytest.raises(ShapeError):
        ewc_penalty(vec(v=[1.0]), snap, 0.1)


def test_ewc_penalty_gradient_is_lambda_f_times_displacement(tiny_cfg):
    theta_star = init_params(tiny_cfg)
    fisher = random_fisher(theta_star, 0)
    params = theta_star.map(lambda t: t + 0.3)
    lam = 0.25
    _, grads = value_and_grad(lambda p: ewc_penalty(p, snapshot_at(theta_star, fisher), lam), params)
    expected = params.zip_map(theta_star, lambda p, s: p - s).zip_map(fisher, lambda d, f: lam * f * d)
    for name in params:
        assert torch.allclose(grads[name], expected[name], rtol=1e-12, atol=0)


def test_ewc_penalty_grows_with_displacement(tiny_cfg):
    theta_star = init_params(tiny_cfg)
    snap = snapshot_at(theta_star, random_fisher(theta_star, 1))
    displacement = random_fisher(theta_star, 2).map(lambda t: t - 0.5)
    values = [float(ewc_penalty(theta_star.zip_map(displacement, lambda s, d: s + k * d), snap, 0.1))
              for k in (0.0, 0.5, 1.0, 2.0)]
    assert values == sorted(values)
    assert values[0] == 0.0


def test_estimate_fisher_on_quadratic_surrogate():
    params = vec(w=[3.0])
    fisher = estimate_fisher(params, [lambda p: (p["w"] ** 2).sum()] * 2, "quad")
    assert fisher.values["w"].item() == 36.0
    assert fisher.num_batches == 2
    assert fisher.source_task == "quad"


def test_estimate_fisher_unused_parameter_is_zero():
    params = vec(used=[1.0, 2.0], unused=[5.0])
    fisher = estimate_fisher(params, [lambda p: (p["used"] * 3).sum()], "t")
    assert fisher.values["unused"].item() == 0.0
    assert torch.equal(fisher.values["used"], torch.full((2,), 9.0, dtype=torch.float64))


def test_estimate_fisher_needs_batches():
    with pytest.raises(DataError):
        estimate_fisher(vec(w=[1.0]), [], "empty")


def test_fisher_diagonal_matches_finite_differences(tiny_cfg, toy_images):
    params, aug, bt = init_params(tiny_cfg), AugmentConfig(seed=5), BtLossConfig()
    fisher = fisher_diagonal(params, tiny_cfg, toy_images, aug, bt, batch_size=4, source_task="toy")
    assert fisher.num_batches == 4

    squares = params.zeros_like()
    for _, views in augmentation_stream(toy_images, aug, 0, 4, stream=FISHER_STREAM):
        g = finite_diff_grad(lambda p, v=views: bt_loss_on_views(p, tiny_cfg, v, bt).total, params, h=1e-3)
        squares = squares.zip_map(g, lambda a, b: a + b * b)
    oracle = squares.map(lambda t: t / 4)
    assert max_relative_error(fisher.values, oracle) < 1e-3


def test_fisher_is_nonnegative_on_random_instances(tiny_cfg, toy_images):
    for seed in range(100):
        cfg = tiny_cfg.model_copy(update={"init_seed": seed})
        fisher = fisher_diagonal(init_params(cfg), cfg, toy_images[:8], AugmentConfig(seed=seed), BtLossConfig(),
                                 batch_size=4)
        assert all(bool((v >= 0).all()) for v in fisher.values.values())


def test_cbt_loss_degenerates_to_bt(tiny_cfg, toy_images):
    params, aug = init_params(tiny_cfg), AugmentConfig(seed=2)
    x = toy_images[:4]
    bt = bt_loss_on_batch(params, tiny_cfg, x, aug, BtLossConfig(), draw_index=7)
    no_snapshot = cbt_loss(params, tiny_cfg, x, aug, CbtConfig(lam=0.1), None, draw_index=7)
    assert torch.equal(no_snapshot.total, bt.total)
    assert float(no_snapshot.penalty) == 0.0

    snap = snapshot_at(params.map(lambda t: t + 1.0), random_fisher(params, 3))
    zero_lambda = cbt_loss(params, tiny_cfg, x, aug, CbtConfig(lam=0.0), snap, draw_index=7)
    assert torch.equal(zero_lambda.total, bt.total)
    assert torch.equal(zero_lambda.bt, bt.total)


def test_penalty_gradient_vanishes_at_anchor(tiny_cfg, toy_images):
    params, aug = init_params(tiny_cfg), AugmentConfig(seed=2)
    x = toy_images[:4]
    snap = snapshot_at(params, random_fisher(params, 4))
    _, with_penalty = value_and_grad(
        lambda p: cbt_loss(p, tiny_cfg, x, aug, CbtConfig(lam=0.1), snap, draw_index=0).total, params)
    _, pure = value_and_grad(lambda p: bt_loss_on_batch(p, tiny_cfg, x, aug, BtLossConfig(), 0).total, params)
    assert max_relative_error(with_penalty, pure) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_cbt_gradient_matches_finite_differences(tiny_cfg, toy_images, seed):
    cfg = tiny_cfg.model_copy(update={"init_seed": seed})
    params = init_params(cfg)
    anchor = init_params(cfg.model_copy(update={"init_seed": seed + 100}))
    snap = snapshot_at(anchor, random_fisher(params, seed))
    x, aug, cbt = toy_images[:4], AugmentConfig(seed=seed), CbtConfig(lam=0.5)

    def loss_fn(p):
        return cbt_loss(p, cfg, x, aug, cbt, snap, draw_index=seed).total

    _, grads = value_and_grad(loss_fn, params)
    assert max_relative_error(grads, finite_diff_grad(loss_fn, params, h=1e-3)) < 1e-4


def test_train_task_input_guards(tiny_cfg, toy_images):
    params = init_params(tiny_cfg)
    with pytest.raises(DataError):
        train_task(params, toy_images[:0], tiny_cfg, AugmentConfig(), CbtConfig(batch_size=4))
    with pytest.raises(DataError):
        train_task(params, toy_images[:3], tiny_cfg, AugmentConfig(), CbtConfig(batch_size=4))


def test_non_finite_loss_reports_position(tiny_cfg, toy_images):
    params = init_params(tiny_cfg)
    broken = ParameterVector((k, torch.full_like(v, float("nan")) if k == "encoder.0.weight" else v)
                             for k, v in params.items())
    with pytest.raises(NumericError) as info:
        train_task(broken, toy_images, tiny_cfg, AugmentConfig(), CbtConfig(batch_size=4, epochs=1))
    assert (info.value.epoch, info.value.batch) == (0, 0)


def test_train_log_accounting(tiny_cfg, toy_images):
    _, log = train_task(init_params(tiny_cfg), toy_images[:14], tiny_cfg, AugmentConfig(),
                        CbtConfig(batch_size=4, epochs=2), task_name="toy")
    assert log.processed_sample_count == 2 * 4 * 3
    assert [r.epoch for r in log.epochs] == [0, 1]
    frame = log.to_frame()
    assert list(frame["processed_samples"]) == [12, 24]
    assert set(frame["task"]) == {"toy"}
    assert (frame["embed_dim"] == 3).all()
    assert all(np.isfinite(frame["loss"]))


def test_resumed_training_follows_the_same_trajectory(tiny_cfg, toy_images):
    cfg = CbtConfig(batch_size=4, epochs=3, adam=AdamConfig(lr=1e-2))
    start, aug = init_params(tiny_cfg), AugmentConfig(seed=1)
    full_params, full_log = train_task(start, toy_images, tiny_cfg, aug, cfg)

    saved = {}
    train_task(start, toy_images, tiny_cfg, aug, cfg.model_copy(update={"epochs": 1}),
               on_epoch_end=lambda e, p, a, lg: saved.update(params=p, adam=a, records=list(lg.epochs)))
    resumed_params, resumed_log = train_task(saved["params"], toy_images, tiny_cfg, aug, cfg, start_epoch=1,
                                             adam_state=saved["adam"], prior_records=saved["records"])
    assert resumed_params.equal(full_params)
    assert resumed_log.epoch_losses == full_log.epoch_losses


def test_large_lambda_pins_important_weights(tiny_cfg, toy_images):
    aug = AugmentConfig(seed=0)
    theta_star = init_params(tiny_cfg)
    snap = advance_snapshot(theta_star, toy_images, tiny_cfg, aug, CbtConfig(batch_size=4), "first")

    def drift(lam):
        cfg = CbtConfig(lam=lam, batch_size=4, epochs=5, adam=AdamConfig(lr=1e-3))
        end, _ = train_task(theta_star, toy_images, tiny_cfg, aug, cfg, snap)
        return max(float((end[n] - theta_star[n]).abs()[snap.fisher.values[n] > 0].max()) for n in end)

    assert drift(0.0) > 1e-3
    assert drift(1e6) < 1e-3


def test_advance_snapshot_replaces_the_anchor(tiny_cfg, toy_images):
    cfg, aug = CbtConfig(batch_size=4, epochs=1), AugmentConfig(seed=0)
    end = init_params(tiny_cfg)
    snap = advance_snapshot(end, toy_images[:8], tiny_cfg, aug, cfg, "droneoid")
    assert snap.theta_star.equal(end)
    assert snap.task_name == "droneoid"
    assert snap.fisher.source_task == "droneoid"
    other = advance_snapshot(end, toy_images[8:], tiny_cfg, aug, cfg, "aerialoid")
    assert not other.fisher.values.equal(snap.fisher.values)


def test_run_continual_with_one_task_is_plain_bt(tiny_cfg, toy_images):
    cfg, aug = CbtConfig(batch_size=4, epochs=2, adam=AdamConfig(lr=1e-2)), AugmentConfig(seed=3)
    ckpt, logs, snap = run_continual([TaskStream("only", toy_images)], tiny_cfg, aug, cfg)
    params, log = train_task(init_params(tiny_cfg), toy_images, tiny_cfg, aug, cfg)
    assert ckpt.params.equal(params)
    assert logs[0].epoch_losses == log.epoch_losses
    assert ckpt.provenance == ["only"]
    assert all(r.penalty == 0.0 for r in logs[0].epochs)


def test_run_continual_isolates_tasks_and_replaces_snapshots(tiny_cfg, toy_images):
    cfg, aug = CbtConfig(batch_size=4, epochs=2), AugmentConfig(seed=3)
    tasks = [TaskStream("a", toy_images[:10]), TaskStream("b", toy_images[10:16])]
    seen = []
    ckpt, logs, snap = run_continual(tasks, tiny_cfg, aug, cfg,
                                     on_task_end=lambda k, t, c, s, lg: seen.append((k, s.task_name)))
    assert [lg.processed_sample_count for lg in logs] == [cbt_sample_count(10, 2, 4), cbt_sample_count(6, 2, 4)]
    assert [lg.processed_sample_count for lg in logs] == [16, 8]
    assert seen == [(0, "a"), (1, "b")]
    assert snap.task_name == "b" and snap.fisher.num_batches == 1
    assert snap.theta_star.equal(ckpt.params)
    assert ckpt.provenance == ["a", "b"]
    assert logs[1].lam == cfg.lam and logs[0].lam == 0.0


def test_run_continual_is_reproducible(tiny_cfg, toy_images):
    cfg, aug = CbtConfig(batch_size=4, epochs=1), AugmentConfig(seed=8)
    tasks = [TaskStream("a", toy_images[:8]), TaskStream("b", toy_images[8:])]
    _, first, _ = run_continual(tasks, tiny_cfg, aug, cfg)
    _, second, _ = run_continual(tasks, tiny_cfg, aug, cfg)
    assert [lg.epoch_losses for lg in first] == [lg.epoch_losses for lg in second]


def test_run_continual_needs_tasks(tiny_cfg):
    with pytest.raises(DataError):
        run_continual([], tiny_cfg, AugmentConfig(), CbtConfig())


def test_joint_and_continual_sample_counts():
    sizes = [96, 96, 96]
    joint = [joint_sample_count(sizes, k, epochs=5, batch_size=4) for k in (1, 2, 3)]
    cbt = [cbt_sample_count(n, epochs=5, batch_size=4) for n in sizes]
    assert joint == [480, 960, 1440]
    assert cbt == [480, 480, 480]
    assert sum(cbt) / sum(joint) == 0.5


def test_joint_baseline_trains_the_union_from_scratch(tiny_cfg, toy_images):
    cfg, aug = CbtConfig(batch_size=4, epochs=2), AugmentConfig(seed=0)
    tasks = [TaskStream("a", toy_images[:8]), TaskStream("b", toy_images[8:])]
    ckpt, log = run_joint_baseline(tasks, 2, tiny_cfg, aug, cfg)
    assert log.processed_sample_count == joint_sample_count([8, 8], 2, 2, 4) == 32
    assert ckpt.provenance == ["a", "b"]
    with pytest.raises(DataError):
        run_joint_baseline(tasks, 3, tiny_cfg, aug, cfg)


def test_snapshot_round_trip(tmp_path, tiny_cfg, toy_images):
    params = init_params(tiny_cfg)
    snap = advance_snapshot(params, toy_images[:8], tiny_cfg, AugmentConfig(), CbtConfig(batch_size=4), "satelloid")
    save_snapshot(snap, tmp_path / "snapshot.cbt", tiny_cfg)
    loaded, cfg = load_snapshot(tmp_path / "snapshot.cbt")
    assert cfg == tiny_cfg
    assert loaded.task_name == "satelloid"
    assert loaded.theta_star.equal(snap.theta_star)
    assert loaded.fisher.values.equal(snap.fisher.values)
    assert loaded.fisher.num_batches == snap.fisher.num_batches

    save_checkpoint(Checkpoint(params=params, encoder_config=tiny_cfg), tmp_path / "checkpoint.cbt")
    with pytest.raises(CheckpointFormatError):
        load_snapshot(tmp_path / "checkpoint.cbt")


@pytest.mark.slow
def test_training_reduces_the_loss():
    ds = generate_task(PRESETS["aerialoid"], TaskCounts())
    improved = []
    for seed in range(3):
        cfg = CbtConfig(seed=seed)
        _, log = train_task(init_params(EncoderConfig(init_seed=seed)), ds.unlabeled, EncoderConfig(init_seed=seed),
                            AugmentConfig(), cfg, ids=ds.unlabeled_ids)
        losses = log.epoch_losses
        improved.append(min(losses[1:]) < losses[0])
    assert sorted(improved)[1]
