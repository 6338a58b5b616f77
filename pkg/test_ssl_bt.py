import pytest
import torch

from augment import AugmentConfig
from handlers.errors import ShapeError
from model import EncoderConfig, init_params
from numerics import finite_diff_grad, max_relative_error, value_and_grad
from ssl_bt import (CORRELATION_TOL, BtLossConfig, CrossCorrelation, bt_loss, bt_loss_on_batch,
                    cross_correlation)


def t(rows):
    return torch.tensor(rows, dtype=torch.float64)


def corr(rows):
    return CrossCorrelation(matrix=t(rows), batch_size=2)


def test_cross_correlation_examples():
    assert torch.allclose(cross_correlation(t([[1], [-1]]), t([[1], [-1]])).matrix, t([[1]]), atol=1e-4)
    assert torch.allclose(cross_correlation(t([[1], [-1]]), t([[-1], [1]])).matrix, t([[-1]]), atol=1e-4)
    c = cross_correlation(t([[1, 1], [-1, -1]]), t([[1, -1], [-1, 1]]))
    assert torch.allclose(c.matrix, t([[1, -1], [1, -1]]), atol=1e-4)
    assert c.batch_size == 2


def test_cross_correlation_errors():
    with pytest.raises(ShapeError):
        cross_correlation(t([[1, 2]]), t([[1, 2]]))
    with pytest.raises(ShapeError):
        cross_correlation(t([[1], [2]]), t([[1, 2], [3, 4]]))


def test_bt_loss_worked_examples():
    assert [float(v) for v in bt_loss(corr([[1, 0], [0, 1]]))] == [0.0, 0.0, 0.0]
    for mu in (0.005, 1.0, 10.0):
        assert float(bt_loss(corr([[-1]]), BtLossConfig(mu=mu)).total) == pytest.approx(4.0, abs=1e-12)
    terms = bt_loss(corr([[1, -1], [1, -1]]), BtLossConfig(mu=0.005))
    assert float(terms.invariance) == pytest.approx(4.0, abs=1e-6)
    assert float(terms.redundancy) == pytest.approx(2.0, abs=1e-6)
    assert float(terms.total) == pytest.approx(4.01, abs=1e-6)


def test_bt_loss_rejects_non_square():
    with pytest.raises(ShapeError):
        bt_loss(CrossCorrelation(torch.zeros(2, 3, dtype=torch.float64), 2))


@pytest.mark.parametrize("seed", range(5))
def test_correlation_properties(seed):
    gen = torch.Generator().manual_seed(seed)
    z_a = torch.randn(12, 4, generator=gen, dtype=torch.float64)
    z_b = z_a + 0.5 * torch.randn(12, 4, generator=gen, dtype=torch.float64)
    c = cross_correlation(z_a, z_b).matrix
    assert float(c.abs().max()) <= 1 + CORRELATION_TOL

    perm = torch.randperm(12, generator=gen)
    assert torch.allclose(cross_correlation(z_a[perm], z_b[perm]).matrix, c, atol=1e-12)

    scale = torch.tensor([1.0, 3.0, 0.5, 7.0], dtype=torch.float64)
    assert torch.allclose(cross_correlation(z_a * scale, z_b).matrix, c, atol=1e-4)

    losses = [float(bt_loss(CrossCorrelation(c, 12), BtLossConfig(mu=mu)).total) for mu in (0.001, 0.01, 0.1)]
    assert losses == sorted(losses)
    assert losses[0] > 0


def test_identity_augmentation_has_no_invariance_cost(tiny_cfg, toy_images):
    terms = bt_loss_on_batch(init_params(tiny_cfg), tiny_cfg, toy_images[:8], AugmentConfig.identity(),
                             BtLossConfig(), draw_index=0)
    assert float(terms.invariance) < 1e-5
    assert float(terms.total) > 0


def test_bt_loss_on_batch_is_deterministic(tiny_cfg, toy_images):
    params, aug = init_params(tiny_cfg), AugmentConfig(seed=9)
    a = bt_loss_on_batch(params, tiny_cfg, toy_images[:4], aug, BtLossConfig(), draw_index=3)
    b = bt_loss_on_batch(params, tiny_cfg, toy_images[:4], aug, BtLossConfig(), draw_index=3)
    assert torch.equal(a.total, b.total)


@pytest.mark.parametrize("seed", range(20))
def test_bt_gradient_matches_finite_differences(tiny_cfg, toy_images, seed):
    cfg = tiny_cfg.model_copy(update={"init_seed": seed})
    x = toy_images[4 * (seed % 4):4 * (seed % 4) + 4]
    aug = AugmentConfig(seed=seed)

    def loss_fn(p):
        return bt_loss_on_batch(p, cfg, x, aug, BtLossConfig(), draw_index=seed).total

    params = init_params(cfg)
    _, grads = value_and_grad(loss_fn, params)
    assert max_relative_error(grads, finite_diff_grad(loss_fn, params, h=1e-3)) < 1e-4


# ReLU kinks need a step small enough that no pre-activation crosses zero.
@pytest.mark.parametrize("activation, h", [("tanh", 1e-3), ("relu", 1e-6)])
@pytest.mark.parametrize("kind, widths", [("mlp", (6,)), ("tinyconv", (3, 4, 5))])
@pytest.mark.parametrize("seed", range(3))
def test_bt_gradient_for_each_encoder(toy_images, activation, h, kind, widths, seed):
    cfg = EncoderConfig(input_shape=(1, 8, 8), kind=kind, hidden_widths=widths, embed_dim=3, projector_widths=(4,),
                        activation=activation, init_seed=seed)
    x = toy_images[2 * seed:2 * seed + 6]
    aug = AugmentConfig(seed=seed)

    def loss_fn(p):
        return bt_loss_on_batch(p, cfg, x, aug, BtLossConfig(), draw_index=seed).total

    params = init_params(cfg)
    _, grads = value_and_grad(loss_fn, params)
    assert max_relative_error(grads, finite_diff_grad(loss_fn, params, h=h)) < 1e-4
