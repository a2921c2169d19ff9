import math

import numpy as np
import pytest
import torch

import diffcore as dc
from deen import (
    DegenerateRange,
    EmptyInput,
    EnergyBounds,
    EnergyNet,
    bayes_estimate,
    corrupt,
    deen_loss,
    energy,
    energy_bounds,
    energy_gradient,
    energy_histogram,
    histogram_edges,
    scaled_widths,
    score,
    train_deen,
)
from diffcore import ShapeMismatch
from schemas import PipelineConfig


def quadratic(y):
    return 0.5 * (y ** 2).sum(dim=-1)


def small_net(seed=0, d=4, widths=(6, 5, 4)):
    torch.manual_seed(seed)
    return EnergyNet(d, list(widths))


def two_clusters(n=128, d=4, seed=0, std=0.05):
    rng = np.random.default_rng(seed)
    centres = np.stack([np.ones(d), -np.ones(d)])
    return centres[rng.integers(0, 2, size=n)] + std * rng.standard_normal((n, d))


# ── network ───────────────────────────────────────────────────────────────
def test_scaled_widths():
    assert scaled_widths(1.0) == [3072, 2048, 1024]
    assert scaled_widths(0.02) == [61, 41, 20]
    assert scaled_widths(1e-6) == [1, 1, 1]


def test_skip_topology_fan_in():
    net = EnergyNet(10, [6, 5, 4])
    assert [layer.in_features for layer in net.hidden] == [10, 6 + 10, 5 + 6]
    assert net.out.in_features == 4 + 5
    assert next(net.parameters()).dtype == torch.float64


def test_energy_shapes():
    net = small_net()
    y = torch.randn(7, 4, dtype=torch.float64)
    assert energy(net, y).shape == (7,)
    assert energy(net, y[0]).dim() == 0
    assert float(energy(net, y[0])) == pytest.approx(float(energy(net, y)[0]))
    with pytest.raises(ShapeMismatch):
        energy(net, torch.zeros(2, 5))


def test_single_row_gradient_matches_batched():
    net = small_net()
    y = torch.randn(5, 4, dtype=torch.float64)
    batched = energy_gradient(net, y)
    for i in range(5):
        np.testing.assert_allclose(energy_gradient(net, y[i]).detach().numpy(),
                                   batched[i].detach().numpy(), atol=1e-12)


def test_standardization_buffers():
    net = small_net()
    latents = torch.tensor([[0.0, 1.0, 2.0, 5.0], [4.0, 1.0, 4.0, 5.0]], dtype=torch.float64)
    net.set_standardization(latents)
    assert net.shift.tolist() == [2.0, 1.0, 3.0, 5.0]
    # constant columns keep a unit scale
    assert net.scale.tolist() == [2.0, 1.0, 1.0, 1.0]


# ── energy, score, estimator ──────────────────────────────────────────────
def test_gradient_and_score_of_a_quadratic():
    y = torch.tensor([[1.0, -2.0], [0.5, 3.0]], dtype=torch.float64)
    np.testing.assert_allclose(energy_gradient(quadratic, y).detach().numpy(), y.numpy())
    np.testing.assert_allclose(score(quadratic, y).numpy(), -y.numpy())


def test_bayes_estimate_of_a_quadratic():
    y = torch.tensor([2.0, -4.0], dtype=torch.float64)
    np.testing.assert_allclose(bayes_estimate(quadratic, y, 0.5).numpy(), 0.75 * y.numpy())
    np.testing.assert_allclose(bayes_estimate(quadratic, y, 0.0).numpy(), y.numpy())


def test_loss_of_a_flat_energy_is_the_noise():
    clean = torch.zeros(3, 2, dtype=torch.float64)
    noisy = torch.tensor([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], dtype=torch.float64)
    flat = lambda y: (0.0 * y).sum(dim=-1)  # noqa: E731
    assert float(deen_loss(flat, (clean, noisy), 0.3)) == pytest.approx((1 + 4 + 2) / 3)
    with pytest.raises(EmptyInput):
        deen_loss(flat, (clean[:0], noisy[:0]), 0.3)
    with pytest.raises(ShapeMismatch):
        deen_loss(flat, (clean, noisy[:2]), 0.3)


@pytest.mark.parametrize("offset", [-37.5, 0.125, 1e3])
def test_constant_energy_offset_changes_nothing(offset):
    net = small_net(seed=4)
    shifted = lambda y: net(y) + offset  # noqa: E731
    rng = np.random.default_rng(3)
    clean, noisy = corrupt(rng.standard_normal((16, 4)), 0.25, rng=rng)
    np.testing.assert_allclose(bayes_estimate(shifted, noisy, 0.25).numpy(),
                               bayes_estimate(net, noisy, 0.25).numpy(), atol=1e-12)
    assert float(deen_loss(shifted, (clean, noisy), 0.25)) == pytest.approx(
        float(deen_loss(net, (clean, noisy), 0.25)), abs=1e-12)
    reference = rng.standard_normal((32, 4))
    plain, moved = energy_bounds(net, reference), energy_bounds(shifted, reference)
    assert moved.phi_min == pytest.approx(plain.phi_min + offset)
    assert moved.beta0 == pytest.approx(plain.beta0, rel=1e-9)


def test_loss_gradient_matches_finite_differences():
    net = EnergyNet(8, [6, 5, 4])
    rng = np.random.default_rng(0)
    pairs = corrupt(rng.standard_normal((6, 8)), 0.3, rng=rng)
    name = "hidden.0.weight"

    def loss_at(w):
        energy_fn = lambda y: torch.func.functional_call(net, {name: w}, (y,))  # noqa: E731
        return deen_loss(energy_fn, pairs, 0.3)

    graph = dc.ExpressionGraph(dc.call(loss_at, dc.leaf("w")))
    point = dict(net.named_parameters())[name].detach().clone()
    assert dc.check_gradient(graph, "w", point, h=1e-6) < 1e-5


def test_corrupt():
    latents = np.arange(6.0).reshape(3, 2)
    clean, noisy = corrupt(latents, 0.0, m=2)
    assert clean.shape == noisy.shape == (6, 2)
    assert torch.equal(clean, noisy)
    assert clean[:2].tolist() == [[0.0, 1.0], [0.0, 1.0]]
    a = corrupt(latents, 0.5, rng=np.random.default_rng(1))[1]
    b = corrupt(latents, 0.5, rng=np.random.default_rng(1))[1]
    assert torch.equal(a, b)


# ── training ──────────────────────────────────────────────────────────────
def _deen_config(**overrides):
    values = dict(deen_sigma=0.25, deen_lr=3e-3, deen_batch_size=32, deen_epochs=12, deen_width_scale=0.01)
    values.update(overrides)
    return PipelineConfig(**values)


def test_training_log_and_reproducibility():
    latents = two_clusters()
    net, log = train_deen(latents, _deen_config(), seed=0, test_latents=latents[:20], progress=False)
    assert list(log.columns) == ["epoch", "train_loss", "test_loss"]
    assert log["epoch"].tolist() == list(range(1, 13))
    assert np.isfinite(log[["train_loss", "test_loss"]].to_numpy()).all()
    assert net.sigma == 0.25 and not net.training

    again, log2 = train_deen(latents, _deen_config(), seed=0, test_latents=latents[:20], progress=False)
    assert log["train_loss"].tolist() == log2["train_loss"].tolist()
    y = torch.as_tensor(latents[:3])
    assert torch.equal(energy(net, y), energy(again, y))


def test_training_reduces_the_loss():
    config = _deen_config(deen_epochs=30, deen_lr=5e-3)
    net, log = train_deen(two_clusters(), config, seed=0, progress=False)
    assert log["train_loss"].iloc[-5:].min() < log["train_loss"].iloc[0]
    assert log["test_loss"].isna().all()


@pytest.mark.slow
def test_denoising_beats_the_noise_floor():
    d, sigma = 2, 0.25
    latents = two_clusters(n=2048, d=d, std=0.02)
    held_out = two_clusters(n=500, d=d, seed=1, std=0.02)
    config = _deen_config(deen_epochs=150, deen_width_scale=0.03, deen_lr=1e-3)
    net, log = train_deen(latents, config, seed=0, test_latents=held_out, progress=False)
    assert log["test_loss"].iloc[-1] < 0.5 * d * sigma ** 2

    clean, noisy = corrupt(held_out, sigma, rng=np.random.default_rng(9))
    estimate = bayes_estimate(net, noisy, sigma)
    closer = (clean - estimate).norm(dim=-1) < (clean - noisy).norm(dim=-1)
    assert closer.double().mean() >= 0.9


def test_training_needs_latents():
    with pytest.raises(EmptyInput):
        train_deen(np.zeros((0, 4)), _deen_config(), progress=False)


# ── bounds and histograms ─────────────────────────────────────────────────
def test_energy_bounds():
    total = lambda y: y.sum(dim=-1)  # noqa: E731
    bounds = energy_bounds(total, [[0.0], [1.0], [3.0]])
    assert (bounds.phi_min, bounds.phi_max) == (0.0, 3.0)
    assert bounds.beta0 == pytest.approx(1.0 / 3.0)
    with pytest.raises(DegenerateRange):
        energy_bounds(total, [[1.0], [1.0]])
    with pytest.raises(EmptyInput):
        energy_bounds(total, np.zeros((0, 1)))


def test_checkpoint_roundtrip(tmp_path):
    net = small_net(seed=3)
    net.sigma = 0.25
    net.bounds = EnergyBounds(-1.5, 2.5)
    loaded = EnergyNet.load(net.save(tmp_path / "energy.pt", {"seed": 0}))
    assert loaded.widths == [6, 5, 4]
    assert loaded.sigma == 0.25
    assert loaded.bounds == EnergyBounds(-1.5, 2.5)
    y = torch.randn(4, 4, dtype=torch.float64)
    assert torch.equal(energy(net, y), energy(loaded, y))


def test_histograms_share_edges():
    edges = histogram_edges([[0.0, 1.0], [2.0, 4.0]], bins=4)
    np.testing.assert_allclose(edges, [0.0, 1.0, 2.0, 3.0, 4.0])
    frame = energy_histogram([0.0, 1.0, 1.5, math.nan], edges, "test_positives")
    assert frame["count"].tolist() == [1, 2, 0, 0]
    assert set(frame["series"]) == {"test_positives"}
    assert list(frame.columns) == ["bin_left", "bin_right", "count", "series"]


def test_histogram_edges_of_a_single_value():
    np.testing.assert_allclose(histogram_edges([[2.0, 2.0]], bins=2), [1.5, 2.0, 2.5])
