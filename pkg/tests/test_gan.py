import csv

import numpy as np
import pytest
import torch
from torch import nn

from stvsa.core.rng import RngStream
from stvsa.core.types import Dataset, GridTopology, Provenance
from stvsa.gan import (
    Critic,
    GanConfig,
    GanDivergenceError,
    critic_loss,
    eval_generation_quality,
    frechet_distance,
    generator_loss,
    gradient_penalty,
    init_gan,
    load_gan,
    mmd_rbf,
    noise_baseline,
    save_gan,
    sliced_wasserstein,
    spectral_normalize,
    synthesize,
    synthesize_dataset,
    train_sncwgan_gp,
)

from conftest import random_dataset, two_blob_dataset

TINY = GanConfig(noise_dim=8, width=8, batch_size=16, critic_steps=2, n_steps=3)


class LinearCritic(nn.Module):
    def __init__(self, w, scale=1.0):
        super().__init__()
        self.w = torch.as_tensor(w, dtype=torch.float64)
        self.scale = scale

    def forward(self, x, y):
        return self.scale * (x.flatten(1) @ self.w.flatten())


class ConstantCritic(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x, y):
        return torch.full((len(x),), self.c, dtype=x.dtype)


def _unit(shape, seed):
    w = np.random.default_rng(seed).standard_normal(shape)
    return w / np.linalg.norm(w)


# --- spectral normalisation --------------------------------------------------------------

def test_spectral_normalize_identity_unchanged():
    np.testing.assert_allclose(spectral_normalize(np.eye(5)), np.eye(5), atol=1e-12)


def test_spectral_normalize_diag():
    np.testing.assert_allclose(spectral_normalize(np.diag([3.0, 1.0])), np.diag([1.0, 1 / 3]), atol=1e-9)


def test_spectral_normalize_random_matrices_against_svd():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m, n = rng.integers(1, 65, size=2)
        W = rng.standard_normal((m, n)) * rng.uniform(0.01, 100)
        sigma = np.linalg.svd(spectral_normalize(W), compute_uv=False)[0]
        assert 0.999 <= sigma <= 1.001


def test_spectral_normalize_zero_matrix_raises():
    with pytest.raises(ValueError):
        spectral_normalize(np.zeros((3, 3)))


def test_spectral_normalize_torch_in_torch_out():
    W = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    out = spectral_normalize(W)
    assert isinstance(out, torch.Tensor)
    torch.testing.assert_close(out, torch.tensor([[1.0, 0.0], [0.0, 0.5]], dtype=torch.float64))


def test_critic_weights_are_spectrally_normalised():
    D = Critic(3, 8, 2, GanConfig(width=8))
    D.train()
    x = torch.rand(4, 3, 8, 2)
    y = torch.tensor([0, 1, 0, 1])
    for _ in range(50):  # power iteration converges across forward passes
        D(x, y)
    for W in D.weight_matrices():
        sigma = torch.linalg.matrix_norm(W.detach().double(), ord=2).item()
        assert 0.99 <= sigma <= 1.01


# --- gradient penalty and losses -------------------------------------------------------------

def test_penalty_zero_for_unit_linear_critic():
    x = torch.rand(6, 2, 3, 2, dtype=torch.float64)
    f = torch.rand(6, 2, 3, 2, dtype=torch.float64)
    D = LinearCritic(_unit((2, 3, 2), 1))
    assert gradient_penalty(D, x, f, None, RngStream(0, 0)).item() == pytest.approx(0.0, abs=1e-12)


def test_penalty_ten_for_double_norm_linear_critic():
    x = torch.rand(6, 2, 3, 2, dtype=torch.float64)
    D = LinearCritic(_unit((2, 3, 2), 2), scale=2.0)
    assert gradient_penalty(D, x, x.clone(), None, RngStream(0, 0)).item() == pytest.approx(10.0, abs=1e-9)


def test_penalty_ten_for_constant_critic():
    x = torch.rand(4, 1, 2, 2, dtype=torch.float64)
    assert gradient_penalty(ConstantCritic(3.0), x, x, None, RngStream(0, 0)).item() == pytest.approx(10.0)


def test_penalty_shape_mismatch_raises():
    with pytest.raises(ValueError):
        gradient_penalty(ConstantCritic(0.0), torch.zeros(2, 1, 2, 2), torch.zeros(3, 1, 2, 2), None,
                         RngStream(0, 0))


def test_penalty_non_finite_gradient_raises():
    class NanCritic(nn.Module):
        def forward(self, x, y):
            return (x * float("nan")).flatten(1).sum(1)

    x = torch.rand(2, 1, 2, 2, dtype=torch.float64)
    with pytest.raises(GanDivergenceError):
        gradient_penalty(NanCritic(), x, x, None, RngStream(0, 0))


def _fd_relerr(f, x, analytic, h=1e-6):
    num = torch.zeros_like(x)
    flat, nflat = x.view(-1), num.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        nflat[i] = (up - down) / (2 * h)
    return ((analytic - num).norm() / num.norm().clamp_min(1e-30)).item()


def _critic64(seed):
    torch.manual_seed(seed)
    D = Critic(2, 4, 2, GanConfig(width=4, label_embed_dim=2)).double()
    D.eval()  # freeze the power-iteration vectors so D is a fixed function
    return D


@pytest.mark.parametrize("seed", range(5))
def test_critic_input_gradient_matches_finite_differences(seed):
    D = _critic64(seed)
    x = torch.rand(1, 2, 4, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    y = torch.tensor([seed % 2])
    xr = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(D(xr, y).sum(), xr)
    with torch.no_grad():
        err = _fd_relerr(lambda: D(x, y).sum().item(), x, grad)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_penalty_parameter_gradient_matches_finite_differences(seed):
    D = _critic64(seed)
    g = torch.Generator().manual_seed(100 + seed)
    x = torch.rand(3, 2, 4, 2, dtype=torch.float64, generator=g)
    f = torch.rand(3, 2, 4, 2, dtype=torch.float64, generator=g)
    y = torch.tensor([0, 1, seed % 2])
    stream = RngStream(seed, 0)
    params = [p for p in D.parameters() if p.requires_grad]
    D.zero_grad()
    gradient_penalty(D, x, f, y, stream).backward()
    # biases do not affect the input gradient, so they receive no penalty gradient
    analytic = torch.cat([(p.grad if p.grad is not None else torch.zeros_like(p)).flatten() for p in params])
    with torch.no_grad():
        num = []
        for p in params:
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + 1e-6
                with torch.enable_grad():
                    up = gradient_penalty(D, x, f, y, stream).item()
                flat[i] = old - 1e-6
                with torch.enable_grad():
                    down = gradient_penalty(D, x, f, y, stream).item()
                flat[i] = old
                num.append((up - down) / 2e-6)
    num = torch.tensor(num, dtype=torch.float64)
    assert ((analytic - num).norm() / num.norm()).item() < 1e-4


def test_losses_with_constant_critic():
    cfg = GanConfig(noise_dim=4, width=4)
    state = init_gan((2, 4, 2), cfg, seed=0)
    x = torch.rand(5, 2, 4, 2)
    y = torch.tensor([0, 1, 0, 1, 1])
    D = ConstantCritic(2.5)
    assert critic_loss(D, state.generator, (x, y), cfg, RngStream(0, 0)).item() == pytest.approx(10.0)
    assert generator_loss(D, state.generator, (x, y), cfg, RngStream(0, 0)).item() == pytest.approx(-2.5)


def test_wasserstein_term_zero_when_fake_equals_real():
    class EchoGenerator(nn.Module):
        def __init__(self, x):
            super().__init__()
            self.x = x

        def forward(self, z, y):
            return self.x

    x = torch.rand(4, 1, 3, 2, dtype=torch.float64)
    y = torch.zeros(4, dtype=torch.long)
    D = LinearCritic(_unit((1, 3, 2), 5))
    cfg = GanConfig(noise_dim=2)
    assert critic_loss(D, EchoGenerator(x), (x, y), cfg, RngStream(0, 0)).item() == pytest.approx(0.0, abs=1e-12)


# --- training and synthesis -----------------------------------------------------------------

@pytest.fixture
def tiny_real(path3):
    return random_dataset(path3, 24, steps=6, channels=2, seed=3)


def test_zero_steps_equals_initialisation(tiny_real):
    cfg = GanConfig(noise_dim=8, width=8, n_steps=0)
    trained = train_sncwgan_gp(tiny_real, cfg, seed=4)
    fresh = init_gan(tiny_real.features.shape[1:], cfg, seed=4)
    for a, b in zip(trained.generator.state_dict().values(), fresh.generator.state_dict().values()):
        assert torch.equal(a, b)
    assert trained.critic_trace == []


def test_training_is_deterministic(tiny_real):
    a = train_sncwgan_gp(tiny_real, TINY, seed=1)
    b = train_sncwgan_gp(tiny_real, TINY, seed=1)
    for net in ("generator", "critic"):
        for ta, tb in zip(getattr(a, net).state_dict().values(), getattr(b, net).state_dict().values()):
            assert torch.equal(ta, tb)
    assert a.critic_trace == b.critic_trace and len(a.critic_trace) == TINY.n_steps


def test_training_requires_both_categories(path3):
    ds = random_dataset(path3, 10, labels=np.ones(10, dtype=int))
    with pytest.raises(ValueError):
        train_sncwgan_gp(ds, TINY)
    unl = random_dataset(path3, 10, labels=np.r_[np.zeros(5), np.full(5, -1)].astype(int))
    with pytest.raises(ValueError):
        train_sncwgan_gp(unl, TINY)


def test_divergence_aborts_with_trace(tiny_real):
    cfg = GanConfig(noise_dim=8, width=8, n_steps=5, critic_lr=1e30, generator_lr=1e30, batch_size=8)
    with pytest.raises(GanDivergenceError) as info:
        train_sncwgan_gp(tiny_real, cfg, seed=0)
    assert isinstance(info.value.critic_trace, list)


def test_synthesize_counts_provenance_and_range(tiny_real):
    state = train_sncwgan_gp(tiny_real, TINY, seed=0)
    samples = synthesize(state, {"stable": 7, "unstable": 4}, seed=2)
    labels = [int(s.label) for s in samples]
    assert labels.count(1) == 7 and labels.count(0) == 4
    assert all(s.provenance == Provenance.GAN_SYNTHETIC for s in samples)
    feats = np.stack([s.features for s in samples])
    assert feats.min() >= 0 and feats.max() <= 1
    assert synthesize(state, (0, 0), seed=2) == []


def test_synthesize_request_balances_to_target_total(tiny_real):
    state = init_gan(tiny_real.features.shape[1:], TINY, seed=0)
    ds = synthesize_dataset(state, tiny_real.topology, (4300, 4300), seed=0)
    assert 3400 + len(ds) == 12000
    assert np.sum(ds.labels == 0) == np.sum(ds.labels == 1) == 4300


def test_synthesize_is_deterministic(tiny_real):
    state = init_gan(tiny_real.features.shape[1:], TINY, seed=0)
    a = synthesize_dataset(state, tiny_real.topology, (5, 5), seed=9)
    b = synthesize_dataset(state, tiny_real.topology, (5, 5), seed=9)
    assert np.array_equal(a.features, b.features)


def test_checkpoint_roundtrip_and_loss_csv(tiny_real, tmp_path):
    state = train_sncwgan_gp(tiny_real, TINY, seed=5)
    save_gan(state, tmp_path / "gan")
    back = load_gan(tmp_path / "gan")
    for net in ("generator", "critic"):
        for ta, tb in zip(getattr(state, net).state_dict().values(), getattr(back, net).state_dict().values()):
            assert torch.equal(ta, tb)
    assert back.critic_trace == state.critic_trace
    a = synthesize_dataset(state, tiny_real.topology, (3, 3), seed=1)
    b = synthesize_dataset(back, tiny_real.topology, (3, 3), seed=1)
    assert np.array_equal(a.features, b.features)
    with open(tmp_path / "gan" / "losses.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "critic_loss", "generator_loss"]
    assert len(rows) == TINY.n_steps + 1


@pytest.mark.slow
def test_gan_learns_two_mode_gaussian_toy():
    topo = GridTopology(1, ())
    rng = np.random.default_rng(0)
    n = 400
    y = np.arange(n) % 2
    centres = np.where(y[:, None] == 1, [0.7, 0.7], [0.3, 0.3])
    feats = (centres + 0.05 * rng.standard_normal((n, 2))).reshape(n, 1, 1, 2)
    real = Dataset(topo, feats, y, [Provenance.SIMULATED] * n)
    cfg = GanConfig(noise_dim=8, width=16, batch_size=64, n_steps=600)
    state = train_sncwgan_gp(real, cfg, seed=0)
    fake = synthesize_dataset(state, topo, (n // 2, n // 2), seed=1)
    assert sliced_wasserstein(real, fake) < 0.5 * sliced_wasserstein(real, noise_baseline(real))
    # conditioning: each category's samples land on its own mode
    for lab, centre in ((0, 0.3), (1, 0.7)):
        sel = fake.features[fake.labels == lab].reshape(-1, 2)
        assert np.all(np.abs(sel.mean(axis=0) - centre) < 0.1)


# --- generation-quality metrics ----------------------------------------------------------------

def test_metrics_vanish_on_identical_sets(path3):
    ds = two_blob_dataset(path3, 40, seed=1)
    q = eval_generation_quality(ds, ds.features)
    assert q["wd"] == pytest.approx(0, abs=1e-6)
    assert q["mmd"] == pytest.approx(0, abs=1e-6)
    assert q["fd"] == pytest.approx(0, abs=1e-6)


def test_point_masses_wd_is_one():
    assert sliced_wasserstein(np.zeros((5, 1)), np.ones((7, 1))) == pytest.approx(1.0)


def test_metrics_symmetric_and_nonnegative():
    rng = np.random.default_rng(2)
    a, b = rng.random((30, 6)), rng.random((25, 6)) + 0.2
    assert sliced_wasserstein(a, b) == pytest.approx(sliced_wasserstein(b, a), abs=1e-12)
    assert mmd_rbf(a, b) == pytest.approx(mmd_rbf(b, a), abs=1e-12)
    assert sliced_wasserstein(a, b) > 0 and mmd_rbf(a, b) > 0
    assert frechet_distance(a, b) >= 0


def test_mmd_matches_brute_force():
    rng = np.random.default_rng(3)
    a, b = rng.random((8, 3)), rng.random((6, 3))
    pooled = np.concatenate([a, b])
    d = [np.linalg.norm(p - q) for i, p in enumerate(pooled) for q in pooled[i + 1:]]
    bw = np.median(d)

    def k(p, q):
        return np.exp(-np.sum((p - q) ** 2) / (2 * bw**2))

    expect = (np.mean([k(p, q) for p in a for q in a]) + np.mean([k(p, q) for p in b for q in b])
              - 2 * np.mean([k(p, q) for p in a for q in b]))
    assert mmd_rbf(a, b) == pytest.approx(expect, abs=1e-12)


def test_frechet_matches_univariate_closed_form():
    rng = np.random.default_rng(4)
    a, b = rng.normal(0, 1, (200, 1)), rng.normal(2, 3, (300, 1))
    sa, sb = a.std(ddof=1), b.std(ddof=1)
    expect = (a.mean() - b.mean()) ** 2 + (sa - sb) ** 2
    assert frechet_distance(a, b) == pytest.approx(expect, rel=1e-9)


def test_frechet_singular_covariance_uses_ridge(caplog):
    a = np.zeros((10, 3))
    a[:, 0] = np.arange(10)
    with caplog.at_level("INFO"):
        assert frechet_distance(a, a) == pytest.approx(0, abs=1e-6)
    assert "ridge" in caplog.text


def test_quality_rejects_mismatched_shapes(path3):
    ds = two_blob_dataset(path3, 10)
    with pytest.raises(ValueError):
        eval_generation_quality(ds, np.zeros((3, 3, 4, 4)))
    with pytest.raises(ValueError):
        eval_generation_quality(ds, np.zeros((0, 3, 8, 4)))
