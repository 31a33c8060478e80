import numpy as np
import pytest
import torch
from torch import nn

from stvsa.core.types import GridTopology
from stvsa.lgat import (LGAT, GATLayer, LgatConfig, LSTMBaseline, TrainingDivergedError, attention_coefficients,
                        fit_classifier, gat_aggregate, gat_layer, lgat_forward, lstm_baseline_forward, lstm_encode,
                        neighborhood_mask, zero_readout)
from stvsa.core.rng import RngStream

TOY = LgatConfig(heads=2, head_dim=3, lstm_hidden=3)


def toy_model(topo, seed, cfg=TOY):
    torch.manual_seed(seed)
    return LGAT(topo, 4, cfg).double()


@torch.no_grad()
def central_difference(f, t: torch.Tensor, h=1e-6) -> torch.Tensor:
    out = torch.zeros_like(t)
    flat, gflat = t.view(-1), out.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# --- LSTM encoder --------------------------------------------------------------------------

def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_lstm_single_step_hand_evaluated():
    torch.manual_seed(0)
    lstm = nn.LSTM(2, 3, batch_first=True).double()
    x = np.array([[0.3, -0.7]])
    w_ih, b_ih = lstm.weight_ih_l0.detach().numpy(), lstm.bias_ih_l0.detach().numpy()
    b_hh = lstm.bias_hh_l0.detach().numpy()
    z = w_ih @ x[0] + b_ih + b_hh  # h0 = 0, so W_hh drops out
    i, f, g, o = np.split(z, 4)
    c = sigmoid(i) * np.tanh(g)
    h = sigmoid(o) * np.tanh(c)
    out = lstm_encode(torch.as_tensor(x), lstm).detach().numpy()
    assert np.allclose(out, h, atol=1e-12)


def test_lstm_zero_input_zero_bias_gives_zero_state():
    lstm = nn.LSTM(4, 5, batch_first=True)
    with torch.no_grad():
        lstm.bias_ih_l0.zero_()
        lstm.bias_hh_l0.zero_()
    assert torch.all(lstm_encode(torch.zeros(7, 4), lstm) == 0)


def test_lstm_constant_input_converges():
    torch.manual_seed(1)
    lstm = nn.LSTM(2, 4, batch_first=True).double()
    with torch.no_grad():
        for p in lstm.parameters():
            p.mul_(0.5)
    x = torch.full((32, 2), 0.4, dtype=torch.float64)
    h = {t: lstm_encode(x[:t], lstm) for t in (8, 16, 32)}
    assert (h[32] - h[16]).norm() < (h[16] - h[8]).norm()


# --- attention -------------------------------------------------------------------------------

def test_attention_hand_oracle_path3(path3):
    h = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    alpha = attention_coefficients(h, torch.eye(2, dtype=torch.float64),
                                   torch.tensor([1.0, 0.0, 0.0, -1.0], dtype=torch.float64), path3)
    expected = np.array([
        [0.7310585786300049, 0.2689414213699951, 0.0],
        [0.3791524530939888, 0.31042377345300565, 0.31042377345300565],
        [0.0, 0.5, 0.5],
    ])
    assert np.allclose(alpha.numpy(), expected, atol=1e-9)
    assert alpha[0, 2] == 0 and alpha[2, 0] == 0


def test_singleton_neighborhood_attends_to_self():
    alpha = attention_coefficients(torch.randn(1, 3), torch.randn(2, 3), torch.randn(4), GridTopology(1, ()))
    assert float(alpha[0, 0]) == 1.0


def test_identical_features_give_uniform_attention(topo39):
    h = torch.ones(39, 5, dtype=torch.float64)
    alpha = attention_coefficients(h, torch.randn(4, 5, dtype=torch.float64), torch.randn(8, dtype=torch.float64),
                                   topo39).numpy()
    sizes = np.array([len(n) for n in topo39.neighborhoods])
    mask = topo39.neighbor_mask()
    assert np.allclose(alpha[mask], np.repeat(1 / sizes, sizes), atol=1e-12)


def test_attention_rows_sum_to_one_and_vanish_outside(topo39):
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = torch.as_tensor(rng.standard_normal((39, 6)))
        alpha = attention_coefficients(h, torch.as_tensor(rng.standard_normal((4, 6))),
                                       torch.as_tensor(rng.standard_normal(8)), topo39).numpy()
        assert np.allclose(alpha.sum(1), 1, atol=1e-6)
        assert np.all(alpha[~topo39.neighbor_mask()] == 0)


# --- GAT layers -------------------------------------------------------------------------------

def test_identity_layer_is_identity():
    h = torch.randn(4, 3, dtype=torch.float64)
    out = gat_aggregate(h, torch.eye(3, dtype=torch.float64)[None], torch.randn(1, 6, dtype=torch.float64),
                        torch.eye(4, dtype=torch.bool), "average", activation=lambda x: x)
    assert torch.allclose(out, h, atol=1e-15)


def test_two_node_weighted_sum_by_hand():
    h = torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=torch.float64)
    W = torch.tensor([[[2.0, 0.0], [1.0, 1.0]]], dtype=torch.float64)
    a = torch.zeros(1, 4, dtype=torch.float64)  # equal logits -> alpha = 1/2 everywhere
    out = gat_aggregate(h, W, a, torch.ones(2, 2, dtype=torch.bool), "concat", activation=lambda x: x)
    wh = (W[0] @ h.T).T
    assert torch.allclose(out, 0.5 * (wh[0] + wh[1]).expand(2, 2), atol=1e-15)


def test_layer_output_dims(topo39):
    cfg = LgatConfig()
    concat = GATLayer(128, cfg.head_dim, cfg.heads, "concat")
    avg = GATLayer(128, cfg.head_dim, cfg.heads, "average")
    h = torch.randn(2, 39, 128)
    assert gat_layer(h, concat, topo39).shape == (2, 39, 4 * 32) == (2, 39, concat.out_dim)
    assert gat_layer(h, avg, topo39).shape == (2, 39, 32)
    with pytest.raises(ValueError):
        GATLayer(4, 2, 1, "sum")


def test_average_mode_applies_activation_after_mean():
    torch.manual_seed(2)
    h = torch.randn(3, 2, dtype=torch.float64)
    W, a = torch.randn(2, 2, 2, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64)
    mask = torch.ones(3, 3, dtype=torch.bool)
    lin = gat_aggregate(h, W, a, mask, "average", activation=lambda x: x)
    assert torch.allclose(gat_aggregate(h, W, a, mask, "average", activation=torch.sigmoid), torch.sigmoid(lin))


# --- full models -----------------------------------------------------------------------------

def test_zero_readout_gives_even_odds(topo39):
    model = LGAT(topo39, 4, TOY)
    zero_readout(model)
    x = np.random.default_rng(0).random((3, 39, 5, 4))
    assert torch.all(lgat_forward(x, model) == 0)
    assert np.allclose(model.predict_proba(x), 0.5)
    base = LSTMBaseline()
    zero_readout(base)
    assert torch.all(lstm_baseline_forward(x, base) == 0)


def test_automorphism_invariance(ring5):
    model = toy_model(ring5, 3)
    x = torch.as_tensor(np.random.default_rng(1).random((2, 5, 6, 4)))
    rotated = torch.roll(x, 2, dims=1)  # a rotation is an automorphism of the ring
    reflected = x[:, [0, 4, 3, 2, 1]]
    base = model(x)
    assert torch.allclose(model(rotated), base, rtol=0, atol=1e-12)
    assert torch.allclose(model(reflected), base, rtol=0, atol=1e-12)


def test_baseline_is_node_order_blind():
    torch.manual_seed(0)
    model = LSTMBaseline().double()
    x = torch.as_tensor(np.random.default_rng(2).random((2, 7, 5, 4)))
    perm = torch.as_tensor(np.random.default_rng(3).permutation(7))
    assert torch.allclose(model(x[:, perm]), model(x), atol=1e-12)


def test_logits_finite_under_fuzzing(ring5):
    model = LGAT(ring5, 4, TOY)
    x = np.random.default_rng(4).uniform(-3, 3, (1000, 5, 6, 4))
    with torch.no_grad():
        assert torch.all(torch.isfinite(model.logits(x)))


def test_topology_mismatch_rejected(topo39, ring5):
    with pytest.raises(ValueError, match="topology"):
        LGAT(ring5, 4, TOY).logits(np.zeros((1, 39, 3, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        LgatConfig(heads=0)
    with pytest.raises(ValueError):
        LgatConfig(hidden_activation="swish")


# --- gradients (64-bit finite differences) ---------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_parameter_gradients_match_finite_differences(ring5, seed):
    model = toy_model(ring5, seed)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.random((3, 5, 4, 4)))
    y = torch.as_tensor(rng.integers(0, 2, 3))
    loss = lambda: nn.functional.cross_entropy(model(x), y)  # noqa: E731
    model.zero_grad()
    loss().backward()
    params = list(model.parameters())
    grads = torch.cat([p.grad.reshape(-1) for p in params])
    fd = torch.cat([central_difference(loss, p.data).reshape(-1) for p in params])
    # norm-wise over the whole parameter vector: entries near 1e-8 sit below the difference quotient's roundoff
    assert rel_err(grads, fd) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_input_gradient_matches_finite_differences(ring5, seed):
    model = toy_model(ring5, 10 + seed)
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.random((2, 5, 4, 4)))
    y = rng.integers(0, 2, 2)
    g = model.input_gradient(x.numpy(), y)
    yt = torch.as_tensor(y)
    fd = central_difference(lambda: nn.functional.cross_entropy(model(x), yt, reduction="sum"), x)
    assert rel_err(g, fd) < 1e-4


# --- training loop ---------------------------------------------------------------------------

def test_fit_zero_lr_keeps_parameters(ring5):
    model = LGAT(ring5, 4, TOY)
    before = model.flat_parameters().clone()
    x = np.random.default_rng(0).random((8, 5, 3, 4)).astype(np.float32)
    fit_classifier(model, x, np.arange(8) % 2, lr=0.0, batch_size=4, epochs=3, stream=RngStream(0, 0))
    assert torch.equal(model.flat_parameters(), before)


def test_fit_reports_divergence(ring5):
    model = LGAT(ring5, 4, TOY)
    x = np.full((4, 5, 3, 4), np.nan, dtype=np.float32)
    with pytest.raises(TrainingDivergedError):
        fit_classifier(model, x, np.arange(4) % 2, lr=1e-3, batch_size=4, epochs=1, stream=RngStream(0, 0))


def test_neighborhood_mask_matches_topology(path3):
    assert np.array_equal(neighborhood_mask(path3).numpy(), path3.neighbor_mask())
