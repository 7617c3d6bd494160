"""Tests for positional encoding, MLPs, gradient queries, Adam, checkpoints."""

import math

import numpy as np
import pytest
import torch

from surfrec.autodiff import (AdamState, ConfigurationError, Mlp, MlpSpec,
                              adam_step, encoded_dim, grad_input, grad_params,
                              load_checkpoint, positional_encode,
                              save_checkpoint)

from helpers import fd_input_grad, fd_param_grads, max_rel_err


# ---------------------------------------------------------------------------
# positional_encode
# ---------------------------------------------------------------------------

def test_encode_zero_one_freq():
    out = positional_encode(torch.tensor([0.0]), 1)
    assert torch.equal(out, torch.tensor([0.0, 0.0, 1.0]))


def test_encode_half_one_freq():
    out = positional_encode(torch.tensor([0.5]), 1)
    assert torch.allclose(out, torch.tensor([0.5, 1.0, 0.0]), atol=1e-7)


def test_encode_two_freqs_matches_direct_formula():
    p = torch.tensor([0.25, -0.25], dtype=torch.float64)
    out = positional_encode(p, 2)
    assert out.shape == (10,)
    expect = [p]
    for k in range(2):
        expect.append(torch.sin(2.0 ** k * math.pi * p))
        expect.append(torch.cos(2.0 ** k * math.pi * p))
    assert torch.allclose(out, torch.cat(expect), atol=1e-15)
    assert encoded_dim(2, 2) == 10


def test_encode_reproducible():
    x = torch.linspace(-1, 1, 7).reshape(-1, 1)
    assert torch.equal(positional_encode(x, 6), positional_encode(x, 6))


# ---------------------------------------------------------------------------
# Mlp forward
# ---------------------------------------------------------------------------

def test_mlp_zero_weights_gives_zero():
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=2, depth=3, width=8, skip_layers=(1,)))
    with torch.no_grad():
        for lin in mlp.layers:
            lin.weight.zero_()
            lin.bias.zero_()
    out = mlp(torch.randn(5, 3))
    assert torch.equal(out, torch.zeros(5, 2))


def test_mlp_one_layer_identity():
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=3, depth=1, width=3, skip_layers=()))
    with torch.no_grad():
        mlp.layers[0].weight.copy_(torch.eye(3))
        mlp.layers[0].bias.zero_()
    x = torch.randn(4, 3)
    assert torch.allclose(mlp(x), x)


def test_mlp_two_layer_matches_matrix_oracle():
    torch.manual_seed(3)
    mlp = Mlp(MlpSpec(in_dim=4, out_dim=2, depth=2, width=6, skip_layers=()))
    x = torch.randn(7, 4)
    w0, b0 = mlp.layers[0].weight, mlp.layers[0].bias
    w1, b1 = mlp.layers[1].weight, mlp.layers[1].bias
    expect = torch.relu(x @ w0.T + b0) @ w1.T + b1
    assert torch.allclose(mlp(x), expect, atol=1e-6)


def test_mlp_skip_concats_encoded_input():
    spec = MlpSpec(in_dim=2, out_dim=1, depth=2, width=4, skip_layers=(1,),
                   encoding_freqs=1)
    mlp = Mlp(spec)
    x = torch.randn(3, 2)
    enc = positional_encode(x, 1)
    h = torch.relu(enc @ mlp.layers[0].weight.T + mlp.layers[0].bias)
    expect = torch.cat([h, enc], dim=-1) @ mlp.layers[1].weight.T \
        + mlp.layers[1].bias
    assert torch.allclose(mlp(x), expect, atol=1e-6)


def test_mlp_rejects_bad_input_dim():
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=1, depth=2, width=4, skip_layers=()))
    with pytest.raises(ConfigurationError):
        mlp(torch.randn(2, 5))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        MlpSpec(in_dim=0, out_dim=1)
    with pytest.raises(ConfigurationError):
        MlpSpec(in_dim=3, out_dim=1, depth=2, skip_layers=(2,))
    with pytest.raises(ConfigurationError):
        MlpSpec(in_dim=3, out_dim=1, hidden_activation="tanh")


# ---------------------------------------------------------------------------
# grad_input
# ---------------------------------------------------------------------------

def test_grad_input_linear_field():
    n = torch.tensor([0.6, -0.8, 0.0])
    x = torch.randn(5, 3, requires_grad=True)
    y = x @ n
    g = grad_input(y, x)
    assert torch.allclose(g, n.expand(5, 3), atol=1e-7)


def test_grad_input_radial_field():
    x = torch.tensor([[0.0, 0.0, 2.0]], requires_grad=True)
    g = grad_input(x.norm(dim=-1), x)
    assert torch.allclose(g, torch.tensor([[0.0, 0.0, 1.0]]), atol=1e-7)


def test_grad_input_matches_finite_differences():
    torch.manual_seed(11)
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=1, depth=3, width=8, skip_layers=(1,),
                      hidden_activation="softplus",
                      encoding_freqs=2)).double()
    x0 = torch.tensor([[0.31, -0.12, 0.44]], dtype=torch.float64)
    xg = x0.clone().requires_grad_(True)
    g = grad_input(mlp(xg)[:, 0], xg)
    g_fd = fd_input_grad(lambda x: mlp(x)[0, 0], x0)
    assert max_rel_err([g], [g_fd]) < 1e-6


def test_nested_gradient_matches_finite_differences():
    # d/dparams of a loss built from grad_input (second-order path)
    torch.manual_seed(5)
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=1, depth=2, width=6, skip_layers=(),
                      hidden_activation="softplus")).double()
    x = torch.tensor([[0.2, 0.5, -0.3], [-0.4, 0.1, 0.6]],
                     dtype=torch.float64)

    def loss_fn():
        xg = x.clone().requires_grad_(True)
        g = grad_input(mlp(xg)[:, 0], xg)
        return ((g.norm(dim=-1) - 1.0) ** 2).mean()

    params = list(mlp.parameters())
    grads = grad_params(loss_fn(), params)
    fd = fd_param_grads(loss_fn, params)
    assert max_rel_err(grads, fd, floor=1e-5) < 1e-4


def test_softplus_gradient_is_continuous():
    # C1 spot check: input gradient moves Lipschitz-fashion under a small
    # input perturbation (no relu-style jump).
    torch.manual_seed(7)
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=1, depth=2, width=16, skip_layers=(),
                      hidden_activation="softplus")).double()
    x = torch.randn(20, 3, dtype=torch.float64, requires_grad=True)
    g0 = grad_input(mlp(x)[:, 0], x, create_graph=False)
    eps = 1e-7
    xp = (x.detach() + eps).requires_grad_(True)
    g1 = grad_input(mlp(xp)[:, 0], xp, create_graph=False)
    assert float((g0 - g1).abs().max()) < 1e-3


# ---------------------------------------------------------------------------
# grad_params
# ---------------------------------------------------------------------------

def test_grad_params_quadratic_form():
    torch.manual_seed(2)
    W = torch.randn(4, 3, requires_grad=True)
    x = torch.randn(3)
    loss = (W @ x).pow(2).sum()
    (g,) = grad_params(loss, [W])
    expect = 2.0 * torch.outer(W.detach() @ x, x)
    assert torch.allclose(g, expect, atol=1e-5)


def test_grad_params_eikonal_matches_finite_differences():
    torch.manual_seed(13)
    mlp = Mlp(MlpSpec(in_dim=3, out_dim=1, depth=2, width=8, skip_layers=(),
                      hidden_activation="softplus")).double()
    pts = torch.randn(6, 3, dtype=torch.float64) * 0.5

    def loss_fn():
        xg = pts.clone().requires_grad_(True)
        g = grad_input(mlp(xg)[:, 0], xg)
        return ((g.norm(dim=-1) - 1.0) ** 2).mean()

    params = list(mlp.parameters())
    grads = grad_params(loss_fn(), params)
    fd = fd_param_grads(loss_fn, params)
    assert max_rel_err(grads, fd, floor=1e-5) < 1e-4


def test_grad_params_unused_parameter_is_zero():
    a = torch.randn(3, requires_grad=True)
    b = torch.randn(2, requires_grad=True)
    loss = a.pow(2).sum()
    ga, gb = grad_params(loss, [a, b])
    assert torch.equal(gb, torch.zeros(2))
    assert torch.allclose(ga, 2 * a.detach())


def test_grad_params_raises_on_nonfinite():
    a = torch.tensor([0.0], requires_grad=True)
    loss = (1.0 / a).sum()
    with pytest.raises(FloatingPointError):
        grad_params(loss, [a])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = torch.tensor([1.0, -2.0])
    g = torch.tensor([0.3, -0.7])
    state = AdamState.initial([p])
    adam_step(state, [p], [g], lr=0.01)
    expect = torch.tensor([1.0, -2.0]) - 0.01 * torch.sign(g) \
        * (g.abs() / (g.abs() + 1e-8))
    assert torch.allclose(p, expect, atol=1e-9)
    assert state.step == 1


def test_adam_zero_grad_keeps_params_decays_moments():
    p = torch.tensor([1.5])
    state = AdamState.initial([p])
    state.exp_avg[0].fill_(0.2)
    state.exp_avg_sq[0].fill_(0.04)
    adam_step(state, [p], [torch.zeros(1)], lr=0.0)
    assert torch.equal(p, torch.tensor([1.5]))
    assert torch.allclose(state.exp_avg[0], torch.tensor([0.2 * 0.9]))
    assert torch.allclose(state.exp_avg_sq[0], torch.tensor([0.04 * 0.999]))


def test_adam_three_steps_match_hand_recurrence():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = torch.tensor([0.5], dtype=torch.float64)
    grads = [0.3, -0.2, 0.05]
    state = AdamState.initial([p])
    # independent scalar recurrence
    pv, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        pv -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    for g in grads:
        adam_step(state, [p], [torch.tensor([g], dtype=torch.float64)], lr)
    assert abs(float(p) - pv) < 1e-12


def test_adam_lr_zero_is_bit_identical():
    torch.manual_seed(0)
    p = torch.randn(17)
    before = p.clone()
    state = AdamState.initial([p])
    adam_step(state, [p], [torch.randn(17)], lr=0.0)
    assert torch.equal(p, before)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"w": rng.standard_normal((3, 4)).astype(np.float32),
              "b": rng.standard_normal(5),
              "n": np.array([7], dtype=np.int64)}
    meta = {"iteration": 42, "note": "x"}
    path = tmp_path / "c.srfc"
    save_checkpoint(path, arrays, meta)
    loaded, meta2 = load_checkpoint(path)
    assert meta2 == meta
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert np.array_equal(loaded[k], arrays[k])


def test_checkpoint_bytes_deterministic(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3),
              "z": torch.ones(4)}
    p1, p2 = tmp_path / "1.srfc", tmp_path / "2.srfc"
    save_checkpoint(p1, arrays, {"k": 1})
    save_checkpoint(p2, arrays, {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.srfc"
    p.write_bytes(b"NOTHING!" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(p)
