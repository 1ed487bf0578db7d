import numpy as np
import pytest
import torch
import torch.nn.functional as F

from dinp import substrate
from dinp.errors import NonFiniteError, ShapeError, ValidationError
from dinp.substrate import (
    Graph,
    conv2d,
    evaluate_with_gradients,
    finite_difference_gradients,
    finite_difference_probes,
    random_probe_sites,
)


def test_sum_of_squares_gradient():
    x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    g = Graph(lambda p: (p["x"] ** 2).sum(), {"x": x})
    loss, grads = evaluate_with_gradients(g)
    assert loss == pytest.approx(14.0)
    assert torch.equal(grads["x"], torch.tensor([2.0, 4.0, 6.0], dtype=torch.float64))


def test_zero_multiplier_gives_zero_gradient():
    x = torch.tensor([1.0, -2.0, 5.0], dtype=torch.float64)
    g = Graph(lambda p: (p["x"] * 0.0).sum(), {"x": x})
    _, grads = evaluate_with_gradients(g)
    assert torch.equal(grads["x"], torch.zeros(3, dtype=torch.float64))


def test_unused_parameter_gets_zeros():
    params = {
        "used": torch.ones(2, dtype=torch.float64),
        "unused": torch.ones(3, dtype=torch.float64),
    }
    g = Graph(lambda p: p["used"].sum(), params)
    _, grads = evaluate_with_gradients(g)
    assert torch.equal(grads["unused"], torch.zeros(3, dtype=torch.float64))


def test_non_scalar_loss_rejected():
    g = Graph(lambda p: p["x"] * 2, {"x": torch.ones(2, dtype=torch.float64)})
    with pytest.raises(ShapeError):
        evaluate_with_gradients(g)


def test_nonfinite_forward_reported():
    g = Graph(lambda p: (p["x"] / 0.0).sum(), {"x": torch.ones(2, dtype=torch.float64)})
    with pytest.raises(NonFiniteError, match="forward"):
        evaluate_with_gradients(g)


def test_nonfinite_gradient_names_parameter():
    # sqrt at exactly 0 has an infinite derivative but a finite forward value
    g = Graph(lambda p: p["w"].sqrt().sum(), {"w": torch.zeros(2, dtype=torch.float64)})
    with pytest.raises(NonFiniteError, match="gradient of w"):
        evaluate_with_gradients(g)


def test_replay_is_bit_identical_in_float64():
    torch.manual_seed(0)
    x = torch.randn(8, dtype=torch.float64)
    g = Graph(lambda p: torch.sin(p["x"]).pow(2).sum() * 1.7, {"x": x})
    l1, g1 = evaluate_with_gradients(g)
    l2, g2 = evaluate_with_gradients(g)
    assert l1 == l2
    assert torch.equal(g1["x"], g2["x"])


def test_finite_difference_simple_square():
    g = Graph(lambda p: (p["x"] ** 2).sum(), {"x": torch.tensor([3.0], dtype=torch.float64)})
    fd = finite_difference_gradients(g, step=1e-5)
    assert abs(float(fd["x"][0]) - 6.0) < 1e-6


def test_finite_difference_constant_function():
    g = Graph(lambda p: torch.tensor(2.5, dtype=torch.float64), {"x": torch.ones(4, dtype=torch.float64)})
    fd = finite_difference_gradients(g, step=1e-5)
    assert torch.all(fd["x"].abs() < 1e-8)


def test_finite_difference_rejects_bad_step_and_dtype():
    g = Graph(lambda p: (p["x"] ** 2).sum(), {"x": torch.ones(2, dtype=torch.float64)})
    with pytest.raises(ValidationError):
        finite_difference_gradients(g, step=0.0)
    g32 = Graph(lambda p: (p["x"] ** 2).sum(), {"x": torch.ones(2)})
    with pytest.raises(ValidationError):
        finite_difference_gradients(g32, step=1e-5)


def _masked_conv_net_graph(seed=0):
    torch.manual_seed(seed)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    target = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    mask = (torch.rand(1, 1, 8, 8) < 0.5).to(torch.float64)
    mask[0, 0, 0, 0] = 1.0  # keep it nonempty
    params = {
        "w1": torch.randn(2, 1, 3, 3, dtype=torch.float64) * 0.5,
        "b1": torch.randn(2, dtype=torch.float64) * 0.1,
        "w2": torch.randn(1, 2, 3, 3, dtype=torch.float64) * 0.5,
        "b2": torch.randn(1, dtype=torch.float64) * 0.1,
    }

    def fn(p):
        h = F.conv2d(x, p["w1"], p["b1"], padding=1)
        h = F.silu(h)
        h = F.conv2d(h, p["w2"], p["b2"], padding=1)
        return (((h - target) ** 2) * mask).sum() / mask.sum()

    return Graph(fn, params)


def test_conv_net_gradients_match_finite_differences():
    g = _masked_conv_net_graph()
    _, analytic = evaluate_with_gradients(g)
    fd = finite_difference_gradients(g, step=1e-5)
    for name in g.params:
        a, f = analytic[name].flatten(), fd[name].flatten()
        denom = torch.maximum(a.abs(), torch.tensor(1e-3, dtype=torch.float64))
        rel = ((a - f).abs() / denom).max()
        assert float(rel) < 1e-4, f"{name}: relative error {float(rel)}"


def test_probed_finite_differences_match_on_random_net():
    torch.manual_seed(3)
    x = torch.randn(4, 6, dtype=torch.float64)

    def fn(p):
        h = torch.tanh(x @ p["w1"] + p["b1"])
        h = F.silu(h @ p["w2"] + p["b2"])
        return (h @ p["w3"]).pow(2).mean()

    params = {
        "w1": torch.randn(6, 5, dtype=torch.float64),
        "b1": torch.randn(5, dtype=torch.float64),
        "w2": torch.randn(5, 4, dtype=torch.float64),
        "b2": torch.randn(4, dtype=torch.float64),
        "w3": torch.randn(4, 1, dtype=torch.float64),
    }
    g = Graph(fn, params)
    _, analytic = evaluate_with_gradients(g)
    gen = torch.Generator().manual_seed(0)
    sites = random_probe_sites(params, 100, gen)
    fd = finite_difference_probes(g, 1e-5, sites)
    for (name, idx), est in fd.items():
        a = float(analytic[name].flatten()[idx])
        assert abs(a - est) / max(abs(a), 1e-3) < 1e-4


def test_conv2d_identity_kernel():
    x = torch.randn(1, 1, 5, 5)
    k = torch.ones(1, 1, 1, 1)
    assert torch.equal(conv2d(x, k), x)


def test_conv2d_zero_kernel():
    x = torch.randn(2, 3, 6, 6)
    k = torch.zeros(4, 3, 3, 3)
    out = conv2d(x, k, padding=1)
    assert out.shape == (2, 4, 6, 6)
    assert torch.equal(out, torch.zeros_like(out))


def test_conv2d_matches_quadruple_loop_reference():
    torch.manual_seed(1)
    x = torch.randn(1, 2, 5, 5, dtype=torch.float64)
    k = torch.randn(3, 2, 3, 3, dtype=torch.float64)
    out = conv2d(x, k)
    ref = np.zeros((1, 3, 3, 3))
    xa, ka = x.numpy(), k.numpy()
    for co in range(3):
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for ci in range(2):
                    for u in range(3):
                        for v in range(3):
                            acc += xa[0, ci, i + u, j + v] * ka[co, ci, u, v]
                ref[0, co, i, j] = acc
    assert np.abs(out.numpy() - ref).max() < 1e-6


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        conv2d(torch.randn(1, 2, 4, 4), torch.randn(1, 3, 3, 3))
