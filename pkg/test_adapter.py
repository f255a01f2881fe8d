import pytest
import torch

from app.config.settings import AdapterConfig
from app.services.adapter import (
    AdapterPair,
    MoeAdapter,
    adapt,
    adapter_gradients,
    check_adapter_gradients,
    gate_weights,
)
from app.services.numerics import Rng
from app.utils.errors import NumericsError


def _x(d, seed=0):
    return Rng(seed).normal((d,), 1.0)


def test_zero_gate_inference_is_uniform():
    adapter = MoeAdapter(6, 4, num_experts=8, rng=Rng(0)).eval()
    g = gate_weights(adapter, _x(6))
    assert torch.allclose(g, torch.full((8,), 1 / 8, dtype=torch.float64), atol=1e-15)


def test_inference_weights_are_repeatable_and_normalised():
    adapter = MoeAdapter(6, 4, num_experts=5, rng=Rng(1)).eval()
    with torch.no_grad():
        adapter.gate.copy_(Rng(2).normal((6, 5), 1.0))
    x = _x(6, 3)
    g1, g2 = gate_weights(adapter, x), gate_weights(adapter, x)
    assert torch.equal(g1, g2)
    assert abs(g1.sum().item() - 1.0) < 1e-9
    assert bool((g1 >= 0).all())


def test_training_noise_is_reproducible_under_a_seed():
    adapter = MoeAdapter(6, 4, num_experts=4, gate_noise=0.01, rng=Rng(0)).train()
    x = _x(6)
    assert torch.equal(gate_weights(adapter, x, Rng(7)), gate_weights(adapter, x, Rng(7)))
    assert not torch.equal(gate_weights(adapter, x, Rng(7)), gate_weights(adapter, x, Rng(8)))


def test_training_noise_statistics():
    sigma = 0.01
    adapter = MoeAdapter(3, 2, num_experts=2, gate_noise=sigma, dropout=0.0, rng=Rng(0)).train()
    g = gate_weights(adapter, torch.zeros(10_000, 3, dtype=torch.float64), Rng(5))
    # with a zero gate the log-odds between two experts is the difference of two noise draws
    diff = torch.log(g[:, 1]) - torch.log(g[:, 0])
    expected_std = sigma * 2 ** 0.5
    assert abs(diff.mean().item()) < 4 * expected_std / 100
    assert abs(diff.std().item() - expected_std) < 0.05 * expected_std


def test_single_expert_is_its_linear_map():
    adapter = MoeAdapter(5, 3, num_experts=1, rng=Rng(4)).eval()
    x = _x(5, 1)
    assert torch.allclose(adapt(adapter, x), x @ adapter.experts[0], atol=1e-15)


def test_identical_experts_ignore_the_gate():
    adapter = MoeAdapter(5, 3, num_experts=4, rng=Rng(4)).eval()
    with torch.no_grad():
        adapter.experts.copy_(adapter.experts[0].clone().expand(4, 5, 3))
        adapter.gate.copy_(Rng(9).normal((5, 4), 2.0))
    x = _x(5, 2)
    assert torch.allclose(adapt(adapter, x), x @ adapter.experts[0], atol=1e-12)


def test_matches_per_expert_oracle():
    adapter = MoeAdapter(7, 4, num_experts=8, rng=Rng(3)).eval()
    with torch.no_grad():
        adapter.gate.copy_(Rng(10).normal((7, 8), 1.0))
    x = _x(7, 5)
    logits = [sum(x[k].item() * adapter.gate[k, e].item() for k in range(7)) for e in range(8)]
    weights = torch.softmax(torch.tensor(logits, dtype=torch.float64), dim=0)
    oracle = sum(weights[e] * (x @ adapter.experts[e]) for e in range(8))
    assert torch.allclose(adapt(adapter, x), oracle, atol=1e-12)


def test_dimension_mismatch_and_non_finite_input():
    adapter = MoeAdapter(5, 3, rng=Rng(0)).eval()
    with pytest.raises(NumericsError):
        adapt(adapter, torch.zeros(4, dtype=torch.float64))
    with pytest.raises(NumericsError):
        adapt(adapter, torch.tensor([float("nan")] * 5, dtype=torch.float64))


def test_homogeneity_with_zero_gate():
    adapter = MoeAdapter(5, 3, rng=Rng(0)).eval()
    x = _x(5, 6)
    assert torch.allclose(adapt(adapter, 2.5 * x), 2.5 * adapt(adapter, x), atol=1e-12)


def test_dropout_zero_rate_and_rescaling():
    p = 0.2
    adapter = MoeAdapter(4, 50, num_experts=1, dropout=p, gate_noise=0.0, rng=Rng(0)).train()
    x = Rng(1).normal((200, 4), 1.0)
    out = adapt(adapter, x, Rng(2))
    clean = x @ adapter.experts[0]
    zeros = int((out == 0).sum())
    n = out.numel()
    assert abs(zeros - p * n) < 3 * (n * p * (1 - p)) ** 0.5
    survivors = out != 0
    assert torch.allclose(out[survivors], clean[survivors] / (1 - p), atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    adapter = MoeAdapter(5, 3, num_experts=3, rng=Rng(0)).eval()
    out = adapt(adapter, _x(5))
    grads = adapter_gradients(adapter, torch.zeros_like(out))
    assert all(bool((g == 0).all()) for g in grads.values())


def test_single_expert_least_squares_gradient():
    adapter = MoeAdapter(4, 3, num_experts=1, rng=Rng(2)).eval()
    x, t = _x(4, 3), _x(3, 4)
    out = adapt(adapter, x)
    grads = adapter_gradients(adapter, out - t)  # d/dy of 1/2 ||y - t||^2
    expected = torch.outer(x, (x @ adapter.experts[0] - t).detach())
    assert torch.allclose(grads["experts"][0], expected, atol=1e-10)


def test_gradients_require_a_recorded_forward():
    adapter = MoeAdapter(4, 3, rng=Rng(0))
    with pytest.raises(NumericsError):
        adapter_gradients(adapter, torch.zeros(3, dtype=torch.float64))


def test_three_experts_pass_finite_differences():
    adapter = MoeAdapter(4, 3, num_experts=3, rng=Rng(5)).eval()
    with torch.no_grad():
        adapter.gate.copy_(Rng(6).normal((4, 3), 1.0))
    target = _x(3, 7)
    report = check_adapter_gradients(adapter, _x(4, 8), lambda y: ((y - target) ** 2).sum(), eps=1e-6, tol=1e-3)
    assert report.passed
    assert report.max_rel_error < 1e-3


def test_gradient_check_refuses_training_mode():
    adapter = MoeAdapter(4, 3, rng=Rng(0)).train()
    with pytest.raises(NumericsError, match="stochastic forward; use inference mode"):
        check_adapter_gradients(adapter, _x(4), lambda y: y.sum())


def test_shared_pair_stores_one_adapter():
    shared = AdapterPair(4, 6, AdapterConfig(shared=True), Rng(0))
    assert shared.item is shared.user
    assert set(shared.named_tensors()) == {"user.experts", "user.gate"}
    assert len(list(shared.parameters())) == 2

    separate = AdapterPair(4, 6, AdapterConfig(shared=False), Rng(0))
    assert set(separate.named_tensors()) == {"user.experts", "user.gate", "item.experts", "item.gate"}
    clone = AdapterPair(4, 6, AdapterConfig(shared=False), Rng(99))
    clone.load_tensors(separate.named_tensors())
    assert torch.equal(clone.item.experts, separate.item.experts)
