"""
Collaborative Information Adapter
Dense mixture of bias-free linear experts mapping collaborative embeddings
into the language model's hidden space
"""
import logging
import math
from typing import Callable, Dict, Optional

import torch
import torch.nn as nn

from app.config.settings import AdapterConfig
from app.services.numerics import DTYPE, FiniteDifferenceReport, Rng, finite_difference_check
from app.utils.errors import NumericsError

logger = logging.getLogger(__name__)


class MoeAdapter(nn.Module):
    """
    output = sum_e g_e * dropout(W_e x),  g = softmax(gate^T x + noise)

    Noise (std gate_noise) and dropout only apply in training mode; in inference
    mode the adapter is a pure function of (parameters, x).
    """

    def __init__(self, d_in: int, d_out: int, num_experts: int = 8, dropout: float = 0.2,
                 gate_noise: float = 0.01, rng: Optional[Rng] = None):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {dropout}")
        self.d_in, self.d_out, self.num_experts = d_in, d_out, num_experts
        self.dropout = dropout
        self.gate_noise = gate_noise
        self.rng = rng or Rng(0)
        self.experts = nn.Parameter(self.rng.normal((num_experts, d_in, d_out), 1.0 / math.sqrt(d_in)))
        self.gate = nn.Parameter(torch.zeros(d_in, num_experts, dtype=DTYPE))
        self._last_output: Optional[torch.Tensor] = None

    @property
    def mode(self) -> str:
        return "training" if self.training else "inference"

    def _check_input(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.d_in:
            raise NumericsError(f"adapter expects inputs of dimension {self.d_in}, got {x.shape[-1]}")
        if not bool(torch.isfinite(x).all()):
            raise NumericsError("adapter input contains non-finite entries")

    def gate_weights(self, x: torch.Tensor, rng: Optional[Rng] = None) -> torch.Tensor:
        self._check_input(x)
        logits = x @ self.gate
        if self.training and self.gate_noise > 0:
            logits = logits + (rng or self.rng).normal(tuple(logits.shape), self.gate_noise)
        return torch.softmax(logits, dim=-1)

    def forward(self, x: torch.Tensor, rng: Optional[Rng] = None) -> torch.Tensor:
        rng = rng or self.rng
        weights = self.gate_weights(x, rng)
        expert_out = torch.einsum("...i,eio->...eo", x, self.experts)
        if self.training and self.dropout > 0:
            keep = 1.0 - self.dropout
            expert_out = expert_out * rng.bernoulli(tuple(expert_out.shape), keep) / keep
        out = (weights.unsqueeze(-1) * expert_out).sum(dim=-2)
        self._last_output = out
        return out


def adapt(adapter: MoeAdapter, x: torch.Tensor, rng: Optional[Rng] = None) -> torch.Tensor:
    return adapter(x, rng)


def gate_weights(adapter: MoeAdapter, x: torch.Tensor, rng: Optional[Rng] = None) -> torch.Tensor:
    return adapter.gate_weights(x, rng)


def adapter_gradients(adapter: MoeAdapter, upstream: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Backpropagate `upstream` (dL/d output) through the last recorded forward pass"""
    if adapter._last_output is None or not adapter._last_output.requires_grad:
        raise NumericsError("no recorded forward pass")
    grads = torch.autograd.grad(adapter._last_output, [adapter.experts, adapter.gate],
                                grad_outputs=upstream, retain_graph=True, allow_unused=True)
    return {
        name: torch.zeros_like(p) if g is None else g
        for name, p, g in zip(("experts", "gate"), (adapter.experts, adapter.gate), grads)
    }


def check_adapter_gradients(adapter: MoeAdapter, x: torch.Tensor, loss_fn: Callable[[torch.Tensor], torch.Tensor],
                            eps: float = 1e-6, tol: float = 1e-3) -> FiniteDifferenceReport:
    if adapter.training:
        raise NumericsError("stochastic forward; use inference mode")
    return finite_difference_check(lambda: loss_fn(adapter(x)), [adapter.experts, adapter.gate], eps=eps, tol=tol)


class AdapterPair(nn.Module):
    """User and item adapters; one shared module unless configured otherwise"""

    def __init__(self, d_in: int, d_out: int, config: Optional[AdapterConfig] = None, rng: Optional[Rng] = None):
        super().__init__()
        config = config or AdapterConfig()
        rng = rng or Rng(0)
        self.shared = config.shared
        self.user = MoeAdapter(d_in, d_out, config.num_experts, config.dropout, config.gate_noise, rng)
        self.item = self.user if config.shared else MoeAdapter(
            d_in, d_out, config.num_experts, config.dropout, config.gate_noise, rng)

    def forward(self, user_x: torch.Tensor, item_x: torch.Tensor, rng: Optional[Rng] = None):
        return self.user(user_x, rng), self.item(item_x, rng)

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        """Checkpoint view; a shared adapter is stored once"""
        tensors = {f"user.{k}": v.detach() for k, v in self.user.named_parameters()}
        if not self.shared:
            tensors.update({f"item.{k}": v.detach() for k, v in self.item.named_parameters()})
        return tensors

    def load_tensors(self, tensors: Dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, p in self.user.named_parameters():
                p.copy_(tensors[f"user.{name}"])
            if not self.shared:
                for name, p in self.item.named_parameters():
                    p.copy_(tensors[f"item.{name}"])
