"""
Numerics Service
Float64 tensor helpers, the pinned random generator and gradient verification

Every tensor in the pipeline is a float64 torch tensor (a DenseMatrix is a 2-D one).
Randomness comes only from `Rng`, a wrapper over NumPy's PCG64 bit generator, so seeded
runs produce identical streams on every platform.

RNG test vector (PCG64, seed 0): random() -> 0.63696169, 0.26978671, 0.04097352
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.utils.errors import NumericsError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
RNG_ALGORITHM = "PCG64"


def as_tensor(values: Any) -> torch.Tensor:
    """Convert to a float64 tensor without sharing mutable storage with numpy callers"""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def dense_matrix(values: Sequence[float], rows: int, cols: int) -> torch.Tensor:
    """Build a row-major rows x cols matrix"""
    if len(values) != rows * cols:
        raise NumericsError(f"expected {rows * cols} values for a {rows}x{cols} matrix, got {len(values)}")
    return as_tensor(values).reshape(rows, cols)


def check_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericsError(f"{what} contains non-finite entries")
    return tensor


class Rng:
    """Seeded generator (NumPy PCG64). The algorithm is part of the checkpoint contract."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def random(self, size: Optional[Union[int, Tuple[int, ...]]] = None):
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def normal(self, shape: Tuple[int, ...], std: float = 1.0) -> torch.Tensor:
        """Gaussian draws returned as a float64 tensor"""
        return torch.from_numpy(self._gen.normal(0.0, std, size=shape).astype(np.float64))

    def bernoulli(self, shape: Tuple[int, ...], p: float) -> torch.Tensor:
        """1.0 with probability p, else 0.0"""
        return torch.from_numpy((self._gen.random(shape) < p).astype(np.float64))

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived deterministically from (seed, key)"""
        return Rng(int(np.random.SeedSequence([self.seed, key]).generate_state(1, np.uint64)[0]))

    def get_state(self) -> Dict[str, Any]:
        return {"algorithm": RNG_ALGORITHM, "seed": self.seed, "state": self._gen.bit_generator.state}

    def set_state(self, state: Dict[str, Any]) -> None:
        if state.get("algorithm") != RNG_ALGORITHM:
            raise NumericsError(f"unsupported RNG algorithm: {state.get('algorithm')}")
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["state"]


def sigmoid(x: float) -> float:
    """Logistic function; saturates instead of overflowing"""
    return float(torch.sigmoid(torch.tensor(float(x), dtype=DTYPE)))


def softmax(v: Any) -> torch.Tensor:
    """Softmax over the last axis"""
    t = as_tensor(v)
    if t.numel() == 0:
        raise NumericsError("empty input")
    return torch.softmax(t, dim=-1)


@dataclass
class CoordinateCheck:
    param_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    checked: int
    tol: float
    coordinates: List[CoordinateCheck] = field(default_factory=list)
    failures: List[CoordinateCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    loss: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[Rng] = None,
    floor: float = 1e-6,
) -> FiniteDifferenceReport:
    """
    Compare autograd gradients of `loss` with central differences

    Args:
        loss: zero-argument closure recomputing the scalar loss from `params`
        params: leaf tensors with requires_grad=True
        eps: perturbation step, within [1e-7, 1e-4] for float64
        tol: maximum accepted relative error |a - n| / max(|a|, |n|, floor)
        max_coords: sample this many coordinates (uniformly, via rng) instead of all

    Returns:
        FiniteDifferenceReport with the max relative error and failing coordinates
    """
    if not 1e-7 <= eps <= 1e-4:
        raise NumericsError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)
    value = loss()
    if not bool(torch.isfinite(value)):
        raise NumericsError("loss not evaluable")
    grads = torch.autograd.grad(value, params, allow_unused=True)

    coords = [(p_idx, k) for p_idx, p in enumerate(params) for k in range(p.numel())]
    if max_coords is not None and max_coords < len(coords):
        picks = (rng or Rng(0)).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(c)] for c in sorted(picks)]

    report = FiniteDifferenceReport(max_rel_error=0.0, checked=0, tol=tol)
    with torch.no_grad():
        for p_idx, k in coords:
            flat = params[p_idx].data.view(-1)
            original = flat[k].item()
            flat[k] = original + eps
            plus = loss()
            flat[k] = original - eps
            minus = loss()
            flat[k] = original
            if not (bool(torch.isfinite(plus)) and bool(torch.isfinite(minus))):
                raise NumericsError("loss not evaluable")
            numeric = (plus.item() - minus.item()) / (2.0 * eps)
            grad = grads[p_idx]
            analytic = 0.0 if grad is None else grad.reshape(-1)[k].item()
            entry = CoordinateCheck(p_idx, k, analytic, numeric, relative_error(analytic, numeric, floor))
            report.coordinates.append(entry)
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, entry.rel_error)
            if entry.rel_error > tol:
                report.failures.append(entry)

    if report.failures:
        logger.warning("Gradient check: %d/%d coordinates above tol %.1e (max %.3e)",
                       len(report.failures), report.checked, tol, report.max_rel_error)
    return report
