"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .nn import Module
from .tensor import Tensor, cross_entropy, no_grad

# below this magnitude both gradients count as zero and absolute error is used
ZERO_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ZERO_FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``x`` (perturbed in place).

    Entries outside ``indices`` are left as NaN when a subset is requested.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    it = indices if indices is not None else np.ndindex(*x.shape)
    for idx in it:
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


@dataclass
class GradCheckResult:
    name: str
    shape: tuple
    checked: int
    max_rel_err: float


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                   seed: int = 0) -> list[float]:
    """Max relative error per input of ``sum(fn(*inputs) * R)`` for a fixed random R."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    (out * Tensor(weights)).sum().backward()

    def f():
        with no_grad():
            return float((fn(*tensors).data * weights).sum())

    errs = []
    for t in tensors:
        num = numerical_gradient(f, t.data, h)
        errs.append(float(relative_error(t.grad, num).max()))
    return errs


def check_model(model: Module, loss_fn: Callable[[], Tensor], h: float = 1e-5,
                max_entries: Optional[int] = None, seed: int = 0) -> list[GradCheckResult]:
    """Compare backprop against central differences for every parameter tensor.

    ``max_entries`` caps the entries checked per tensor (random sample);
    ``None`` checks every scalar.
    """
    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)

    def f():
        with no_grad():
            return float(loss_fn().data)

    results = []
    for name, p in model.named_parameters():
        if p.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 parameters, {name} is {p.dtype}")
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_entries is None or p.size <= max_entries:
            idx = None
            num = numerical_gradient(f, p.data, h)
            err = relative_error(analytic, num)
        else:
            flat = rng.choice(p.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, p.shape) for i in flat]
            num = numerical_gradient(f, p.data, h, idx)
            sel = tuple(np.array(ix) for ix in zip(*idx))
            err = relative_error(analytic[sel], num[sel])
        results.append(GradCheckResult(name, p.shape, p.size if idx is None else len(idx),
                                       float(err.max())))
    return results


def classification_loss(model, images: np.ndarray, labels: np.ndarray) -> Callable[[], Tensor]:
    x = Tensor(images)
    return lambda: cross_entropy(model(x), labels)
