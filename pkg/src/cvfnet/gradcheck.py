"""Central finite-difference gradient checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max|a - n| / max(max|a|, max|n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def projection(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar <out, R> with fixed random R, so every output entry gets a distinct weight."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum(T.mul(out, Tensor(r.astype(out.dtype))))


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
                    floor: float = 1e-8) -> List[float]:
    """Relative error per input between backprop and central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are reduced with
    :func:`projection`. Inputs should be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]

    def scalar(*ts):
        out = fn(*ts)
        return out if out.size == 1 else projection(out)

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(scalar(*leaves))
    errors = []
    for k, a in enumerate(arrays):
        def value():
            with T.no_grad():
                return float(scalar(*[Tensor(x) for x in arrays]).data.reshape(-1)[0])

        num = numeric_grad(value, a, eps)
        ana = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        errors.append(relative_error(ana, num, floor))
    return errors


def check_parameter_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                              floor: float = 1e-8, max_entries: Optional[int] = None,
                              seed: int = 0) -> List[float]:
    """Like :func:`check_gradients` for tensors captured by ``fn`` (module weights).

    Each parameter's data is perturbed in place; parameters must be float64.
    With ``max_entries`` only that many randomly chosen entries per
    parameter are differenced.
    """
    def scalar():
        out = fn()
        return out if out.size == 1 else projection(out)

    for p in params:
        p.grad = None
    T.backward(scalar())

    def value():
        with T.no_grad():
            return float(scalar().data.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    errors = []
    for p in params:
        ana = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        pick = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            pick = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.zeros(pick.size)
        for k, i in enumerate(pick):
            old = flat[i]
            flat[i] = old + eps
            fp = value()
            flat[i] = old - eps
            fm = value()
            flat[i] = old
            num[k] = (fp - fm) / (2 * eps)
        errors.append(relative_error(ana.reshape(-1)[pick], num, floor))
    return errors
