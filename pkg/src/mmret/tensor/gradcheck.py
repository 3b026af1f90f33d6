"""Central finite-difference oracle for autodiff gradients.

The numerical side runs the forward pass with 64-bit storage so truncation
error, not float32 rounding, dominates the comparison.  The analytic side
runs under the normal storage dtype.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mmret.tensor.core import Tape, as_node, precision


def autodiff_gradients(fn: Callable, arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tape = Tape()
    leaves = [tape.watch(np.asarray(a)) for a in arrays]
    loss = fn(*leaves)
    tape.backward(loss)
    return [
        np.zeros(np.shape(a), dtype=np.float64) if leaf.grad is None else leaf.grad.astype(np.float64)
        for a, leaf in zip(arrays, leaves)
    ]


def numerical_gradients(fn: Callable, arrays: Sequence[np.ndarray], step: float = 1e-3) -> list[np.ndarray]:
    work = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with precision(np.float64):

        def f():
            return float(np.asarray(fn(*[as_node(w) for w in work]).data, dtype=np.float64).sum())

        for w in work:
            g = np.zeros_like(w)
            flat, gflat = w.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f()
                flat[i] = orig - step
                down = f()
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * step)
            grads.append(g)
    return grads


NORM_FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = NORM_FLOOR) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps structurally zero gradients (e.g. an attention key bias,
    which softmax shift-invariance cancels) from turning round-off into a
    relative error of 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def max_gradient_error(fn: Callable, arrays: Sequence[np.ndarray], step: float = 1e-3) -> float:
    """Worst per-input relative error between autodiff and finite differences."""
    analytic = autodiff_gradients(fn, arrays)
    numeric = numerical_gradients(fn, arrays, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def projected(op: Callable, weights: np.ndarray) -> Callable:
    """Reduce a tensor-valued op to a scalar by a fixed random projection."""
    from mmret.tensor import ops

    def fn(*nodes):
        return ops.sum(ops.mul(op(*nodes), weights))

    return fn
