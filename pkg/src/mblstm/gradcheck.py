"""Central finite-difference gradient checking for the tensor engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` with a floor so all-zero pairs give 0."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    sample: float | None = None,
    seed: int = 0,
    perturb: float = 0.0,
    pooled: bool = False,
) -> float:
    """Compare analytic and central-difference gradients of ``loss_fn``.

    ``loss_fn`` rebuilds the graph from ``inputs`` each call and returns a
    scalar tensor. With ``sample`` in (0, 1], only that fraction of each
    input's coordinates (at least one) is probed. ``perturb`` scales the
    analytic gradient by ``1 + perturb``; it exists only for fault-injection
    checks of the harness itself. Returns the worst relative error over all
    inputs, or with ``pooled=True`` one error over the concatenation of every
    input (coordinates then sampled jointly, as for a whole parameter vector).
    Must run in double precision.
    """
    if T.get_precision() != "double":
        raise ContractError("gradient checks require double precision")
    T.zero_grad(inputs)
    loss = loss_fn()
    T.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    T.zero_grad(inputs)

    rng = T.rng(seed)

    def pick(size: int) -> np.ndarray:
        if sample is None:
            return np.arange(size)
        count = max(1, int(round(sample * size)))
        return np.sort(rng.choice(size, size=count, replace=False))

    def probe(flat: np.ndarray, coords: np.ndarray) -> np.ndarray:
        numeric = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss_fn().item()
            flat[i] = orig - eps
            minus = loss_fn().item()
            flat[i] = orig
            numeric[j] = (plus - minus) / (2 * eps)
        return numeric

    with T.no_grad():
        if pooled:
            sizes = [t.size for t in inputs]
            chosen = pick(sum(sizes))
            bounds = np.cumsum([0] + sizes)
            got, numeric = [], []
            for k, (t, ga) in enumerate(zip(inputs, analytic)):
                local = chosen[(chosen >= bounds[k]) & (chosen < bounds[k + 1])] - bounds[k]
                if local.size:
                    numeric.append(probe(t.data.reshape(-1), local))
                    got.append(ga.reshape(-1)[local])
            return relative_error(np.concatenate(got) * (1.0 + perturb), np.concatenate(numeric))
        worst = 0.0
        for t, ga in zip(inputs, analytic):
            coords = pick(t.size)
            numeric = probe(t.data.reshape(-1), coords)
            worst = max(worst, relative_error(ga.reshape(-1)[coords] * (1.0 + perturb), numeric))
    return worst
