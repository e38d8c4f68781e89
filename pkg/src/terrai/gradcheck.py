"""Central finite differences for checking analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Perturb ``array`` in place entry by entry; ``f`` must read it afresh each call."""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return grad


def check_model(model, x: np.ndarray, label: np.ndarray, mask: np.ndarray, step: float = 1e-2) -> dict:
    """Compare analytic and numeric gradients of the masked RMSE for every parameter.

    ``model`` should be float64 (see ``UNetModel.astype``) so the difference
    quotient is not swamped by rounding. Returns per-parameter max relative error.
    """
    from . import unet
    from .autodiff import Graph

    def loss_value() -> float:
        g = Graph(enabled=False)
        return float(unet.masked_rmse_loss(g, model.forward(x, g), label, mask).data)

    model.zero_grad()
    g = Graph()
    loss = unet.masked_rmse_loss(g, model.forward(x, g), label, mask)
    g.backward(loss)
    analytic = {p.identifier: p.grad.copy() for p in model.parameters()}
    errors = {}
    for p in model.parameters():
        numeric = numeric_gradient(loss_value, p.data, step)
        errors[p.identifier] = float(relative_error(analytic[p.identifier], numeric).max())
    return errors
