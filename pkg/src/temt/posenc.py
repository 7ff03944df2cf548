"""Recurrent position encodings: path integration, key normalisation, landmark correction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

ACTIVATIONS = ("linear", "relu")


@dataclass
class PositionState:
    g: Tensor
    g_pi: Tensor
    g_norm: Tensor


def _rows(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        t = Tensor(t.data[None, :]) if not t.requires_grad else t
    return t


def path_integrate(g_prev, action, W_a, activation: str = "relu") -> Tensor:
    """One transition ``activation(g_prev @ W_a[action])``, row by row.

    ``action`` is an int or one id per row of ``g_prev``; ``W_a`` stacks one
    square matrix per action.
    """
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    g = _rows(g_prev)
    W = W_a if isinstance(W_a, Tensor) else Tensor(W_a)
    idx = np.broadcast_to(np.asarray(action, dtype=np.int64), (g.data.shape[0],))
    n_actions = W.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_actions):
        raise ValueError(f"unknown action id in {np.unique(idx).tolist()} (have {n_actions} actions)")
    out = dc.indexed_matmul(g, W, idx)
    return dc.relu(out) if activation == "relu" else out


def normalize_for_keys(g, eps: float = 0.0) -> Tensor:
    """Z-score each row. A constant row has no z-score and raises unless ``eps > 0``."""
    g = _rows(g)
    if g.data.shape[1] < 2:
        raise ValueError("position encodings need at least 2 units to normalise")
    return dc.fixed_layernorm(g, eps=eps)


def combine_position(g_pi, g_retrieved_raw, gate_mlp: Callable[[Tensor, Tensor], Tensor],
                     map_mlp: Callable[[Tensor], Tensor]) -> tuple[Tensor, Tensor | None]:
    """Move the path-integrated estimate toward a retrieved one by a learned gate.

    ``g = g_pi + sigmoid(gate_mlp(g_ret, g_pi)) * (g_ret - g_pi)`` with
    ``g_ret = map_mlp(g_retrieved_raw)``. Passing ``None`` for the retrieval
    (empty memory) returns ``g_pi`` unchanged. Also returns the correction
    ``g - g_pi`` (``None`` when there was none).
    """
    g_pi = _rows(g_pi)
    if g_retrieved_raw is None:
        return g_pi, None
    g_ret = map_mlp(_rows(g_retrieved_raw))
    if g_ret.data.shape != g_pi.data.shape:
        raise dc.ShapeError("combine_position", g_pi.shape, g_ret.shape)
    gate = dc.sigmoid(gate_mlp(g_ret, g_pi))
    step = dc.elementwise_mul(gate, dc.sub(g_ret, g_pi))
    return dc.add(g_pi, step), step
