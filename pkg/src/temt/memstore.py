"""Causal episodic memory read by softmax attention, plus the Hebbian attractor oracle.

The store holds one row per episode so a batch of episodes advances in lock
step. Slot ``t`` is written at step ``t`` for every row; a per-row validity
mask records whether the gate actually added the memory, and invalid slots
get zero attention weight.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Buffer, Tensor


class MemoryStore:
    def __init__(self, rows: int, capacity: int, d_k: int, d_v: int, n_g: int, dtype=np.float64):
        self.rows, self.capacity = rows, capacity
        self.d_k, self.d_v, self.n_g = d_k, d_v, n_g
        self.keys = Buffer(rows, capacity, d_k, dtype, name="keys")
        self.values = Buffer(rows, capacity, d_v, dtype, name="values")
        self.raw_g = Buffer(rows, capacity, n_g, dtype, name="raw_g")
        self.valid = np.zeros((rows, capacity), dtype=bool)
        self.key_norm = np.zeros((rows, capacity))
        self.value_norm = np.zeros((rows, capacity))

    @property
    def slots(self) -> int:
        return self.keys.filled

    @property
    def counts(self) -> np.ndarray:
        return self.valid[:, : self.slots].sum(axis=1)

    @property
    def count(self) -> int:
        """Stored memories; only meaningful for a single-row store."""
        if self.rows != 1:
            raise ValueError("count is per row; use counts for a batched store")
        return int(self.counts[0])

    @property
    def empty(self) -> bool:
        return self.slots == 0 or not self.valid[:, : self.slots].any()

    @property
    def mask(self) -> np.ndarray:
        return self.valid[:, : self.slots]

    def append(self, key, value, raw, add: np.ndarray | bool = True) -> None:
        """Write the next slot for every row; rows with ``add`` False stay invisible."""
        slot = self.slots
        if slot >= self.capacity:
            raise IndexError(f"memory store full ({self.capacity} slots)")
        dc.buffer_write(self.keys, slot, _rows(key))
        dc.buffer_write(self.values, slot, _rows(value))
        dc.buffer_write(self.raw_g, slot, _rows(raw))
        self.valid[:, slot] = add
        self.key_norm[:, slot] = _norms(self.keys.data[:, slot])
        self.value_norm[:, slot] = _norms(self.values.data[:, slot])

    def dump_csv(self, row: int = 0) -> str:
        """One line per stored memory: slot, key..., value..., raw_g..."""
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["tau"] + [f"k{i}" for i in range(self.d_k)] + [f"v{i}" for i in range(self.d_v)]
                   + [f"g{i}" for i in range(self.n_g)])
        for tau in np.flatnonzero(self.mask[row]):
            w.writerow([int(tau)] + [repr(float(v)) for v in self.keys.data[row, tau]]
                       + [repr(float(v)) for v in self.values.data[row, tau]]
                       + [repr(float(v)) for v in self.raw_g.data[row, tau]])
        return out.getvalue()


def _rows(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        t = Tensor(t.data[None, :], requires_grad=False)
    return t


def adaptive_beta(counts: np.ndarray, beta_base: float) -> np.ndarray:
    """``beta_base * ln(max(count, 2))`` per row."""
    return beta_base * np.log(np.maximum(np.asarray(counts, dtype=np.float64), 2.0))


def _attend(sims: Tensor, store: MemoryStore, beta_base: float, width: int) -> Tensor:
    scale = (adaptive_beta(store.counts, beta_base) / math.sqrt(width))[:, None]
    logits = dc.elementwise_mul(sims, scale.astype(sims.data.dtype))
    return dc.row_softmax(logits, store.mask)


def attend_sensory(query, store: MemoryStore, beta_base: float) -> tuple[Tensor, Tensor] | None:
    """Position-keyed read of stimulus values. Returns ``None`` on an empty store.

    Weights are the memory-neuron activations.
    """
    if store.empty:
        return None
    q = _rows(query)
    w = _attend(dc.prefix_dot(q, store.keys, store.slots), store, beta_base, store.d_k)
    return dc.prefix_weighted_sum(w, store.values, store.slots), w


def attend_landmark(x_query, store: MemoryStore, beta_base: float) -> tuple[Tensor, Tensor] | None:
    """Stimulus-keyed read of stored positions: where was I when I saw this."""
    if store.empty:
        return None
    x = _rows(x_query)
    w = _attend(dc.prefix_dot(x, store.values, store.slots), store, beta_base, store.d_v)
    return dc.prefix_weighted_sum(w, store.raw_g, store.slots), w


def attend_both(x_query, g_query, store: MemoryStore, beta_base: float) -> tuple[Tensor, Tensor] | None:
    """Stored positions weighted by the product of stimulus and position similarity."""
    if store.empty:
        return None
    x, g = _rows(x_query), _rows(g_query)
    sims = dc.elementwise_mul(dc.prefix_dot(x, store.values, store.slots),
                              dc.prefix_dot(g, store.keys, store.slots))
    w = _attend(sims, store, beta_base, store.d_k)
    return dc.prefix_weighted_sum(w, store.raw_g, store.slots), w


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", a, a))


def _cos_rows(q: np.ndarray, mem: np.ndarray, mn: np.ndarray) -> np.ndarray:
    qn = _norms(q)[:, None]
    dots = np.matmul(mem, q[:, :, None])[:, :, 0]
    return dots / np.maximum(qn * mn, 1e-300)


def maybe_add(store: MemoryStore, g_key, x_value, g_raw, threshold: float) -> np.ndarray:
    """Append each row's memory unless a stored one already matches it.

    Similarity is ``cos(key) * cos(value)``; a row appends when its best match
    is below ``threshold`` or it has no memories. ``threshold=inf`` appends
    always. The decision is not differentiated. Returns the per-row add mask.
    """
    k, v = _rows(g_key), _rows(x_value)
    n = store.slots
    if n == 0:
        add = np.ones(store.rows, dtype=bool)
    else:
        s = (_cos_rows(k.data, store.keys.data[:, :n], store.key_norm[:, :n])
             * _cos_rows(v.data, store.values.data[:, :n], store.value_norm[:, :n]))
        s = np.where(store.mask, s, -np.inf)
        add = s.max(axis=1) < threshold
    store.append(k, v, g_raw, add)
    return add


def iterate_retrieval(g_query, store: MemoryStore, n_iters: int, beta_base: float,
                      x_init=None) -> tuple[Tensor, list[float]] | None:
    """Repeated stimulus retrieval. The first pass is position-only (unless
    ``x_init`` is given); later passes weight by stimulus times position similarity.

    Returns the final retrieval and the largest attention weight of each pass
    (first row).
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if store.empty:
        return None
    g = _rows(g_query)
    g_sims = dc.prefix_dot(g, store.keys, store.slots)
    trace = []
    x = None if x_init is None else _rows(x_init)
    for _ in range(n_iters):
        sims = g_sims if x is None else dc.elementwise_mul(dc.prefix_dot(x, store.values, store.slots), g_sims)
        w = _attend(sims, store, beta_base, store.d_k)
        trace.append(float(w.data[0].max()))
        x = dc.prefix_weighted_sum(w, store.values, store.slots)
    return x, trace


# --------------------------------------------------------------------------
# outer-product (Hebbian) memory used as a reference


def conjunction(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Flattened outer product ``x^T g`` (stimulus index major)."""
    return np.outer(np.asarray(x, float), np.asarray(g, float)).reshape(-1)


@dataclass
class OracleMemory:
    M: np.ndarray
    lambda_g: np.ndarray | None = None
    lambda_x: np.ndarray | None = None
    # constant weighting the diagonals reduce to when they are all equal
    alpha: float | None = None
    patterns: list[np.ndarray] = field(default_factory=list, repr=False)


def oracle_build(p_list, x_list=None, g_list=None) -> OracleMemory:
    ps = [np.asarray(p, float).reshape(-1) for p in p_list]
    if not ps:
        raise ValueError("oracle_build needs at least one pattern")
    n = ps[0].size
    if any(p.size != n for p in ps):
        raise ValueError("oracle_build: patterns differ in length")
    P = np.stack(ps)
    M = P.T @ P
    mem = OracleMemory(M, patterns=ps)
    if x_list is not None and g_list is not None:
        xbar = np.array([np.sum(x) for x in x_list])
        gbar = np.array([np.sum(g) for g in g_list])
        mem.lambda_x, mem.lambda_g = np.diag(xbar), np.diag(gbar)
        w = xbar * gbar
        if np.allclose(w, w[0]):
            mem.alpha = float(w[0])
    return mem


def oracle_attractor_step(q, M: np.ndarray, activation: str = "linear") -> np.ndarray:
    q = np.asarray(q, float).reshape(-1)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or q.size != M.shape[0]:
        raise ValueError(f"attractor step: query of length {q.size} vs memory {M.shape}")
    out = q @ M
    if activation == "relu":
        return np.maximum(out, 0.0)
    if activation != "linear":
        raise ValueError(f"unknown activation {activation!r}")
    return out


def oracle_deconjunctify(p, axis: str, n_x: int, n_g: int) -> np.ndarray:
    """Unflatten to (n_x, n_g) and sum out ``axis`` ("g" keeps the stimulus part)."""
    p = np.asarray(p, float).reshape(-1)
    if n_x * n_g != p.size:
        raise ValueError(f"length {p.size} does not factor as {n_x} x {n_g}")
    grid = p.reshape(n_x, n_g)
    if axis == "g":
        return grid.sum(axis=1)
    if axis == "x":
        return grid.sum(axis=0)
    raise ValueError(f"axis must be 'g' or 'x', got {axis!r}")


@dataclass
class EquivalenceReport:
    instances: int
    max_dev_position_query: float
    max_dev_sensory_query: float
    max_dev_joint_query: float
    # joint query against the alternative diagonal (Lambda_g) for comparison
    max_dev_joint_lambda_g: float
    tolerance: float = 1e-9

    @property
    def max_dev(self) -> float:
        return max(self.max_dev_position_query, self.max_dev_sensory_query, self.max_dev_joint_query)

    @property
    def passed(self) -> bool:
        return self.max_dev < self.tolerance


def _factorised(x_t, g_t, X, G, mode):
    gbar, xbar = G.sum(axis=1), X.sum(axis=1)
    if mode == "position":
        return ((g_t @ G.T) * gbar * xbar) @ X
    if mode == "sensory":
        return ((x_t @ X.T) * gbar * xbar) @ G
    if mode == "joint":
        return ((x_t @ X.T) * (g_t @ G.T) * xbar) @ G
    if mode == "joint_lambda_g":
        return ((x_t @ X.T) * (g_t @ G.T) * gbar) @ G
    raise ValueError(mode)


def equivalence_instance(X: np.ndarray, G: np.ndarray, x_t: np.ndarray, g_t: np.ndarray) -> dict[str, float]:
    """Deviation between attractor retrieval and the factorised attention form."""
    n_x, n_g = X.shape[1], G.shape[1]
    mem = oracle_build([conjunction(x, g) for x, g in zip(X, G)])
    queries = {
        "position": (conjunction(np.ones(n_x), g_t), "g"),
        "sensory": (conjunction(x_t, np.ones(n_g)), "x"),
        "joint": (conjunction(x_t, g_t), "x"),
    }
    devs = {}
    for mode, (q, axis) in queries.items():
        lhs = oracle_deconjunctify(oracle_attractor_step(q, mem.M), axis, n_x, n_g)
        devs[mode] = float(np.max(np.abs(lhs - _factorised(x_t, g_t, X, G, mode))))
    lhs = oracle_deconjunctify(oracle_attractor_step(queries["joint"][0], mem.M), "x", n_x, n_g)
    devs["joint_lambda_g"] = float(np.max(np.abs(lhs - _factorised(x_t, g_t, X, G, "joint_lambda_g"))))
    return devs


def verify_equivalence(seed: int = 0, n_instances: int = 200, max_g: int = 8, max_x: int = 8,
                       max_memories: int = 16, tolerance: float = 1e-9) -> EquivalenceReport:
    """Check the three single-step retrieval identities on random instances."""
    if max_g > 8 or max_x > 8 or max_memories > 16:
        raise ValueError("verify_equivalence is meant for small sizes (<= 8, <= 8, <= 16)")
    rng = np.random.default_rng(seed)
    worst = {"position": 0.0, "sensory": 0.0, "joint": 0.0, "joint_lambda_g": 0.0}
    for _ in range(n_instances):
        n_g = int(rng.integers(1, max_g + 1))
        n_x = int(rng.integers(1, max_x + 1))
        n_mem = int(rng.integers(1, max_memories + 1))
        X, G = rng.normal(size=(n_mem, n_x)), rng.normal(size=(n_mem, n_g))
        devs = equivalence_instance(X, G, rng.normal(size=n_x), rng.normal(size=n_g))
        for k, v in devs.items():
            worst[k] = max(worst[k], v)
    return EquivalenceReport(n_instances, worst["position"], worst["sensory"], worst["joint"],
                             worst["joint_lambda_g"], tolerance)
