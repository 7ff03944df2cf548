"""Transformer with recurrent position encodings over a causal episodic memory.

Per step ``t`` of a batch of episodes advancing in lock step:

1. ``g_pi`` = path integration of the previous position with the previous action
   (the learned ``g0`` at ``t = 0``).
2. The z-scored ``g_pi`` projected by ``W_e`` queries the memory; the retrieved
   value is decoded into logits for ``x_t``. This is the model's prediction and
   the only one used for accuracy.
3. Once ``x_t`` is seen, stored positions are read with the joint
   stimulus-and-position query and a gated update moves ``g_pi`` to ``g``.
4. ``g`` queries the memory again for the second cross entropy, and the memory
   ``(key(g), value(x_t), g)`` is added if no stored memory already matches.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .memstore import MemoryStore, attend_both, attend_sensory, maybe_add
from .posenc import combine_position, normalize_for_keys, path_integrate


@dataclass(frozen=True)
class ModelConfig:
    n_stim: int = 45
    n_actions: int = 4
    n_g: int = 64
    d_k: int = 32
    # 0 picks the smallest two-hot code width holding n_stim stimuli
    d_v: int = 0
    decoder_hidden: int = 0
    gate_hidden: int = 32
    activation: str = "relu"
    # 0 means sqrt(d_k)
    beta_base: float = 0.0
    add_threshold: float = 0.9
    learn_w_x: bool = False
    loss_weights: tuple[float, float, float, float, float] = (1.0, 1.0, 0.1, 1e-4, 1e-4)
    ln_eps: float = 1e-6
    w_a_noise: float = 0.01
    w_e_scale: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_v == 0:
            object.__setattr__(self, "d_v", two_hot_width(self.n_stim))
        if self.decoder_hidden == 0:
            object.__setattr__(self, "decoder_hidden", 2 * self.d_v)
        if self.beta_base == 0.0:
            object.__setattr__(self, "beta_base", math.sqrt(self.d_k))
        object.__setattr__(self, "loss_weights", tuple(float(x) for x in self.loss_weights))
        if len(self.loss_weights) != 5 or min(self.loss_weights) < 0:
            raise ValueError("loss_weights must be five nonnegative numbers")
        if self.activation not in ("relu", "linear"):
            raise ValueError(f"activation must be relu or linear, got {self.activation!r}")
        if self.n_g < 2 or self.d_k < 1 or self.n_stim < 2:
            raise ValueError("n_g >= 2, d_k >= 1 and n_stim >= 2 are required")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def two_hot_width(n_stim: int) -> int:
    d = 2
    while d * (d - 1) // 2 < n_stim:
        d += 1
    return d


def two_hot_matrix(n_stim: int, width: int) -> np.ndarray:
    """Stimulus ``i`` maps to the ``i``-th pair of active units."""
    pairs = list(combinations(range(width), 2))
    if len(pairs) < n_stim:
        raise ValueError(f"{width} units give only {len(pairs)} two-hot codes for {n_stim} stimuli")
    W = np.zeros((n_stim, width))
    for i, (a, b) in enumerate(pairs[:n_stim]):
        W[i, a] = W[i, b] = 1.0
    return W


# weights subject to l2 regularisation; vectors and biases are not
WEIGHT_NAMES = ("W_a", "W_e", "W_x", "dec_W1", "dec_W2", "map_W", "gate_Wr", "gate_Wp", "gate_W2")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.copy(), t.requires_grad, k)
                                         for k, t in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data).tobytes())
        return h.hexdigest()


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    c = config
    n, A = c.n_g, c.n_actions

    def mat(rows, cols, scale=None):
        s = 1.0 / math.sqrt(rows) if scale is None else scale
        return rng.normal(0.0, s, size=(rows, cols))

    p = {
        "W_a": np.eye(n)[None].repeat(A, axis=0) + rng.normal(0.0, c.w_a_noise, size=(A, n, n)),
        "g0": rng.normal(0.0, 1.0, size=(1, n)),
        "W_e": mat(n, c.d_k, c.w_e_scale / math.sqrt(n)),
        "W_x": two_hot_matrix(c.n_stim, c.d_v),
        "dec_W1": mat(c.d_v, c.decoder_hidden),
        "dec_b1": np.full((1, c.decoder_hidden), 0.1),
        "dec_W2": mat(c.decoder_hidden, c.n_stim),
        "dec_b2": np.zeros((1, c.n_stim)),
        "value_default": np.zeros((1, c.d_v)),
        "map_W": np.eye(n),
        "map_b": np.zeros((1, n)),
        "gate_Wr": mat(n, c.gate_hidden),
        "gate_Wp": mat(n, c.gate_hidden),
        "gate_b1": np.zeros((1, c.gate_hidden)),
        "gate_W2": mat(c.gate_hidden, n),
        "gate_b2": np.zeros((1, n)),
    }
    tensors = {k: Tensor(v.astype(c.np_dtype), requires_grad=True, name=k) for k, v in p.items()}
    tensors["W_x"].requires_grad = c.learn_w_x
    return ModelParams(config, tensors)


def decode(params: ModelParams, x_ret: Tensor) -> Tensor:
    h = dc.relu(dc.add(dc.matmul(x_ret, params["dec_W1"]), params["dec_b1"]))
    return dc.add(dc.matmul(h, params["dec_W2"]), params["dec_b2"])


def _gate_mlp(params: ModelParams):
    def gate(g_ret: Tensor, g_pi: Tensor) -> Tensor:
        h = dc.add(dc.add(dc.matmul(g_ret, params["gate_Wr"]), dc.matmul(g_pi, params["gate_Wp"])),
                   params["gate_b1"])
        return dc.add(dc.matmul(dc.relu(h), params["gate_W2"]), params["gate_b2"])
    return gate


def _map_mlp(params: ModelParams):
    def mapping(g_raw: Tensor) -> Tensor:
        return dc.add(dc.matmul(g_raw, params["map_W"]), params["map_b"])
    return mapping


def _broadcast_row(row: Tensor, n: int) -> Tensor:
    return dc.add(np.zeros((n, row.data.shape[1]), dtype=row.data.dtype), row)


@dataclass
class StepTrace:
    """Per-step record for a single episode row, all arrays with leading T."""

    g_pi: np.ndarray
    g: np.ndarray
    g_norm: np.ndarray
    # memory-neuron activity: attention of the corrected position over the
    # stored memories, (T, n_memories); memory j was written at step memory_slots[j]
    attention: np.ndarray
    memory_slots: np.ndarray
    logits: np.ndarray
    correct: np.ndarray
    first_visit_flags: np.ndarray
    added: np.ndarray


@dataclass
class BatchResult:
    loss: Tensor
    components: dict[str, float]
    correct: np.ndarray
    # (B, T) argmax of the path-integrated prediction
    predictions: np.ndarray
    traces: list[StepTrace] | None = None


def run_batch(params: ModelParams, observations: np.ndarray, actions: np.ndarray,
              gating: bool = True, record: bool = False,
              first_visit_flags: np.ndarray | None = None) -> BatchResult:
    """Roll the model over ``B`` episodes of length ``T`` and build the loss.

    Differentiable when called under a :class:`~temt.diffcore.Tape`.
    ``gating=False`` appends every memory (used for gradient checks).
    """
    c = params.config
    obs = np.asarray(observations, dtype=np.int64)
    act = np.asarray(actions, dtype=np.int64)
    if obs.ndim == 1:
        obs, act = obs[None], act[None]
    B, T = obs.shape
    dtype = c.np_dtype
    store = MemoryStore(B, T, c.d_k, c.d_v, c.n_g, dtype=dtype)
    W_e, W_x = params["W_e"], params["W_x"]
    gate, mapping = _gate_mlp(params), _map_mlp(params)
    threshold = c.add_threshold if gating else np.inf
    eye = np.eye(c.n_stim, dtype=dtype)
    default_x = _broadcast_row(params["value_default"], B)

    ce1, ce2, corr_sq, g_sq = [], [], [], []
    preds = np.zeros((B, T), dtype=np.int64)
    rec = {k: [] for k in ("g_pi", "g", "g_norm", "attn", "logits", "added")} if record else None

    g = None
    for t in range(T):
        if t == 0:
            g_pi = _broadcast_row(params["g0"], B)
        else:
            g_pi = path_integrate(g, act[:, t - 1], params["W_a"], c.activation)
        q_pi = dc.matmul(normalize_for_keys(g_pi, c.ln_eps), W_e)
        read = attend_sensory(q_pi, store, c.beta_base)
        logits = decode(params, default_x if read is None else read[0])
        ce1.append(dc.cross_entropy_logits(logits, obs[:, t]))
        preds[:, t] = logits.data.argmax(axis=1)

        x_t = dc.matmul(eye[obs[:, t]], W_x)
        landmark = attend_both(x_t, q_pi, store, c.beta_base)
        g, step = combine_position(g_pi, None if landmark is None else landmark[0], gate, mapping)
        g_norm = normalize_for_keys(g, c.ln_eps)
        key = dc.matmul(g_norm, W_e)
        read2 = attend_sensory(key, store, c.beta_base)
        logits2 = decode(params, default_x if read2 is None else read2[0])
        ce2.append(dc.cross_entropy_logits(logits2, obs[:, t]))
        if step is not None:
            corr_sq.append(dc.sum_cols(dc.elementwise_mul(step, step)))
        g_sq.append(dc.sum_cols(dc.elementwise_mul(g, g)))
        added = maybe_add(store, key, x_t, g, threshold)

        if record:
            rec["g_pi"].append(g_pi.data.copy())
            rec["g"].append(g.data.copy())
            rec["g_norm"].append(g_norm.data.copy())
            rec["attn"].append(None if read2 is None else read2[1].data)
            rec["logits"].append(logits.data.copy())
            rec["added"].append(added.copy())

    lam = c.loss_weights
    per_step = 1.0 / (B * T)
    terms = {
        "ce_pi": dc.scale(dc.total(dc.concat_rows(ce1)), per_step),
        "ce_g": dc.scale(dc.total(dc.concat_rows(ce2)), per_step),
        "g_correction": (dc.scale(dc.total(dc.concat_rows(corr_sq)), per_step) if corr_sq
                         else Tensor(np.zeros((1, 1), dtype=dtype))),
        "g_l2": dc.scale(dc.total(dc.concat_rows(g_sq)), per_step),
    }
    weights = [params[k] for k in WEIGHT_NAMES if params[k].requires_grad]
    terms["weight_l2"] = dc.total(dc.concat_rows([dc.sum_squares(w) for w in weights]))
    order = ("ce_pi", "ce_g", "g_correction", "weight_l2", "g_l2")
    loss = None
    for name, lam_i in zip(order, lam):
        if lam_i == 0.0:
            continue
        term = dc.scale(terms[name], lam_i)
        loss = term if loss is None else dc.add(loss, term)
    if loss is None:
        loss = dc.scale(terms["ce_pi"], 0.0)

    correct = preds == obs
    comps = {k: float(v.data.reshape(-1)[0]) for k, v in terms.items()}
    comps["loss"] = float(loss.data.reshape(-1)[0])
    comps["accuracy"] = float(correct.mean())
    traces = None
    if record:
        attn_rows = rec.pop("attn")
        stacked = {k: np.stack(v, axis=1) for k, v in rec.items()}
        traces = []
        for b in range(B):
            fv = (first_visit_flags[b] if first_visit_flags is not None
                  else np.zeros((T, 2), dtype=bool))
            slots = np.flatnonzero(store.valid[b, :T])
            attn = np.zeros((T, slots.size), dtype=dtype)
            for t, w in enumerate(attn_rows):
                if w is not None:
                    n = int(np.searchsorted(slots, w.shape[1]))
                    attn[t, :n] = w[b, slots[:n]]
            traces.append(StepTrace(stacked["g_pi"][b], stacked["g"][b], stacked["g_norm"][b],
                                    attn, slots, stacked["logits"][b], correct[b], fv,
                                    stacked["added"][b]))
    return BatchResult(loss, comps, correct, preds, traces)


def episode_loss(episode, params: ModelParams, gating: bool = True) -> tuple[Tensor, dict[str, float]]:
    """Loss and metrics of one episode (requires length >= 2)."""
    if episode.length < 2:
        raise ValueError("episode_loss needs at least 2 steps")
    res = run_batch(params, episode.observations, episode.actions, gating=gating)
    zs = episode.zero_shot_mask
    metrics = dict(res.components)
    metrics["zero_shot_accuracy"] = float(res.correct[0][zs].mean()) if zs.any() else float("nan")
    metrics["zero_shot_steps"] = int(zs.sum())
    return res.loss, metrics


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"TEMTCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(params: ModelParams) -> bytes:
    names = sorted(params.tensors)
    blob = io.BytesIO()
    entries = []
    for k in names:
        t = params.tensors[k]
        arr = np.ascontiguousarray(t.data)
        entries.append({"name": k, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "trainable": bool(t.requires_grad), "offset": blob.tell()})
        blob.write(arr.tobytes())
    payload = blob.getvalue()
    header = {"config": asdict(params.config), "config_hash": params.config.config_hash(),
              "tensors": entries, "blob_bytes": len(payload),
              "sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload


def checkpoint_save(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def checkpoint_parse(data: bytes, expect_config: ModelConfig | None = None) -> ModelParams:
    if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic or truncated header)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = data[start + hlen:]
    if len(payload) != header["blob_bytes"]:
        raise CheckpointError(f"checkpoint payload is {len(payload)} bytes, expected {header['blob_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    cfg = dict(header["config"])
    cfg["loss_weights"] = tuple(cfg["loss_weights"])
    config = ModelConfig(**cfg)
    if config.config_hash() != header["config_hash"]:
        warnings.warn("checkpoint config hash does not match its stored config", stacklevel=2)
    if expect_config is not None and expect_config.config_hash() != config.config_hash():
        warnings.warn("checkpoint was written with a different model config", stacklevel=2)
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) * dt.itemsize
        if e["offset"] < 0 or e["offset"] + n > len(payload):
            raise CheckpointError(f"tensor {e['name']} runs past the payload")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(e["shape"])), offset=e["offset"])
        tensors[e["name"]] = Tensor(arr.reshape(e["shape"]).copy(), e["trainable"], e["name"])
    return ModelParams(config, tensors)


def checkpoint_load(path, expect_config: ModelConfig | None = None) -> ModelParams:
    return checkpoint_parse(Path(path).read_bytes(), expect_config)
