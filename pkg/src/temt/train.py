"""Online multi-environment BPTT training, evaluation and learning curves."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .envgen import Environment, Episode, generate_environment, sample_trajectory
from .model import ModelConfig, ModelParams, init_params, run_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    # distinct stimulus assignments per batch; episodes cycle over them
    envs_per_batch: int = 16
    T: int = 200
    topology: str = "square4"
    width: int = 10
    height: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 2.0
    steps: int = 20000
    eval_interval: int = 500
    eval_envs: int = 20
    eval_T: int = 200
    seed: int = 0
    init_seed: int = 0
    eval_seed: int = 1

    def __post_init__(self):
        positive = ("batch_size", "envs_per_batch", "T", "width", "height", "eps", "clip_norm",
                    "eval_interval", "eval_envs", "eval_T")
        bad = [k for k in positive if not getattr(self, k) > 0]
        if bad:
            raise ValueError(f"TrainConfig fields must be positive: {', '.join(bad)}")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("optimizer moments must lie in [0, 1)")
        if self.envs_per_batch > self.batch_size:
            raise ValueError("envs_per_batch cannot exceed batch_size")


# Training environments get even seeds and evaluation environments odd ones,
# so the two sets are disjoint whatever the base seeds are.
def _env_seed(base: int, *key: int, parity: int) -> int:
    state = np.random.SeedSequence([base % 2**32, *key]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31 | int(state[1]) >> 1) * 2 + parity


def train_environment_seed(config: TrainConfig, step: int, index: int) -> int:
    return _env_seed(config.seed, 0, step, index, parity=0)


def eval_environment_seed(seed: int, index: int) -> int:
    return _env_seed(seed, 1, index, parity=1)


def eval_environments(config: TrainConfig, n_stim: int) -> list[Environment]:
    return [generate_environment(config.topology, config.width, config.height, n_stim,
                                 eval_environment_seed(config.eval_seed, i), env_id=i)
            for i in range(config.eval_envs)]


@dataclass
class Batch:
    observations: np.ndarray
    actions: np.ndarray
    env_seeds: list[int]
    policy_seeds: list[int]


def sample_batch(config: TrainConfig, n_stim: int, step: int) -> Batch:
    envs = [generate_environment(config.topology, config.width, config.height, n_stim,
                                 train_environment_seed(config, step, e), env_id=e)
            for e in range(config.envs_per_batch)]
    obs, act, env_seeds, pol_seeds = [], [], [], []
    for b in range(config.batch_size):
        env = envs[b % len(envs)]
        pol = _env_seed(config.seed, 2, step, b, parity=0)
        ep = sample_trajectory(env, config.T, pol)
        obs.append(ep.observations)
        act.append(ep.actions)
        env_seeds.append(env.seed)
        pol_seeds.append(pol)
    return Batch(np.stack(obs), np.stack(act), env_seeds, pol_seeds)


class Adam:
    """Adam over a fixed, name-ordered set of arrays."""

    def __init__(self, names: Sequence[str], shapes: Sequence[tuple], lr: float,
                 beta1: float, beta2: float, eps: float):
        self.names = list(names)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros(s) for k, s in zip(self.names, shapes)}
        self.v = {k: np.zeros(s) for k, s in zip(self.names, shapes)}
        self.t = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in self.names:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their joint l2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


CURVE_COLUMNS = ("step", "train_loss", "grad_norm", "loss", "ce_pi", "ce_g", "g_correction",
                 "g_l2", "weight_l2", "accuracy", "accuracy_se", "zero_shot_accuracy",
                 "zero_shot_se", "zero_shot_steps")


@dataclass
class LearningCurve:
    rows: list[dict] = field(default_factory=list)
    # kept apart from ``rows`` so the curve CSV replays bit-exactly
    wall_time: list[float] = field(default_factory=list)

    def append(self, row: dict, wall: float) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("learning curve steps must increase")
        self.rows.append(row)
        self.wall_time.append(wall)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    @staticmethod
    def header() -> str:
        return ",".join(CURVE_COLUMNS) + "\n"

    @staticmethod
    def format_row(row: dict) -> str:
        return ",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                        for k in CURVE_COLUMNS) + "\n"

    def to_csv(self) -> str:
        return self.header() + "".join(self.format_row(r) for r in self.rows)

    def timing_csv(self) -> str:
        return "step,wall_time\n" + "".join(f"{r['step']},{w:.3f}\n" for r, w in zip(self.rows, self.wall_time))

    @classmethod
    def from_csv(cls, text: str) -> "LearningCurve":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append({k: (int(rec[k]) if k in ("step", "zero_shot_steps") else float(rec[k]))
                         for k in CURVE_COLUMNS})
        return cls(rows, [float("nan")] * len(rows))


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, env_seeds: list[int], policy_seeds: list[int], detail: str):
        self.step, self.env_seeds, self.policy_seeds = step, env_seeds, policy_seeds
        super().__init__(f"non-finite loss at step {step} ({detail}); "
                         f"env seeds {env_seeds[:4]}..., policy seeds {policy_seeds[:4]}...")

    def dump(self) -> dict:
        return {"step": self.step, "env_seeds": self.env_seeds, "policy_seeds": self.policy_seeds,
                "error": str(self)}


def _binomial_se(p: float, n: int) -> float:
    return math.sqrt(p * (1.0 - p) / n) if n else float("nan")


def eval_episodes(envs: Sequence[Environment], T: int, seed: int) -> list[Episode]:
    return [sample_trajectory(env, T, _env_seed(seed, 3, i, parity=1)) for i, env in enumerate(envs)]


def cheat_predictions(episodes: Sequence[Episode]) -> np.ndarray:
    """Upper-bound predictor: reads the node trace and recalls each visited node's stimulus."""
    preds = np.zeros((len(episodes), episodes[0].length), dtype=np.int64)
    for b, ep in enumerate(episodes):
        seen: dict[int, int] = {}
        for t, node in enumerate(ep.node_trace):
            preds[b, t] = seen.get(int(node), 0)
            seen[int(node)] = int(ep.observations[t])
    return preds


def score_predictions(preds: np.ndarray, episodes: Sequence[Episode]) -> dict[str, float]:
    obs = np.stack([ep.observations for ep in episodes])
    zs = np.stack([ep.zero_shot_mask for ep in episodes])
    correct = preds == obs
    acc = float(correct.mean())
    n_zs = int(zs.sum())
    zacc = float(correct[zs].mean()) if n_zs else float("nan")
    return {"accuracy": acc, "accuracy_se": _binomial_se(acc, correct.size),
            "zero_shot_accuracy": zacc, "zero_shot_se": _binomial_se(zacc, n_zs),
            "zero_shot_steps": n_zs, "steps": int(correct.size)}


def evaluate(params: ModelParams | None, eval_envs: Sequence[Environment], T: int, seed: int,
             cheat: bool = False) -> dict[str, float]:
    """Overall and zero-shot accuracy on fresh walks, with binomial standard errors.

    Params are only read. ``cheat=True`` scores the node-trace oracle instead
    of the model (``params`` may then be ``None``).
    """
    episodes = eval_episodes(eval_envs, T, seed)
    if cheat:
        return score_predictions(cheat_predictions(episodes), episodes)
    res = run_batch(params, np.stack([ep.observations for ep in episodes]),
                    np.stack([ep.actions for ep in episodes]))
    metrics = score_predictions(res.predictions, episodes)
    metrics.update({k: v for k, v in res.components.items() if k != "accuracy"})
    return metrics


def train(config: TrainConfig, params_init: ModelParams | None = None,
          model_config: ModelConfig | None = None, curve_path: str | Path | None = None,
          on_eval: Callable[[int, ModelParams, dict], None] | None = None
          ) -> tuple[ModelParams, LearningCurve]:
    """Run ``config.steps`` Adam steps on fresh environments.

    The curve gets a row at step 0, every ``eval_interval`` steps and at the
    last step; with ``curve_path`` each row is appended to the CSV as it comes.
    Raises :class:`NonFiniteLoss` if the loss or a gradient stops being finite.
    """
    if params_init is None:
        params_init = init_params(model_config or ModelConfig(), config.init_seed)
    params = params_init.copy()
    mc = params.config
    names = sorted(params.trainable)
    arrays = {k: params[k].data for k in names}
    opt = Adam(names, [arrays[k].shape for k in names], config.lr, config.beta1, config.beta2, config.eps)
    envs = eval_environments(config, mc.n_stim)
    curve = LearningCurve()
    out = None
    if curve_path is not None:
        out = open(curve_path, "w")
        out.write(LearningCurve.header())
    start = time.perf_counter()
    last = {"train_loss": float("nan"), "grad_norm": float("nan")}

    def record(step: int) -> None:
        try:
            m = evaluate(params, envs, config.eval_T, config.eval_seed)
        except FloatingPointError as exc:
            raise NonFiniteLoss(step, [e.seed for e in envs], [], f"evaluation: {exc}") from exc
        row = {"step": step, **last, **{k: m[k] for k in CURVE_COLUMNS if k in m}}
        curve.append(row, time.perf_counter() - start)
        if out is not None:
            out.write(LearningCurve.format_row(row))
            out.flush()
        log.info("step %d loss %.4f acc %.3f zero-shot %.3f (%d)", step, m["loss"], m["accuracy"],
                 m["zero_shot_accuracy"], m["zero_shot_steps"])
        if on_eval is not None:
            on_eval(step, params, row)

    try:
        record(0)
        for step in range(1, config.steps + 1):
            batch = sample_batch(config, mc.n_stim, step)
            try:
                with dc.Tape() as tape:
                    res = run_batch(params, batch.observations, batch.actions)
                grads = dc.backward(tape, res.loss)
            except FloatingPointError as exc:
                raise NonFiniteLoss(step, batch.env_seeds, batch.policy_seeds, str(exc)) from exc
            g = {k: grads[id(params[k])] for k in names}
            loss = res.components["loss"]
            if not math.isfinite(loss) or not all(np.isfinite(v).all() for v in g.values()):
                raise NonFiniteLoss(step, batch.env_seeds, batch.policy_seeds, f"loss {loss}")
            g, norm = clip_global_norm(g, config.clip_norm)
            opt.update(arrays, g)
            last = {"train_loss": loss, "grad_norm": norm}
            if step % config.eval_interval == 0 or step == config.steps:
                record(step)
    finally:
        if out is not None:
            out.close()
    return params, curve


def config_dict(config) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def dump_diagnostic(err: NonFiniteLoss, path: str | Path) -> None:
    Path(path).write_text(json.dumps(err.dump(), indent=2) + "\n")
