"""Command-line entry point: ``temt {generate,train,eval,analyze,verify}``.

Every command writes into its own ``--out`` directory together with a
``manifest.toml`` that can be passed back as ``--config`` to replay it.
Exit codes: 0 success, 2 configuration or input error, 3 non-finite numbers,
4 failed verification. ``TEMT_THREADS`` caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w
from threadpoolctl import threadpool_limits

from . import __version__
from . import analysis as an
from . import diffcore as dc
from .config import ConfigError, RunConfig, load_config
from .envgen import environment_family, generate_environment, sample_trajectory, serialize_environment, serialize_episode
from .memstore import verify_equivalence
from .model import CheckpointError, ModelConfig, checkpoint_load, checkpoint_save, init_params, run_batch
from .train import NonFiniteLoss, dump_diagnostic, eval_environments, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
THREADS_ENV = "TEMT_THREADS"

log = logging.getLogger("temt")


def code_version() -> str:
    """Package version plus a digest of its source files."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for f in sorted(root.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: RunConfig
    seeds: dict[str, int]
    outputs: dict[str, str] = field(default_factory=dict)
    code_version: str = field(default_factory=code_version)
    started: str = field(default_factory=_now)
    finished: str = ""

    def to_toml(self) -> str:
        doc = {"manifest": {"command": self.command, "code_version": self.code_version,
                            "started": self.started, "finished": self.finished,
                            "seeds": self.seeds, "outputs": self.outputs}}
        doc.update(self.config.to_dict())
        return tomli_w.dumps(doc)

    def write(self, out: Path) -> None:
        self.finished = _now()
        (out / "manifest.toml").write_text(self.to_toml())


def _seeds(cfg: RunConfig) -> dict[str, int]:
    return {"env": cfg.env.seed, "train": cfg.train.seed, "init": cfg.train.init_seed,
            "eval": cfg.train.eval_seed, "analysis": cfg.analysis.seed}


def apply_overrides(cfg: RunConfig, seed: int | None, steps: int | None) -> RunConfig:
    try:
        if seed is not None:
            cfg = cfg.replace(env=dataclasses.replace(cfg.env, seed=seed),
                              train=dataclasses.replace(cfg.train, seed=seed, init_seed=seed),
                              analysis=dataclasses.replace(cfg.analysis, seed=seed))
        if steps is not None:
            cfg = cfg.replace(train=dataclasses.replace(cfg.train, steps=steps))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _load_checkpoint(path: str, cfg: RunConfig):
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = checkpoint_load(path)
    if params.config.config_hash() != cfg.model.config_hash():
        diff = {k: (v, getattr(cfg.model, k)) for k, v in dataclasses.asdict(params.config).items()
                if getattr(cfg.model, k) != (tuple(v) if isinstance(v, list) else v)}
        raise CheckpointError(f"checkpoint model config differs from --config: {diff}")
    return params


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    e = cfg.env
    envs = ([generate_environment(e.topology, e.width, e.height, e.n_stim, e.seed)] if e.n_envs == 1
            else environment_family(e.topology, e.width, e.height, e.n_stim, e.seed, e.n_envs))
    man = RunManifest("generate", cfg, _seeds(cfg))
    for i, env in enumerate(envs):
        name = f"env_{i:03d}.txt"
        (out / name).write_bytes(serialize_environment(env))
        ep = sample_trajectory(env, e.episode_T, e.seed + i)
        (out / f"episode_{i:03d}.txt").write_bytes(serialize_episode(ep))
        man.outputs[f"env_{i}"] = name
        man.outputs[f"episode_{i}"] = f"episode_{i:03d}.txt"
        print(f"env {i}: {env.n_nodes} nodes, {len(np.unique(env.stimulus_of))} distinct stimuli; "
              f"episode of {ep.length} steps, {int(ep.zero_shot_mask.sum())} zero-shot steps")
    man.write(out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    man = RunManifest("train", cfg, _seeds(cfg),
                      {"checkpoint": "checkpoint.temt", "curve": "curve.csv", "timing": "timing.csv"})
    def save(step, params, row):
        # refreshed at every evaluation so a long run always leaves a usable checkpoint
        tmp = out / "checkpoint.temt.tmp"
        checkpoint_save(params, tmp)
        os.replace(tmp, out / "checkpoint.temt")

    try:
        params, curve = train(cfg.train, model_config=cfg.model, curve_path=out / "curve.csv", on_eval=save)
    except NonFiniteLoss as exc:
        dump_diagnostic(exc, out / "diagnostic.json")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    checkpoint_save(params, out / "checkpoint.temt")
    (out / "timing.csv").write_text(curve.timing_csv())
    man.write(out)
    last = curve.rows[-1]
    print(f"trained {cfg.train.steps} steps: loss {last['loss']:.4f}, accuracy {last['accuracy']:.3f}, "
          f"zero-shot {last['zero_shot_accuracy']:.3f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: str) -> int:
    params = _load_checkpoint(checkpoint, cfg)
    envs = eval_environments(cfg.train, cfg.env.n_stim)
    metrics = evaluate(params, envs, cfg.train.eval_T, cfg.train.eval_seed)
    metrics["chance"] = 1.0 / cfg.env.n_stim
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    RunManifest("eval", cfg, _seeds(cfg), {"metrics": "metrics.json", "checkpoint": str(checkpoint)}).write(out)
    print(f"accuracy {metrics['accuracy']:.4f} +- {metrics['accuracy_se']:.4f}; zero-shot "
          f"{metrics['zero_shot_accuracy']:.4f} +- {metrics['zero_shot_se']:.4f} "
          f"({metrics['zero_shot_steps']} steps); chance {metrics['chance']:.4f}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, out: Path, checkpoint: str) -> int:
    params = _load_checkpoint(checkpoint, cfg)
    a, e = cfg.analysis, cfg.env
    env = generate_environment(e.topology, e.width, e.height, e.n_stim, e.seed)
    n_steps = a.n_steps or 50 * env.n_nodes
    report: dict = {"n_steps": n_steps}
    for source in an.SOURCES:
        maps = an.collect_rate_maps(params, env, n_steps, a.seed, source, a.sigma)
        scores = an.score_maps(maps, a.threshold_frac, a.active_frac, place_sigma=a.place_sigma)
        an.export_figures(maps if a.export_maps else [], scores, out / source)
        grid = scores.grid[~np.isnan(scores.grid)]
        place = scores.place[~np.isnan(scores.place)]
        report[source] = {"units": len(maps),
                          "grid_score_median": float(np.median(grid)) if grid.size else None,
                          "grid_fraction_above_0.3": float(np.mean(grid > 0.3)) if grid.size else None,
                          "place_score_median": float(np.median(place)) if place.size else None}
        if source == "memory_neuron" and len(maps):
            ctl = an.place_shuffle_control(maps, a.n_shuffles, a.seed, a.threshold_frac, a.place_sigma)
            report[source].update({"shuffle_median": float(np.median(ctl.null_medians)),
                                   "shuffle_p": ctl.p_value})
    envs = environment_family(e.topology, e.width, e.height, e.n_stim, e.seed + 1, a.n_envs)
    rem = an.remapping_stats(params, envs, a.seed, n_steps, a.n_perm, a.sigma)
    report["remapping"] = {"position_corr": rem.mean_position_corr,
                           "memory_distance_corr": rem.mean_memory_distance_corr,
                           "memory_distance_p": rem.p_value,
                           "memory_neurons_matched": rem.n_memory_neurons.tolist()}
    (out / "analysis.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    RunManifest("analyze", cfg, _seeds(cfg), {"report": "analysis.json", "checkpoint": str(checkpoint),
                                               "position_units": "position_unit/",
                                               "memory_neurons": "memory_neuron/"}).write(out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def verify_model_config() -> ModelConfig:
    return ModelConfig(n_stim=4, n_g=6, d_k=4, gate_hidden=4)


def run_gradcheck(seed: int = 0, tolerance: float = 1e-4) -> dc.GradCheckReport:
    """Gradient check of the full model over 3 steps with append-always memory."""
    mc = verify_model_config()
    params = init_params(mc, seed)
    env = generate_environment("square4", 2, 2, mc.n_stim, seed)
    ep = sample_trajectory(env, 3, seed)
    trainable = params.trainable
    return dc.grad_check(lambda: run_batch(params, ep.observations, ep.actions, gating=False).loss,
                         list(trainable.values()), names=list(trainable), tolerance=tolerance)


def _sci(x: float) -> str:
    mant, exp = f"{x:.0e}".split("e")
    return f"{mant}e{int(exp)}"


def cmd_verify(cfg: RunConfig, out: Path | None, seed: int = 0) -> int:
    eq = verify_equivalence(seed=seed)
    gc = run_gradcheck(seed)
    line = (f"equivalence max dev < {_sci(eq.tolerance)}: {'PASS' if eq.passed else 'FAIL'}; "
            f"gradcheck rel err < {_sci(gc.tolerance)}: {'PASS' if gc.passed else 'FAIL'}")
    print(line)
    if out is not None:
        (out / "verify.txt").write_text(f"{line}\nequivalence max dev {eq.max_dev:.3e}\n{gc}\n")
        RunManifest("verify", cfg, {"verify": seed}, {"report": "verify.txt"}).write(out)
    return EXIT_OK if eq.passed and gc.passed else EXIT_VERIFY


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="temt", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"temt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, needs_ckpt, needs_out in (("generate", False, True), ("train", False, True),
                                        ("eval", True, True), ("analyze", True, True),
                                        ("verify", False, False)):
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config or a run's manifest.toml")
        s.add_argument("--out", required=needs_out, help="run directory")
        s.add_argument("--seed", type=int, help="override env/train/init/analysis seeds")
        s.add_argument("--steps", type=int, help="override train.steps")
        s.add_argument("-v", "--verbose", action="store_true")
        if needs_ckpt:
            s.add_argument("--checkpoint", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=max(1, threads)):
            cfg = apply_overrides(load_config(args.config), args.seed, args.steps)
            out = _outdir(args.out) if args.out else None
            if args.command == "generate":
                return cmd_generate(cfg, out)
            if args.command == "train":
                return cmd_train(cfg, out)
            if args.command == "eval":
                return cmd_eval(cfg, out, args.checkpoint)
            if args.command == "analyze":
                return cmd_analyze(cfg, out, args.checkpoint)
            return cmd_verify(cfg, out, args.seed or 0)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"error: non-finite value: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
