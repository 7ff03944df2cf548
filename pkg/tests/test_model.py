from __future__ import annotations

import math

import numpy as np
import pytest

from temt import diffcore as dc
from temt.envgen import generate_environment, sample_trajectory
from temt.model import (CheckpointError, ModelConfig, checkpoint_bytes, checkpoint_load, checkpoint_parse,
                        checkpoint_save, episode_loss, init_params, run_batch, WEIGHT_NAMES)


def small_config(**kw):
    base = dict(n_stim=4, n_actions=4, n_g=6, d_k=4, gate_hidden=4)
    base.update(kw)
    return ModelConfig(**base)


def episode(n_stim=4, T=6, seed=0, size=(2, 2)):
    env = generate_environment("square4", size[0], size[1], n_stim, seed)
    return sample_trajectory(env, T, seed)


# --------------------------------------------------------------------------
# plain numpy re-implementation used as the reference


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def _ce(logits, target):
    m = logits.max()
    return m + math.log(np.exp(logits - m).sum()) - logits[target]


def reference_loss(P, c, obs, act, gating=True):
    zs = lambda g: (g - g.mean()) / math.sqrt(g.var() + c.ln_eps)
    relu = lambda v: np.maximum(v, 0.0)
    decode = lambda x: relu(x @ P["dec_W1"][...] + P["dec_b1"][0]) @ P["dec_W2"] + P["dec_b2"][0]
    K, V, G = [], [], []
    ce1 = ce2 = corr = gsq = 0.0
    g = None
    for t in range(len(obs)):
        g_pi = P["g0"][0].copy() if t == 0 else g @ P["W_a"][act[t - 1]]
        if t > 0 and c.activation == "relu":
            g_pi = relu(g_pi)
        beta = c.beta_base * math.log(max(len(K), 2))
        q = zs(g_pi) @ P["W_e"]
        if K:
            w = _softmax(beta * np.array([q @ k for k in K]) / math.sqrt(c.d_k))
            x_ret = w @ np.array(V)
        else:
            x_ret = P["value_default"][0]
        ce1 += _ce(decode(x_ret), obs[t])
        x_t = P["W_x"][obs[t]]
        if K:
            sims = np.array([(x_t @ v) * (q @ k) for k, v in zip(K, V)])
            w = _softmax(beta * sims / math.sqrt(c.d_k))
            g_ret = (w @ np.array(G)) @ P["map_W"] + P["map_b"][0]
            h = relu(g_ret @ P["gate_Wr"] + g_pi @ P["gate_Wp"] + P["gate_b1"][0])
            gate = 1.0 / (1.0 + np.exp(-(h @ P["gate_W2"] + P["gate_b2"][0])))
            step = gate * (g_ret - g_pi)
            g = g_pi + step
            corr += step @ step
        else:
            g = g_pi
        key = zs(g) @ P["W_e"]
        if K:
            w = _softmax(beta * np.array([key @ k for k in K]) / math.sqrt(c.d_k))
            x_ret2 = w @ np.array(V)
        else:
            x_ret2 = P["value_default"][0]
        ce2 += _ce(decode(x_ret2), obs[t])
        gsq += g @ g
        cos = lambda a, b: (a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        best = max((cos(key, k) * cos(x_t, v) for k, v in zip(K, V)), default=-np.inf)
        if not gating or not K or best < c.add_threshold:
            K.append(key), V.append(x_t), G.append(g)
    T = len(obs)
    wl2 = sum((P[k] ** 2).sum() for k in WEIGHT_NAMES if k != "W_x" or c.learn_w_x)
    parts = (ce1 / T, ce2 / T, corr / T, wl2, gsq / T)
    return sum(l * p for l, p in zip(c.loss_weights, parts)), parts


def arrays(params):
    return {k: t.data for k, t in params.tensors.items()}


# --------------------------------------------------------------------------


def test_first_step_prediction_is_the_prior():
    params = init_params(small_config(), 0)
    params["value_default"].data[:] = np.linspace(-0.5, 1.0, params.config.d_v)
    res = run_batch(params, np.array([[0, 1, 2]]), np.array([[0, 1, 2]]), record=True)
    P = arrays(params)
    prior = np.maximum(P["value_default"] @ P["dec_W1"] + P["dec_b1"], 0) @ P["dec_W2"] + P["dec_b2"]
    np.testing.assert_allclose(res.traces[0].logits[0], prior[0], rtol=0, atol=1e-14)


def revisit_params():
    c = ModelConfig(n_stim=3, n_actions=1, n_g=4, d_k=4, decoder_hidden=3, gate_hidden=2, loss_weights=(1, 1, 0, 0, 0))
    params = init_params(c, 0)
    P = params.tensors
    P["W_a"].data[0] = np.eye(4)[[1, 0, 2, 3]]
    P["g0"].data[:] = [[3.0, 0.0, 0.0, 0.0]]
    P["W_e"].data[:] = np.eye(4)
    P["W_x"].data[:] = np.eye(3)
    P["dec_W1"].data[:] = np.eye(3)
    P["dec_b1"].data[:] = 0.0
    P["dec_W2"].data[:] = np.eye(3)
    P["dec_b2"].data[:] = 0.0
    P["gate_b2"].data[:] = -60.0
    return params


def test_revisit_recalls_stored_stimulus():
    # two positions alternate; the store holds one memory for each
    params = revisit_params()
    obs = np.array([[2, 1, 2, 1, 2]])
    res = run_batch(params, obs, np.zeros_like(obs), record=True)
    tr = res.traces[0]
    assert tr.memory_slots.tolist() == [0, 1]
    assert res.predictions[0, 2:].tolist() == [2, 1, 2]


def test_pure_correction_loss_is_zero_with_closed_gate():
    params = init_params(small_config(loss_weights=(0, 0, 1, 0, 0)), 1)
    params["gate_b2"].data[:] = -800.0
    ep = episode()
    loss, _ = episode_loss(ep, params)
    assert loss.data.item() == 0.0


def test_weight_penalty_zero_with_zero_weights():
    params = init_params(small_config(loss_weights=(0, 0, 0, 1, 0)), 1)
    for k in WEIGHT_NAMES:
        params[k].data[:] = 0.0
    loss, _ = episode_loss(episode(), params)
    assert loss.data.item() == 0.0


def test_two_step_loss_matches_reference():
    c = small_config()
    params = init_params(c, 3)
    obs, act = np.array([1, 3]), np.array([2, 0])
    res = run_batch(params, obs, act)
    ref, parts = reference_loss(arrays(params), c, obs, act)
    assert abs(res.components["loss"] - ref) < 1e-10
    for name, v in zip(("ce_pi", "ce_g", "g_correction", "weight_l2", "g_l2"), parts):
        assert abs(res.components[name] - v) < 1e-10


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("gating", [True, False])
def test_longer_episode_matches_reference(seed, gating):
    c = small_config(activation="relu" if seed % 2 else "linear", learn_w_x=seed == 3)
    params = init_params(c, seed)
    ep = episode(T=12, seed=seed)
    res = run_batch(params, ep.observations, ep.actions, gating=gating)
    ref, _ = reference_loss(arrays(params), c, ep.observations, ep.actions, gating)
    assert abs(res.components["loss"] - ref) < 1e-10


def test_batch_rows_are_independent():
    c = small_config()
    params = init_params(c, 2)
    eps = [episode(T=8, seed=s) for s in range(3)]
    obs = np.stack([e.observations for e in eps])
    act = np.stack([e.actions for e in eps])
    batch = run_batch(params, obs, act)
    singles = [run_batch(params, o, a).components for o, a in zip(obs, act)]
    for k in ("ce_pi", "ce_g", "g_correction", "g_l2"):
        assert abs(batch.components[k] - np.mean([s[k] for s in singles])) < 1e-12
    assert batch.components["weight_l2"] == singles[0]["weight_l2"]
    for b in range(3):
        np.testing.assert_array_equal(batch.predictions[b], run_batch(params, obs[b], act[b]).predictions[0])


def test_episode_loss_needs_two_steps():
    with pytest.raises(ValueError):
        episode_loss(episode(T=1), init_params(small_config(), 0))


def test_zero_shot_metric_counts_flagged_steps():
    params = init_params(small_config(), 0)
    ep = episode(T=30, seed=4)
    _, m = episode_loss(ep, params)
    res = run_batch(params, ep.observations, ep.actions)
    mask = ep.zero_shot_mask
    assert m["zero_shot_steps"] == int(mask.sum()) > 0
    assert m["zero_shot_accuracy"] == pytest.approx(res.correct[0][mask].mean(), abs=0)


def test_memory_attention_rows_sum_to_one():
    params = init_params(small_config(), 0)
    ep = episode(T=20, seed=1)
    tr = run_batch(params, ep.observations, ep.actions, record=True).traces[0]
    sums = tr.attention[1:].sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)
    assert tr.attention.shape == (20, tr.memory_slots.size)
    assert tr.memory_slots.size == int(tr.added.sum())


def test_argmax_invariant_to_logit_temperature():
    params = init_params(small_config(), 5)
    ep = episode(T=10, seed=5)
    base = run_batch(params, ep.observations, ep.actions).predictions
    for s in (0.1, 3.0):
        p = params.copy()
        p["dec_W2"].data *= s
        p["dec_b2"].data *= s
        np.testing.assert_array_equal(run_batch(p, ep.observations, ep.actions).predictions, base)


def test_grad_check_three_step_model():
    c = small_config()
    params = init_params(c, 0)
    ep = episode(T=3)
    tr = params.trainable
    rep = dc.grad_check(lambda: run_batch(params, ep.observations, ep.actions, gating=False).loss,
                        list(tr.values()), names=list(tr))
    assert rep.passed, str(rep)


def test_deterministic_loss():
    c = small_config()
    ep = episode(T=10)
    a = run_batch(init_params(c, 7), ep.observations, ep.actions).components
    b = run_batch(init_params(c, 7), ep.observations, ep.actions).components
    assert a == b


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    params = init_params(small_config(), 4)
    path = tmp_path / "a.temt"
    checkpoint_save(params, path)
    loaded = checkpoint_load(path)
    checkpoint_save(loaded, tmp_path / "b.temt")
    assert path.read_bytes() == (tmp_path / "b.temt").read_bytes()
    assert loaded.digest() == params.digest()
    assert loaded.config == params.config
    assert {k for k, t in loaded.tensors.items() if t.requires_grad} == set(params.trainable)


def test_loaded_checkpoint_gives_identical_logits(tmp_path):
    params = init_params(small_config(), 4)
    ep = episode(T=10, seed=2)
    before = run_batch(params, ep.observations, ep.actions, record=True).traces[0].logits
    checkpoint_save(params, tmp_path / "c.temt")
    after = run_batch(checkpoint_load(tmp_path / "c.temt"), ep.observations, ep.actions, record=True)
    np.testing.assert_array_equal(after.traces[0].logits, before)


def test_truncated_and_corrupt_checkpoints():
    data = checkpoint_bytes(init_params(small_config(), 0))
    for bad in (data[:5], data[:30], data[:-1]):
        with pytest.raises(CheckpointError):
            checkpoint_parse(bad)
    flipped = bytearray(data)
    flipped[-3] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_parse(bytes(flipped))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_parse(b"X" + data[1:])
    wrong_version = data[:8] + (99).to_bytes(4, "little") + data[12:]
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_parse(wrong_version)


def test_checkpoint_config_mismatch_warns():
    data = checkpoint_bytes(init_params(small_config(), 0))
    with pytest.warns(UserWarning):
        checkpoint_parse(data, small_config(n_g=8))


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(loss_weights=(1, 1, 1, 1))
    with pytest.raises(ValueError):
        small_config(loss_weights=(1, 1, -1, 1, 1))
    with pytest.raises(ValueError):
        small_config(activation="tanh")
    assert ModelConfig().d_v == 10 and ModelConfig().beta_base == pytest.approx(math.sqrt(32))
