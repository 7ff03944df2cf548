from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from temt.envgen import (EAST, NORTH, SOUTH, WEST, EnvParseError, environment_family,
                         first_visit_flags, generate_environment, parse_environment, parse_episode,
                         replay, sample_trajectory, serialize_environment, serialize_episode)

sizes = st.integers(2, 7)
seeds = st.integers(0, 2**64 - 1)


def test_square_2x2_moves_and_loop():
    env = generate_environment("square4", 2, 2, 5, 123)
    assert env.n_nodes == 4
    origin = env.node_at(0, 0)
    assert env.adjacency[origin, NORTH] == env.node_at(0, 1)
    assert env.adjacency[origin, EAST] == env.node_at(1, 0)
    node = origin
    for a in (NORTH, EAST, SOUTH, WEST):
        node = env.adjacency[node, a]
    assert node == origin


def test_10x10_has_aliased_stimuli():
    env = generate_environment("square4", 10, 10, 45, 5)
    assert env.n_nodes == 100
    assert np.bincount(env.stimulus_of, minlength=45).max() >= 2


def test_hex_interior_neighbours_and_inverses():
    env = generate_environment("hex6", 5, 5, 45, 1)
    interior = [n for n in range(env.n_nodes) if env.is_interior(n)]
    assert interior
    for n in interior:
        assert len(env.neighbours(n)) == 6
        for a in range(6):
            assert env.adjacency[env.adjacency[n, a], (a + 3) % 6] == n


@given(w=sizes, h=sizes, seed=seeds)
def test_square_loop_closure_everywhere_interior(w, h, seed):
    env = generate_environment("square4", w, h, 3, seed)
    for n in range(env.n_nodes):
        if not env.is_interior(n):
            continue
        node = n
        for a in (NORTH, EAST, SOUTH, WEST):
            node = env.adjacency[node, a]
        assert node == n


@given(topology=st.sampled_from(["square4", "hex6"]), w=sizes, h=sizes, n_stim=st.integers(2, 50), seed=seeds)
def test_environment_invariants(topology, w, h, n_stim, seed):
    env = generate_environment(topology, w, h, n_stim, seed)
    assert env.adjacency.min() >= 0 and env.adjacency.max() < env.n_nodes
    assert env.stimulus_of.min() >= 0 and env.stimulus_of.max() < n_stim
    assert len({tuple(c) for c in np.round(env.coords, 9)}) == env.n_nodes
    assert env == generate_environment(topology, w, h, n_stim, seed)


@pytest.mark.parametrize("args", [("square4", 1, 3, 4), ("square4", 3, 3, 1), ("ring", 3, 3, 4)])
def test_invalid_parameters(args):
    with pytest.raises(ValueError):
        generate_environment(*args, 0)


def test_neighbouring_hex_nodes_are_unit_distance():
    env = generate_environment("hex6", 4, 4, 3, 0)
    xy = env.coords
    for n in range(env.n_nodes):
        for m in env.neighbours(n):
            assert np.linalg.norm(xy[n] - xy[m]) == pytest.approx(1.0)


def test_stimulus_marginals_near_uniform():
    envs = environment_family("square4", 10, 10, 20, 3, 100)
    counts = np.bincount(np.concatenate([e.stimulus_of for e in envs]), minlength=20)
    n = counts.sum()
    p = 1 / 20
    assert n >= 10**4
    assert np.all(np.abs(counts - n * p) <= 5 * np.sqrt(n * p * (1 - p)))


def test_family_shares_structure():
    envs = environment_family("square4", 4, 4, 45, 9, 3)
    assert all(np.array_equal(e.adjacency, envs[0].adjacency) for e in envs)
    assert len({e.stimulus_of.tobytes() for e in envs}) == 3


def test_trajectory_t1():
    ep = sample_trajectory(generate_environment("square4", 3, 3, 4, 0), 1, 0)
    assert ep.length == 1 and ep.actions.shape == (1,)
    assert not ep.first_visit_flags[:, 0].any()


def test_small_lattice_fully_visited_with_zero_shot_steps():
    env = generate_environment("square4", 2, 2, 4, 0)
    ep = sample_trajectory(env, 100, 3)
    assert set(ep.node_trace.tolist()) == set(range(4))
    assert ep.zero_shot_mask.any()
    np.testing.assert_array_equal(replay(env, ep.node_trace[0], ep.actions, 100), ep.node_trace)


def test_trajectory_deterministic():
    env = generate_environment("hex6", 4, 4, 9, 0)
    assert sample_trajectory(env, 50, 7) == sample_trajectory(env, 50, 7)
    assert sample_trajectory(env, 50, 7) != sample_trajectory(env, 50, 8)


@given(seed=seeds, T=st.integers(1, 60), topology=st.sampled_from(["square4", "hex6"]))
def test_episode_invariants(seed, T, topology):
    env = generate_environment(topology, 3, 4, 6, seed)
    ep = sample_trajectory(env, T, seed)
    np.testing.assert_array_equal(ep.observations, env.stimulus_of[ep.node_trace])
    np.testing.assert_array_equal(replay(env, ep.node_trace[0], ep.actions, T), ep.node_trace)
    np.testing.assert_array_equal(first_visit_flags(ep.node_trace, ep.actions), ep.first_visit_flags)
    # a repeated edge implies a repeated node
    assert not np.any(ep.first_visit_flags[:, 1] & ~ep.first_visit_flags[:, 0])


def test_first_visit_flags_by_hand():
    trace = np.array([0, 1, 0, 1, 1])
    actions = np.array([1, 3, 1, 2, 0])
    flags = first_visit_flags(trace, actions)
    np.testing.assert_array_equal(flags[:, 0], [False, False, True, True, True])
    # edges: (1,1) new, (0,3) new, (1,1) seen, (1,2) new
    np.testing.assert_array_equal(flags[:, 1], [False, False, False, True, False])


@given(topology=st.sampled_from(["square4", "hex6"]), seed=seeds, n_stim=st.integers(2, 99))
def test_environment_roundtrip(topology, seed, n_stim):
    env = generate_environment(topology, 3, 2, n_stim, seed, env_id=4)
    assert parse_environment(serialize_environment(env)) == env


def test_episode_roundtrip():
    ep = sample_trajectory(generate_environment("square4", 3, 3, 5, 1), 40, 2)
    assert parse_episode(serialize_episode(ep)) == ep


@pytest.mark.parametrize("cut", [0, 5, 30, -3])
def test_truncated_environment_is_rejected(cut):
    data = serialize_environment(generate_environment("square4", 2, 2, 5, 0))
    with pytest.raises(EnvParseError):
        parse_environment(data[:cut])


def test_parse_error_reports_offset():
    data = serialize_environment(generate_environment("square4", 2, 2, 5, 0))
    bad = data.replace(b"n_stim 5", b"n_stim x")
    with pytest.raises(EnvParseError) as err:
        parse_environment(bad)
    assert err.value.offset == bad.index(b"n_stim")


def test_hand_written_1x2_file(golden):
    env = parse_environment((golden / "env_1x2.txt").read_bytes())
    assert (env.id, env.width, env.height, env.n_stim, env.seed) == (3, 1, 2, 4, 11)
    np.testing.assert_array_equal(env.adjacency, [[1, 0, 0, 0], [1, 1, 0, 1]])
    np.testing.assert_array_equal(env.stimulus_of, [2, 3])
    assert serialize_environment(env) == (golden / "env_1x2.txt").read_bytes()
