"""Lattice environments with random stimuli, random walks, and their text formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1

# square4 action ids
NORTH, EAST, SOUTH, WEST = 0, 1, 2, 3
SQUARE_STEPS = ((0, 1), (1, 0), (0, -1), (-1, 0))
# hex6 in axial (q, r) coordinates; action k and k+3 are opposite
HEX_STEPS = ((1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))

TOPOLOGIES = {"square4": SQUARE_STEPS, "hex6": HEX_STEPS}


class EnvParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte {offset})")


@dataclass(frozen=True)
class Environment:
    id: int
    topology: str
    width: int
    height: int
    n_stim: int
    seed: int
    # adjacency[node, action] -> node
    adjacency: np.ndarray = field(repr=False)
    stimulus_of: np.ndarray = field(repr=False)
    # lattice index (column, row) of each node; ``coords`` gives geometry
    lattice: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_actions(self) -> int:
        return self.adjacency.shape[1]

    @property
    def coords(self) -> np.ndarray:
        """2-D node positions with unit spacing between neighbours."""
        q, r = self.lattice[:, 0].astype(float), self.lattice[:, 1].astype(float)
        if self.topology == "hex6":
            return np.stack([q + 0.5 * r, r * np.sqrt(3) / 2], axis=1)
        return np.stack([q, r], axis=1)

    def node_at(self, col: int, row: int) -> int:
        return int(row * self.width + col)

    def neighbours(self, node: int) -> set[int]:
        return {int(n) for n in self.adjacency[node] if n != node}

    def is_interior(self, node: int) -> bool:
        return int(np.sum(self.adjacency[node] != node)) == self.n_actions

    def with_stimuli(self, stimulus_of: np.ndarray, env_id: int | None = None) -> "Environment":
        return Environment(self.id if env_id is None else env_id, self.topology, self.width,
                           self.height, self.n_stim, self.seed, self.adjacency,
                           np.asarray(stimulus_of, dtype=np.int64), self.lattice)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Environment):
            return NotImplemented
        return (self.id == other.id and self.topology == other.topology
                and self.width == other.width and self.height == other.height
                and self.n_stim == other.n_stim and self.seed == other.seed
                and np.array_equal(self.adjacency, other.adjacency)
                and np.array_equal(self.stimulus_of, other.stimulus_of)
                and np.array_equal(self.lattice, other.lattice))

    __hash__ = None


@dataclass(frozen=True)
class Episode:
    env_id: int
    observations: np.ndarray
    actions: np.ndarray
    node_trace: np.ndarray
    # (node seen before, edge (node, incoming action) traversed before)
    first_visit_flags: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return int(self.observations.shape[0])

    @property
    def zero_shot_mask(self) -> np.ndarray:
        """Steps reaching a known node over an edge never taken before."""
        seen, edge_seen = self.first_visit_flags[:, 0], self.first_visit_flags[:, 1]
        return seen & ~edge_seen

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.env_id == other.env_id
                and np.array_equal(self.observations, other.observations)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.node_trace, other.node_trace)
                and np.array_equal(self.first_visit_flags, other.first_visit_flags))

    __hash__ = None


def _lattice_adjacency(topology: str, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    steps = TOPOLOGIES[topology]
    n = width * height
    lattice = np.array([(c, r) for r in range(height) for c in range(width)], dtype=np.int64)
    adj = np.empty((n, len(steps)), dtype=np.int64)
    for node, (c, r) in enumerate(lattice):
        for a, (dc, dr) in enumerate(steps):
            c2, r2 = c + dc, r + dr
            # leaving the patch is a self-loop
            adj[node, a] = r2 * width + c2 if 0 <= c2 < width and 0 <= r2 < height else node
    return adj, lattice


def generate_environment(topology: str, width: int, height: int, n_stim: int, seed: int,
                         env_id: int = 0) -> Environment:
    """Build a lattice and draw one stimulus per node, uniformly with replacement.

    ``square4`` actions are (North, East, South, West); ``hex6`` is an axial
    parallelogram with six actions where ``a`` and ``(a + 3) % 6`` are opposite.
    """
    if topology not in TOPOLOGIES:
        raise ValueError(f"unknown topology {topology!r}; expected one of {sorted(TOPOLOGIES)}")
    if width < 2 or height < 2:
        raise ValueError(f"lattice must be at least 2x2, got {width}x{height}")
    if n_stim < 2:
        raise ValueError(f"n_stim must be >= 2, got {n_stim}")
    adj, lattice = _lattice_adjacency(topology, width, height)
    rng = np.random.default_rng(np.uint64(seed % 2**64))
    stim = rng.integers(0, n_stim, size=adj.shape[0], dtype=np.int64)
    return Environment(env_id, topology, width, height, n_stim, seed, adj, stim, lattice)


def first_visit_flags(node_trace: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Per step: was the node seen earlier, and was it entered by this action before.

    The edge into step ``t`` is ``(node_trace[t], actions[t - 1])``; step 0 has
    no incoming edge and counts as a new edge.
    """
    T = len(node_trace)
    flags = np.zeros((T, 2), dtype=bool)
    seen: set[int] = set()
    edges: set[tuple[int, int]] = set()
    for t in range(T):
        node = int(node_trace[t])
        flags[t, 0] = node in seen
        if t > 0:
            edge = (node, int(actions[t - 1]))
            flags[t, 1] = edge in edges
            edges.add(edge)
        seen.add(node)
    return flags


def replay(env: Environment, start: int, actions: Iterable[int], length: int) -> np.ndarray:
    trace = np.empty(length, dtype=np.int64)
    trace[0] = start
    for t, a in zip(range(1, length), actions):
        trace[t] = env.adjacency[trace[t - 1], a]
    return trace


def sample_trajectory(env: Environment, T: int, policy_seed: int,
                      start_node: int | None = None) -> Episode:
    """Uniform random walk of ``T`` steps; wall actions are taken and leave the agent in place."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    rng = np.random.default_rng(np.uint64(policy_seed % 2**64))
    start = int(rng.integers(env.n_nodes)) if start_node is None else int(start_node)
    if not 0 <= start < env.n_nodes:
        raise ValueError(f"start node {start} out of range")
    actions = rng.integers(0, env.n_actions, size=T, dtype=np.int64)
    trace = replay(env, start, actions, T)
    return Episode(env.id, env.stimulus_of[trace].copy(), actions, trace,
                   first_visit_flags(trace, actions))


def environment_family(topology: str, width: int, height: int, n_stim: int, seed: int,
                       count: int, first_id: int = 0) -> list[Environment]:
    """``count`` environments sharing one lattice with independent stimulus draws."""
    seq = np.random.SeedSequence(seed % 2**64)
    seeds = [int(s.generate_state(1, dtype=np.uint64)[0]) for s in seq.spawn(count)]
    return [generate_environment(topology, width, height, n_stim, s, env_id=first_id + i)
            for i, s in enumerate(seeds)]


# --------------------------------------------------------------------------
# text formats


def serialize_environment(env: Environment) -> bytes:
    lines = [
        f"temt-environment {FORMAT_VERSION}",
        f"id {env.id}",
        f"topology {env.topology}",
        f"dims {env.width} {env.height}",
        f"n_stim {env.n_stim}",
        f"seed {env.seed}",
        f"nodes {env.n_nodes}",
    ]
    for node in range(env.n_nodes):
        c, r = env.lattice[node]
        nbrs = " ".join(str(int(x)) for x in env.adjacency[node])
        lines.append(f"{node} {c} {r} {int(env.stimulus_of[node])} {nbrs}")
    return ("\n".join(lines) + "\n").encode("ascii")


class _Lines:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def next(self, what: str) -> tuple[list[str], int]:
        if self.pos >= len(self.data):
            raise EnvParseError(f"unexpected end of input, expected {what}", self.pos)
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise EnvParseError(f"unterminated line, expected {what}", self.pos)
        start = self.pos
        try:
            text = self.data[start:end].decode("ascii")
        except UnicodeDecodeError as exc:
            raise EnvParseError("non-ascii byte", start + exc.start) from None
        self.pos = end + 1
        return text.split(), start

    def keyed(self, key: str, n: int) -> list[str]:
        parts, at = self.next(key)
        if len(parts) != n + 1 or parts[0] != key:
            raise EnvParseError(f"expected '{key}' with {n} value(s)", at)
        return parts[1:]


def _ints(parts: list[str], at: int) -> list[int]:
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise EnvParseError("expected integers", at) from None


def parse_environment(data: bytes) -> Environment:
    src = _Lines(bytes(data))
    head, at = src.next("header")
    if len(head) != 2 or head[0] != "temt-environment":
        raise EnvParseError("not an environment file", at)
    if head[1] != str(FORMAT_VERSION):
        raise EnvParseError(f"unsupported version {head[1]}", at)
    at = src.pos
    env_id = _ints(src.keyed("id", 1), at)[0]
    at = src.pos
    topology = src.keyed("topology", 1)[0]
    if topology not in TOPOLOGIES:
        raise EnvParseError(f"unknown topology {topology!r}", at)
    at = src.pos
    width, height = _ints(src.keyed("dims", 2), at)
    at = src.pos
    n_stim = _ints(src.keyed("n_stim", 1), at)[0]
    at = src.pos
    seed = _ints(src.keyed("seed", 1), at)[0]
    at = src.pos
    n_nodes = _ints(src.keyed("nodes", 1), at)[0]
    if n_nodes != width * height:
        raise EnvParseError(f"node count {n_nodes} does not match dims {width}x{height}", at)
    n_act = len(TOPOLOGIES[topology])
    adj = np.empty((n_nodes, n_act), dtype=np.int64)
    stim = np.empty(n_nodes, dtype=np.int64)
    lattice = np.empty((n_nodes, 2), dtype=np.int64)
    for node in range(n_nodes):
        parts, at = src.next(f"node line {node}")
        vals = _ints(parts, at)
        if len(vals) != 4 + n_act or vals[0] != node:
            raise EnvParseError(f"malformed line for node {node}", at)
        lattice[node] = vals[1:3]
        stim[node] = vals[3]
        adj[node] = vals[4:]
        if not 0 <= stim[node] < n_stim:
            raise EnvParseError(f"stimulus {stim[node]} out of range", at)
        if adj[node].min() < 0 or adj[node].max() >= n_nodes:
            raise EnvParseError("neighbour id out of range", at)
    if src.pos != len(src.data):
        raise EnvParseError("trailing data after last node", src.pos)
    return Environment(env_id, topology, width, height, n_stim, seed, adj, stim, lattice)


def serialize_episode(ep: Episode) -> bytes:
    lines = [f"temt-episode {FORMAT_VERSION}", f"env {ep.env_id}", f"length {ep.length}"]
    lines += [f"{int(x)} {int(a)} {int(n)}" for x, a, n in zip(ep.observations, ep.actions, ep.node_trace)]
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_episode(data: bytes) -> Episode:
    src = _Lines(bytes(data))
    head, at = src.next("header")
    if len(head) != 2 or head[0] != "temt-episode" or head[1] != str(FORMAT_VERSION):
        raise EnvParseError("not a supported episode file", at)
    at = src.pos
    env_id = _ints(src.keyed("env", 1), at)[0]
    at = src.pos
    T = _ints(src.keyed("length", 1), at)[0]
    rows = np.empty((T, 3), dtype=np.int64)
    for t in range(T):
        parts, at = src.next(f"step {t}")
        if len(parts) != 3:
            raise EnvParseError(f"malformed step {t}", at)
        rows[t] = _ints(parts, at)
    if src.pos != len(src.data):
        raise EnvParseError("trailing data after last step", src.pos)
    x, a, nodes = rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].copy()
    return Episode(env_id, x, a, nodes, first_visit_flags(nodes, a))
