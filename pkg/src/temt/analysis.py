"""Rate maps of position units and memory neurons, grid/place scores, remapping.

Activity is averaged per lattice node and smoothed with a Gaussian kernel
over node coordinates (sigma in lattice units). The kernel is restricted to
visited nodes and scaled to be doubly stochastic, so constant maps stay
constant and total mass is preserved.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.interpolate import griddata
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .envgen import Environment, sample_trajectory
from .model import ModelParams, run_batch

SOURCES = ("position_unit", "memory_neuron")
DEFAULT_SIGMA = 1.0
# smoothing widths the grid-score pipeline is validated over
SIGMA_SWEEP = (0.0, 0.5, 1.0, 1.5)
PLACE_THRESHOLD = 0.2
# place fields are read off the unsmoothed node map: smoothing joins scattered
# firing into one field and would score diffuse activity as a perfect place cell
PLACE_SIGMA = 0.0
ACTIVE_FRAC = 0.01


@dataclass
class RateMap:
    unit: int
    source: str
    env: Environment = field(repr=False)
    # per-node mean activity; NaN where the node was never visited
    raw: np.ndarray = field(repr=False)
    visits: np.ndarray = field(repr=False)
    sigma: float = DEFAULT_SIGMA
    values: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.values is None:
            self.values = smooth(self.env, self.raw, self.sigma)

    @property
    def valid(self) -> np.ndarray:
        return self.visits > 0

    @property
    def coords(self) -> np.ndarray:
        return self.env.coords

    def at_sigma(self, sigma: float) -> "RateMap":
        return self if sigma == self.sigma else RateMap(self.unit, self.source, self.env, self.raw,
                                                        self.visits, sigma)

    @property
    def peak_rate(self) -> float:
        v = self.values[self.valid]
        return float(v.max()) if v.size else float("nan")


def rate_map_from_values(env: Environment, values, sigma: float = DEFAULT_SIGMA,
                         source: str = "position_unit", unit: int = 0,
                         visits: np.ndarray | None = None) -> RateMap:
    """Wrap a per-node array (NaN = unvisited) as a rate map."""
    raw = np.asarray(values, dtype=np.float64).copy()
    if raw.shape != (env.n_nodes,):
        raise ValueError(f"expected {env.n_nodes} node values, got shape {raw.shape}")
    if visits is None:
        visits = np.where(np.isnan(raw), 0, 1)
    raw[np.asarray(visits) == 0] = np.nan
    return RateMap(unit, source, env, raw, np.asarray(visits), sigma)


# --------------------------------------------------------------------------
# smoothing


def smoothing_kernel(env: Environment, valid: np.ndarray, sigma: float,
                     tol: float = 1e-14, max_iter: int = 10000) -> np.ndarray:
    """Symmetric doubly stochastic Gaussian kernel over the valid nodes."""
    idx = np.flatnonzero(valid)
    if sigma <= 0 or idx.size == 0:
        return np.eye(idx.size)
    xy = env.coords[idx]
    d2 = np.sum((xy[:, None, :] - xy[None, :, :]) ** 2, axis=-1)
    K0 = np.exp(-d2 / (2.0 * sigma**2))
    d = 1.0 / np.sqrt(K0.sum(axis=1))
    for _ in range(max_iter):
        d = np.sqrt(d / (K0 @ d))
        rows = d * (K0 @ d)
        if np.max(np.abs(rows - 1.0)) < tol:
            break
    return d[:, None] * K0 * d[None, :]


def smooth(env: Environment, raw: np.ndarray, sigma: float) -> np.ndarray:
    valid = ~np.isnan(raw)
    out = np.full_like(raw, np.nan, dtype=np.float64)
    K = smoothing_kernel(env, valid, sigma)
    out[valid] = K @ raw[valid]
    return out


# --------------------------------------------------------------------------
# collection


@dataclass
class RateMaps:
    env: Environment = field(repr=False)
    source: str
    # (steps, units) activity and the node occupied at each step
    activity: np.ndarray = field(repr=False)
    node_trace: np.ndarray = field(repr=False)
    sigma: float
    maps: list[RateMap]

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i) -> RateMap:
        return self.maps[i]

    def __iter__(self):
        return iter(self.maps)


def maps_from_activity(env: Environment, activity: np.ndarray, node_trace: np.ndarray,
                       source: str, sigma: float = DEFAULT_SIGMA) -> RateMaps:
    activity = np.asarray(activity, dtype=np.float64)
    trace = np.asarray(node_trace, dtype=np.int64)
    visits = np.bincount(trace, minlength=env.n_nodes)
    onehot = np.zeros((trace.size, env.n_nodes))
    onehot[np.arange(trace.size), trace] = 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (onehot.T @ activity) / visits[:, None]
    means[visits == 0] = np.nan
    maps = [RateMap(j, source, env, means[:, j].copy(), visits, sigma) for j in range(activity.shape[1])]
    return RateMaps(env, source, activity, trace, sigma, maps)


def collect_rate_maps(params: ModelParams, env: Environment, n_steps: int, seed: int,
                      source: str, sigma: float = DEFAULT_SIGMA,
                      start_node: int | None = None) -> RateMaps:
    """Walk ``n_steps`` in ``env`` and average unit activity per node.

    Position units are the corrected positions ``g``. Memory neuron ``j`` is the
    attention weight of the ``j``-th stored memory under the ``g`` query; step 0,
    when the store is still empty, is dropped for memory neurons.
    """
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    if n_steps < 50 * env.n_nodes:
        warnings.warn(f"{n_steps} steps is short of 50 visits per node ({50 * env.n_nodes})")
    ep = sample_trajectory(env, n_steps, seed, start_node=start_node)
    trace = run_batch(params, ep.observations, ep.actions, record=True).traces[0]
    nodes = ep.node_trace
    if source == "position_unit":
        activity = trace.g
    else:
        activity, nodes = trace.attention[1:], nodes[1:]
        sums = activity.sum(axis=1)
        if activity.shape[1] and np.max(np.abs(sums - 1.0)) > 1e-6:
            raise AssertionError(f"memory-neuron activity does not sum to 1 (max dev {np.max(np.abs(sums - 1)):.2e})")
    unvisited = 1.0 - np.unique(nodes).size / env.n_nodes
    if unvisited > 0.1:
        warnings.warn(f"{unvisited:.0%} of nodes were never visited")
    return maps_from_activity(env, activity, nodes, source, sigma)


# --------------------------------------------------------------------------
# grid score


def raster(rate_map: RateMap) -> np.ndarray:
    """Map values on a square pixel grid, NaN off the visited lattice.

    Square lattices map one node to one pixel; hexagonal ones are linearly
    resampled at unit spacing.
    """
    env = rate_map.env
    v = np.where(rate_map.valid, rate_map.values, np.nan)
    if env.topology == "square4":
        return v.reshape(env.height, env.width)
    xy = env.coords[rate_map.valid]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + 1e-9), np.arange(lo[1], hi[1] + 1e-9))
    return griddata(xy, v[rate_map.valid], (gx, gy), method="linear")


def autocorrelogram(arr: np.ndarray, min_overlap: int = 20) -> np.ndarray:
    """Pearson correlation of the map with itself at every integer shift."""
    H, W = arr.shape
    ok = ~np.isnan(arr)
    out = np.full((2 * H - 1, 2 * W - 1), np.nan)
    for dy in range(-(H - 1), H):
        ya, yb = slice(max(0, dy), H + min(0, dy)), slice(max(0, -dy), H + min(0, -dy))
        for dx in range(-(W - 1), W):
            xa, xb = slice(max(0, dx), W + min(0, dx)), slice(max(0, -dx), W + min(0, -dx))
            m = ok[ya, xa] & ok[yb, xb]
            if m.sum() < min_overlap:
                continue
            a, b = arr[ya, xa][m], arr[yb, xb][m]
            a, b = a - a.mean(), b - b.mean()
            den = math.sqrt(float(a @ a) * float(b @ b))
            if den > 1e-12:
                out[dy + H - 1, dx + W - 1] = float(a @ b) / den
    return out


def _rotate(ac: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    ok = ~np.isnan(ac)
    rot = ndimage.rotate(np.where(ok, ac, 0.0), angle, reshape=False, order=1)
    mask = ndimage.rotate(ok.astype(float), angle, reshape=False, order=1) > 0.999
    return rot, mask


def _central_radius(ac: np.ndarray, radius: np.ndarray) -> int:
    """Radius where the central autocorrelation peak ends (first dip below 0 or local minimum)."""
    kmax = int(radius.max())
    ok = ~np.isnan(ac)
    prof = []
    for k in range(kmax + 1):
        ring = ok & (np.abs(radius - k) < 0.5)
        prof.append(float(ac[ring].mean()) if ring.any() else np.nan)
    for k in range(1, kmax):
        if prof[k] < 0 or (not np.isnan(prof[k + 1]) and prof[k] <= prof[k + 1]):
            return k
    return 1


def grid_score(rate_map: RateMap) -> float:
    """Rotational-symmetry score of the spatial autocorrelogram in [-2, 2].

    ``min(r60, r120) - max(r30, r90, r150)`` where ``r_a`` correlates the
    autocorrelogram with itself rotated by ``a`` degrees inside an annulus
    around the central peak; the best outer radius is kept. Returns NaN for
    maps without spatial variance.
    """
    env = rate_map.env
    if min(env.width, env.height) < 5:
        raise ValueError("grid_score needs at least a 5x5 lattice")
    arr = raster(rate_map)
    vals = arr[~np.isnan(arr)]
    if vals.size < 4 or np.ptp(vals) <= 1e-12 * max(1.0, float(np.abs(vals).max())):
        return float("nan")
    ac = autocorrelogram(arr)
    if np.all(np.isnan(ac)):
        return float("nan")
    cy, cx = (np.array(ac.shape) - 1) / 2.0
    yy, xx = np.mgrid[: ac.shape[0], : ac.shape[1]]
    radius = np.hypot(yy - cy, xx - cx)
    r_in = _central_radius(ac, radius)
    r_max = min(arr.shape) - 1
    rotated = {a: _rotate(ac, a) for a in (30, 60, 90, 120, 150)}
    ok = ~np.isnan(ac)
    best = float("nan")
    for r_out in range(r_in + 2, r_max + 1):
        ring = ok & (radius >= r_in) & (radius <= r_out)
        corr = {}
        for a, (rot, mask) in rotated.items():
            m = ring & mask
            if m.sum() < 8:
                break
            x, y = ac[m] - ac[m].mean(), rot[m] - rot[m].mean()
            den = math.sqrt(float(x @ x) * float(y @ y))
            if den <= 1e-12:
                break
            corr[a] = float(x @ y) / den
        if len(corr) < 5:
            continue
        s = min(corr[60], corr[120]) - max(corr[30], corr[90], corr[150])
        best = s if np.isnan(best) else max(best, s)
    return best


# --------------------------------------------------------------------------
# place score


def _node_graph(env: Environment, nodes: np.ndarray) -> coo_matrix:
    keep = np.zeros(env.n_nodes, dtype=bool)
    keep[nodes] = True
    src = np.repeat(np.arange(env.n_nodes), env.n_actions)
    dst = env.adjacency.reshape(-1)
    m = keep[src] & keep[dst] & (src != dst)
    return coo_matrix((np.ones(m.sum()), (src[m], dst[m])), shape=(env.n_nodes, env.n_nodes))


def place_score(rate_map: RateMap, threshold_frac: float = PLACE_THRESHOLD) -> float:
    """Fraction of supra-threshold firing mass in the largest connected field.

    Nodes at or above ``threshold_frac * peak`` form fields under lattice
    adjacency. 1 means all firing sits in one field; NaN for an all-zero map.
    """
    v = np.where(rate_map.valid, rate_map.values, np.nan)
    finite = v[~np.isnan(v)]
    if finite.size and finite.min() < -1e-12:
        raise ValueError("place_score needs a nonnegative map")
    peak = finite.max() if finite.size else 0.0
    if not peak > 0:
        return float("nan")
    above = np.flatnonzero(np.nan_to_num(v, nan=-1.0) >= threshold_frac * peak)
    _, labels = connected_components(_node_graph(rate_map.env, above), directed=False)
    mass = np.bincount(labels[above], weights=v[above])
    return float(mass.max() / mass.sum())


# --------------------------------------------------------------------------
# score tables


@dataclass
class ScoreTable:
    units: np.ndarray
    sources: list[str]
    grid: np.ndarray
    place: np.ndarray
    peak: np.ndarray
    active: np.ndarray

    COLUMNS = ("unit", "source", "grid_score", "place_score", "peak_rate", "active")

    def __len__(self) -> int:
        return len(self.units)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for i in range(len(self)):
            w.writerow([int(self.units[i]), self.sources[i], _fmt(self.grid[i]), _fmt(self.place[i]),
                        _fmt(self.peak[i]), int(bool(self.active[i]))])
        return out.getvalue()


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.6g}"


def score_maps(maps: Sequence[RateMap], threshold_frac: float = PLACE_THRESHOLD,
               active_frac: float = ACTIVE_FRAC, grid: bool = True,
               place_sigma: float = PLACE_SIGMA) -> ScoreTable:
    """Grid score of each map as smoothed and place score at ``place_sigma``.

    A unit is active if its peak exceeds ``active_frac`` of the population's
    largest peak.
    """
    maps = list(maps)
    peak = np.array([m.peak_rate for m in maps])
    top = np.nanmax(peak) if peak.size and not np.all(np.isnan(peak)) else 0.0
    gs, ps = [], []
    for m in maps:
        gs.append(grid_score(m) if grid and min(m.env.width, m.env.height) >= 5 else float("nan"))
        pm = m.at_sigma(place_sigma)
        vals = pm.values[pm.valid]
        ps.append(place_score(pm, threshold_frac) if vals.size and vals.min() >= -1e-12 else float("nan"))
    return ScoreTable(np.array([m.unit for m in maps], dtype=np.int64), [m.source for m in maps],
                      np.array(gs), np.array(ps), peak, np.nan_to_num(peak, nan=-np.inf) > active_frac * top)


@dataclass
class ShuffleControl:
    observed_median: float
    null_medians: np.ndarray
    p_value: float


def place_shuffle_control(rate_maps: RateMaps, n_shuffles: int = 100, seed: int = 0,
                          threshold_frac: float = PLACE_THRESHOLD,
                          place_sigma: float = PLACE_SIGMA) -> ShuffleControl:
    """Compare the median place score with maps rebuilt from time-shuffled activity.

    Each shuffle permutes every unit's activity over time independently, which
    keeps its rate distribution and destroys its relation to position.
    """
    rng = np.random.default_rng(seed)

    def median_score(activity):
        rm = maps_from_activity(rate_maps.env, activity, rate_maps.node_trace, rate_maps.source, place_sigma)
        s = np.array([place_score(m, threshold_frac) for m in rm])
        return float(np.nanmedian(s)) if np.any(~np.isnan(s)) else float("nan")

    obs = median_score(rate_maps.activity)
    null = np.empty(n_shuffles)
    act = rate_maps.activity
    for i in range(n_shuffles):
        null[i] = median_score(rng.permuted(act, axis=0))
    p = (1 + int(np.sum(null >= obs))) / (1 + n_shuffles)
    return ShuffleControl(obs, null, p)


# --------------------------------------------------------------------------
# remapping


def _peak_nodes(maps: RateMaps) -> np.ndarray:
    return np.array([int(np.nanargmax(np.where(m.valid, m.values, np.nan)))
                     if np.any(m.valid) and np.nanmax(m.values) > 0 else -1 for m in maps])


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a - a.mean(), b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b) / den if den > 1e-12 else float("nan")


def map_correlations(a: RateMaps, b: RateMaps) -> np.ndarray:
    """Per-unit correlation of two sets of maps over nodes valid in both."""
    out = []
    for ma, mb in zip(a, b):
        ok = ma.valid & mb.valid
        out.append(_pearson(ma.values[ok], mb.values[ok]) if ok.sum() > 2 else float("nan"))
    return np.array(out)


def _pairwise(xy: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(len(xy), 1)
    return np.hypot(*(xy[i] - xy[j]).T)


@dataclass
class RemapReport:
    # one entry per environment pair
    pairs: list[tuple[int, int]]
    position_corr: np.ndarray
    memory_distance_corr: np.ndarray
    n_memory_neurons: np.ndarray
    null: np.ndarray
    p_value: float

    @property
    def mean_position_corr(self) -> float:
        return float(np.nanmean(self.position_corr))

    @property
    def mean_memory_distance_corr(self) -> float:
        return float(np.nanmean(self.memory_distance_corr))


def remapping_stats(params: ModelParams, envs: Sequence[Environment], seed: int,
                    n_steps: int | None = None, n_perm: int = 1000, sigma: float = DEFAULT_SIGMA,
                    walk_seeds: Sequence[int] | None = None, start_node: int | None = None) -> RemapReport:
    """Compare how position units and memory neurons change across environments.

    Every environment is walked from the same start node, by default with a
    different walk per environment. Position units: mean per-unit map
    correlation. Memory neurons (the ``j``-th stored memory in each
    environment): correlation of pairwise field-peak distances, with a label
    permutation null on the mean over environment pairs.
    """
    if len(envs) < 2:
        raise ValueError("remapping needs at least 2 environments")
    rng = np.random.default_rng(seed)
    n_steps = n_steps or 50 * envs[0].n_nodes
    start = int(rng.integers(envs[0].n_nodes)) if start_node is None else start_node
    if walk_seeds is None:
        walk_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(len(envs))]
    pos, mem = [], []
    for env, ws in zip(envs, walk_seeds):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pos.append(collect_rate_maps(params, env, n_steps, ws, "position_unit", sigma, start))
            mem.append(collect_rate_maps(params, env, n_steps, ws, "memory_neuron", sigma, start))
    pairs, pcorr, dcorr, counts, dists = [], [], [], [], []
    for i in range(len(envs)):
        for j in range(i + 1, len(envs)):
            pairs.append((i, j))
            pcorr.append(float(np.nanmean(map_correlations(pos[i], pos[j]))))
            pa, pb = _peak_nodes(mem[i]), _peak_nodes(mem[j])
            n = min(len(pa), len(pb))
            keep = np.flatnonzero((pa[:n] >= 0) & (pb[:n] >= 0))
            xa, xb = envs[i].coords[pa[keep]], envs[j].coords[pb[keep]]
            counts.append(keep.size)
            dists.append((xa, xb))
            dcorr.append(_pearson(_pairwise(xa), _pairwise(xb)) if keep.size > 3 else float("nan"))
    dcorr = np.array(dcorr)
    null = np.empty(n_perm)
    for k in range(n_perm):
        vals = [_pearson(_pairwise(xa), _pairwise(xb[rng.permutation(len(xb))])) if len(xa) > 3 else np.nan
                for xa, xb in dists]
        null[k] = np.nanmean(vals)
    obs = float(np.nanmean(dcorr))
    p = (1 + int(np.sum(np.abs(null) >= abs(obs)))) / (1 + n_perm)
    return RemapReport(pairs, np.array(pcorr), dcorr, np.array(counts), null, p)


# --------------------------------------------------------------------------
# export

# Pixel intensity for a visited node is 1 + round(254 * (v - lo) / (hi - lo))
# with lo/hi the map's own min/max (128 for a constant map); unvisited nodes are 0.


def map_image(rate_map: RateMap, scale: int = 8) -> np.ndarray:
    """Grayscale raster, one ``scale``-pixel block per node, north up.

    Hexagonal rows are offset by half a block per row.
    """
    env = rate_map.env
    v = np.where(rate_map.valid, rate_map.values, np.nan)
    finite = v[~np.isnan(v)]
    inten = np.zeros(env.n_nodes, dtype=np.uint8)
    if finite.size:
        lo, hi = finite.min(), finite.max()
        ok = ~np.isnan(v)
        inten[ok] = 128 if hi - lo <= 0 else 1 + np.round(254 * (v[ok] - lo) / (hi - lo)).astype(np.int64)
    hexa = env.topology == "hex6"
    width = env.width * scale + (((env.height - 1) * scale + 1) // 2 if hexa else 0)
    img = np.zeros((env.height * scale, width), dtype=np.uint8)
    for node, (c, r) in enumerate(env.lattice):
        x0 = c * scale + ((r * scale) // 2 if hexa else 0)
        y0 = (env.height - 1 - r) * scale
        img[y0: y0 + scale, x0: x0 + scale] = inten[node]
    return img


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


HIST_EDGES = {"grid_score": np.linspace(-2.0, 2.0, 41), "place_score": np.linspace(0.0, 1.0, 21)}


def histogram_csv(scores: ScoreTable) -> str:
    lines = ["score,bin_lo,bin_hi,count"]
    for name, arr in (("grid_score", scores.grid), ("place_score", scores.place)):
        edges = HIST_EDGES[name]
        vals = arr[~np.isnan(arr)]
        counts, _ = np.histogram(vals, bins=edges)
        lines += [f"{name},{lo:.2f},{hi:.2f},{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return "\n".join(lines) + "\n"


def export_figures(rate_maps: Sequence[RateMap], scores: ScoreTable, path: str | Path,
                   scale: int = 8) -> list[Path]:
    """Write one PGM per map plus ``scores.csv`` and ``histogram.csv`` into ``path``."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {root}: {exc}") from exc
    written = []
    for m in rate_maps:
        f = root / f"{m.source}_{m.unit:04d}.pgm"
        f.write_bytes(pgm_bytes(map_image(m, scale)))
        written.append(f)
    for name, text in (("scores.csv", scores.to_csv()), ("histogram.csv", histogram_csv(scores))):
        (root / name).write_text(text)
        written.append(root / name)
    return written
