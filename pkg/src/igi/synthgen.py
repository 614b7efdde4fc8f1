"""Deterministic generator for the two-class synthetic benchmark.

Each class owns a pool of users with persistent features drawn from a
per-class Gaussian (per-dimension mean and std drawn once per class).
Every graph samples a majority group from one class and a minority group
from the other; class-0 groups are wired by preferential attachment,
class-1 groups by uniform random edges, and each minority node gains a
few edges into the majority.  Graphs sharing enough users are connected
at the graph level.

All randomness flows through streams keyed by (seed, purpose, index), so
the output is a pure function of the config and graphs could be produced
in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .graphdata import GraphInstance, HierDataset


class ConfigError(ValueError):
    """A generator config field is out of range."""


@dataclass(frozen=True)
class SynthConfig:
    """Benchmark knobs; defaults give 100 graphs of 100 nodes."""

    graphs_per_class: int = 50
    nodes_per_graph: int = 100
    minority_fraction: float = 0.2
    feature_dim: int = 16
    mean_range: tuple = (-5.0, 5.0)
    std_range: tuple = (1.0, 10.0)
    pool_size_per_class: int = 1000
    ba_m: int = 3
    er_p: float = 0.3
    cross_k: int = 2
    hier_threshold: int = 2
    seed: int = 0

    def __post_init__(self):
        def fail(msg):
            raise ConfigError(msg)

        if self.graphs_per_class < 1:
            fail("graphs_per_class must be >= 1")
        if self.nodes_per_graph < 1:
            fail("nodes_per_graph must be >= 1")
        if not 0.0 < self.minority_fraction < 0.5:
            fail("minority_fraction must lie in (0, 0.5)")
        if self.feature_dim < 1:
            fail("feature_dim must be >= 1")
        for name in ("mean_range", "std_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or not all(math.isfinite(v) for v in rng) or rng[0] > rng[1]:
                fail(f"{name} must be a finite (lo, hi) pair with lo <= hi")
        if self.std_range[0] <= 0.0:
            fail("std_range values must be positive")
        if self.pool_size_per_class < self.nodes_per_graph:
            fail("pool_size_per_class must be >= nodes_per_graph")
        if self.ba_m < 1:
            fail("ba_m must be >= 1")
        if not 0.0 < self.er_p <= 1.0:
            fail("er_p must lie in (0, 1]")
        if self.cross_k < 0:
            fail("cross_k must be >= 0")
        if self.hier_threshold < 1:
            fail("hier_threshold must be >= 1")
        if self.seed < 0:
            fail("seed must be a non-negative integer")
        object.__setattr__(self, "mean_range", (float(self.mean_range[0]), float(self.mean_range[1])))
        object.__setattr__(self, "std_range", (float(self.std_range[0]), float(self.std_range[1])))

    def to_obj(self) -> dict:
        obj = {}
        for f in fields(self):
            v = getattr(self, f.name)
            obj[f.name] = list(v) if isinstance(v, tuple) else v
        return obj

    @classmethod
    def from_obj(cls, raw: dict) -> "SynthConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(raw)
        for name in ("mean_range", "std_range"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


# Stream purposes: 0 = user pools (index = class), 1 = graph build (index = graph).
def _stream(seed: int, purpose: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, index)))


@dataclass(frozen=True)
class UserPool:
    """Persistent per-class users: uid row i of class c has features[c][i]."""

    uids: tuple          # per class: int array [pool_size]
    features: tuple      # per class: float array [pool_size, d]
    class_means: tuple   # per class: the drawn per-dimension mean vector
    class_stds: tuple    # per class: the drawn per-dimension std vector

    @property
    def num_classes(self) -> int:
        return len(self.uids)


def gen_user_pools(cfg: SynthConfig, rngs=None) -> UserPool:
    """Draw both class pools.

    Per class: per-dimension mean ~ U[mean_range] and std ~ U[std_range]
    drawn once, then each user's features i.i.d. Gaussian with those
    parameters.  Uids are globally unique (class c occupies a contiguous
    block).
    """
    if rngs is None:
        rngs = [_stream(cfg.seed, 0, c) for c in range(2)]
    uids, feats, means, stds = [], [], [], []
    size, d = cfg.pool_size_per_class, cfg.feature_dim
    for c, rng in enumerate(rngs):
        mean = rng.uniform(cfg.mean_range[0], cfg.mean_range[1], size=d)
        std = rng.uniform(cfg.std_range[0], cfg.std_range[1], size=d)
        feats.append(rng.normal(loc=mean, scale=std, size=(size, d)))
        uids.append(np.arange(c * size, (c + 1) * size))
        means.append(mean)
        stds.append(std)
    return UserPool(uids=tuple(uids), features=tuple(feats),
                    class_means=tuple(means), class_stds=tuple(stds))


def gen_ba_edges(n: int, m: int, rng: np.random.Generator) -> list:
    """Preferential attachment: seed clique of m+1, then each new node
    attaches to m distinct existing nodes with degree-proportional odds."""
    if m < 1:
        raise ValueError(f"attachment count must be >= 1, got {m}")
    if n <= m:
        raise ValueError(f"need more than {m} nodes for attachment {m}, got {n}")
    edges = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    # One entry per half-edge; sampling an index uniformly is sampling a
    # node with probability proportional to its degree.
    repeated = [v for i in range(m + 1) for v in (i,) * m]
    for source in range(m + 1, n):
        targets: set = set()
        while len(targets) < m:
            targets.add(repeated[rng.integers(len(repeated))])
        for t in sorted(targets):
            edges.append((t, source))
            repeated.append(t)
        repeated.extend([source] * m)
    return edges


def gen_er_edges(n: int, p: float, rng: np.random.Generator) -> list:
    """Uniform random graph: each unordered pair kept with probability p."""
    if n < 1:
        raise ValueError(f"need at least one node, got {n}")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"edge probability must lie in (0, 1], got {p}")
    rows, cols = np.triu_indices(n, k=1)
    keep = rng.random(rows.size) < p
    return [(int(i), int(j)) for i, j in zip(rows[keep], cols[keep])]


def _group_edges(size: int, user_class: int, cfg: SynthConfig,
                 rng: np.random.Generator) -> list:
    """Wire one same-class group: class 0 by attachment, class 1 uniformly.

    Attachment needs size > m; smaller class-0 groups fall back to the
    complete graph (the seed clique, truncated).
    """
    if size <= 1:
        return []
    if user_class == 0:
        if size > cfg.ba_m:
            return gen_ba_edges(size, cfg.ba_m, rng)
        return [(i, j) for i in range(size) for j in range(i + 1, size)]
    return gen_er_edges(size, cfg.er_p, rng)


def gen_graph_instance(cfg: SynthConfig, pools: UserPool, majority_class: int,
                       rng: np.random.Generator) -> GraphInstance:
    """Build one graph: majority group from ``majority_class``, minority
    from the other class, each wired by its own class's generator, plus
    cross edges from every minority node into the majority."""
    if majority_class not in (0, 1):
        raise ValueError(f"majority_class must be 0 or 1, got {majority_class}")
    nodes = cfg.nodes_per_graph
    n_major = math.ceil((1.0 - cfg.minority_fraction) * nodes - 1e-9)
    n_minor = nodes - n_major
    minority_class = 1 - majority_class

    picks_major = rng.choice(cfg.pool_size_per_class, size=n_major, replace=False)
    picks_minor = rng.choice(cfg.pool_size_per_class, size=n_minor, replace=False)

    uids = np.concatenate([pools.uids[majority_class][picks_major],
                           pools.uids[minority_class][picks_minor]])
    x = np.vstack([pools.features[majority_class][picks_major],
                   pools.features[minority_class][picks_minor]])
    z = [majority_class] * n_major + [minority_class] * n_minor

    edges = list(_group_edges(n_major, majority_class, cfg, rng))
    edges += [(n_major + i, n_major + j)
              for i, j in _group_edges(n_minor, minority_class, cfg, rng)]
    k = min(cfg.cross_k, n_major)
    for v in range(n_minor):
        for t in rng.choice(n_major, size=k, replace=False):
            edges.append((int(t), n_major + v))

    return GraphInstance(y=majority_class, uids=uids, z=z, x=x, edges=edges)


def hier_edges_from_uids(uid_sets, threshold: int) -> list:
    """Graph pairs sharing at least ``threshold`` users (brute force)."""
    sets = [set(u) for u in uid_sets]
    out = []
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if len(sets[i] & sets[j]) >= threshold:
                out.append((i, j))
    return out


def gen_dataset(cfg: SynthConfig, hier: bool = True) -> HierDataset:
    """Generate the full benchmark: equal graphs per class, then connect
    graphs sharing at least ``hier_threshold`` users.

    With ``hier=False`` the graph-level relation is omitted entirely (the
    effective relation is the identity).
    """
    pools = gen_user_pools(cfg)
    total = 2 * cfg.graphs_per_class
    graphs = [
        gen_graph_instance(cfg, pools, majority_class=0 if n < cfg.graphs_per_class else 1,
                           rng=_stream(cfg.seed, 1, n))
        for n in range(total)
    ]
    hier_edges = hier_edges_from_uids([g.uids for g in graphs], cfg.hier_threshold) if hier else []
    return HierDataset(feature_dim=cfg.feature_dim, class_count=2, graphs=graphs,
                       hier_edges=hier_edges, hier=hier)
