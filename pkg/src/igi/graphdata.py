"""Graph data model: labeled graph instances, hierarchical datasets,
train/test splits, and bit-exact dataset file I/O.

A dataset is a list of graphs plus a graph-level relation ("hierarchical
edges") connecting graphs that share users.  Node features and both
adjacency levels are dense float64.  Files are canonical JSON, so saving
the same dataset twice produces identical bytes.
"""

from __future__ import annotations

import numpy as np

from . import canonjson

CASES = ("original-nodes", "new-nodes", "new-graphs")


class DatasetError(Exception):
    """Invalid dataset content or structure."""


class SchemaError(DatasetError):
    """A dataset file violates the schema. ``pointer`` locates the offender."""

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        self.message = message
        super().__init__(f"{pointer or '/'}: {message}")


def _canon_edges(edges, n: int, what: str) -> tuple[tuple[int, int], ...]:
    """Normalize to sorted unique (i, j) pairs with i < j < n."""
    seen = set()
    for pair in edges:
        i, j = int(pair[0]), int(pair[1])
        if i == j:
            raise DatasetError(f"{what}: self-loop at index {i}")
        if i > j:
            i, j = j, i
        if not 0 <= i < j < n:
            raise DatasetError(f"{what}: edge ({i}, {j}) out of range for size {n}")
        if (i, j) in seen:
            raise DatasetError(f"{what}: duplicate edge ({i}, {j})")
        seen.add((i, j))
    return tuple(sorted(seen))


class GraphInstance:
    """One labeled graph: features, undirected simple edges, and per-node
    ground-truth classes that training never reads.

    Edges are stored once as (i, j) with i < j; ``adjacency`` expands them
    to a dense symmetric 0/1 matrix with zero diagonal.
    """

    __slots__ = ("y", "uids", "z", "x", "edges", "_adj")

    def __init__(self, y: int, uids, z, x, edges):
        self.y = int(y)
        self.uids = tuple(int(u) for u in uids)
        self.z = tuple(int(c) for c in z)
        self.x = np.ascontiguousarray(x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DatasetError(f"node features must be 2-D, got shape {self.x.shape}")
        m = self.x.shape[0]
        if m < 1:
            raise DatasetError("graph must have at least one node")
        if len(self.uids) != m or len(self.z) != m:
            raise DatasetError(
                f"node count mismatch: {m} feature rows, {len(self.uids)} uids, {len(self.z)} labels")
        if len(set(self.uids)) != m:
            raise DatasetError("duplicate uid within a graph")
        if not np.isfinite(self.x).all():
            raise DatasetError("node features contain non-finite entries")
        self.edges = _canon_edges(edges, m, "edges")
        self._adj = None

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency with zero diagonal (cached)."""
        if self._adj is None:
            m = self.num_nodes
            a = np.zeros((m, m))
            for i, j in self.edges:
                a[i, j] = 1.0
                a[j, i] = 1.0
            self._adj = a
        return self._adj

    def __eq__(self, other):
        if not isinstance(other, GraphInstance):
            return NotImplemented
        return (self.y == other.y and self.uids == other.uids and self.z == other.z
                and self.edges == other.edges and np.array_equal(self.x, other.x))

    def __repr__(self):
        return (f"GraphInstance(nodes={self.num_nodes}, edges={len(self.edges)}, "
                f"y={self.y})")


class HierDataset:
    """A collection of graph instances plus the graph-level relation.

    ``hier`` toggles whether the relation is used: with ``hier=False`` the
    stored graph-level edges are ignored and the effective relation is the
    identity (each graph related only to itself).
    """

    __slots__ = ("feature_dim", "class_count", "graphs", "hier_edges", "hier")

    def __init__(self, feature_dim: int, class_count: int, graphs,
                 hier_edges=(), hier: bool = True):
        self.feature_dim = int(feature_dim)
        self.class_count = int(class_count)
        self.graphs = tuple(graphs)
        self.hier = bool(hier)
        if self.feature_dim < 1:
            raise DatasetError("feature_dim must be >= 1")
        if self.class_count < 1:
            raise DatasetError("class_count must be >= 1")
        if not self.graphs:
            raise DatasetError("dataset must contain at least one graph")
        for n, g in enumerate(self.graphs):
            if g.x.shape[1] != self.feature_dim:
                raise DatasetError(
                    f"graph {n}: feature dimension {g.x.shape[1]} != dataset {self.feature_dim}")
            if not 0 <= g.y < self.class_count:
                raise DatasetError(f"graph {n}: label {g.y} out of range")
            for i, c in enumerate(g.z):
                if not 0 <= c < self.class_count:
                    raise DatasetError(f"graph {n}: node label {c} at index {i} out of range")
        self.hier_edges = _canon_edges(hier_edges, len(self.graphs), "hier_edges")

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    def hier_adjacency(self) -> np.ndarray:
        """Graph-level 0/1 adjacency, zero diagonal.

        All zeros when ``hier`` is off; consumers add the identity for
        self-relations.
        """
        n = self.num_graphs
        a = np.zeros((n, n))
        if self.hier:
            for i, j in self.hier_edges:
                a[i, j] = 1.0
                a[j, i] = 1.0
        return a

    def __eq__(self, other):
        if not isinstance(other, HierDataset):
            return NotImplemented
        return (self.feature_dim == other.feature_dim
                and self.class_count == other.class_count
                and self.hier == other.hier
                and self.hier_edges == other.hier_edges
                and self.graphs == other.graphs)

    def __repr__(self):
        return (f"HierDataset(graphs={self.num_graphs}, d={self.feature_dim}, "
                f"C={self.class_count}, hier={self.hier})")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _expect(cond: bool, pointer: str, message: str) -> None:
    if not cond:
        raise SchemaError(pointer, message)


def _expect_int(value, pointer: str) -> int:
    _expect(isinstance(value, int) and not isinstance(value, bool), pointer,
            f"expected integer, got {type(value).__name__}")
    return value


def _expect_keys(obj, pointer: str, keys: tuple) -> None:
    _expect(isinstance(obj, dict), pointer, f"expected object, got {type(obj).__name__}")
    missing = [k for k in keys if k not in obj]
    _expect(not missing, pointer, f"missing keys: {', '.join(missing)}")
    extra = [k for k in obj if k not in keys]
    _expect(not extra, pointer, f"unknown keys: {', '.join(sorted(extra))}")


def _parse_int_pairs(raw, pointer: str, size: int) -> list:
    _expect(isinstance(raw, list), pointer, "expected a list of index pairs")
    pairs = []
    for k, pair in enumerate(raw):
        p = f"{pointer}/{k}"
        _expect(isinstance(pair, list) and len(pair) == 2, p, "expected [i, j]")
        i, j = _expect_int(pair[0], f"{p}/0"), _expect_int(pair[1], f"{p}/1")
        _expect(i != j, p, "self-loop")
        _expect(0 <= i < size and 0 <= j < size, p, f"index out of range for size {size}")
        pairs.append((i, j))
    return pairs


def _parse_graph(raw, pointer: str, feature_dim: int, class_count: int) -> GraphInstance:
    _expect_keys(raw, pointer, ("y", "uids", "z", "x", "edges"))
    y = _expect_int(raw["y"], f"{pointer}/y")
    _expect(0 <= y < class_count, f"{pointer}/y", f"label {y} out of range")

    x_raw = raw["x"]
    _expect(isinstance(x_raw, list) and x_raw, f"{pointer}/x", "expected a non-empty list of rows")
    m = len(x_raw)
    for i, row in enumerate(x_raw):
        _expect(isinstance(row, list) and len(row) == feature_dim, f"{pointer}/x/{i}",
                f"expected a row of {feature_dim} numbers")
        for j, v in enumerate(row):
            _expect(isinstance(v, (int, float)) and not isinstance(v, bool),
                    f"{pointer}/x/{i}/{j}", "expected a number")
    x = np.asarray(x_raw, dtype=np.float64)
    _expect(bool(np.isfinite(x).all()), f"{pointer}/x", "non-finite feature value")

    uids_raw = raw["uids"]
    _expect(isinstance(uids_raw, list) and len(uids_raw) == m, f"{pointer}/uids",
            f"expected {m} uids")
    uids = [_expect_int(u, f"{pointer}/uids/{i}") for i, u in enumerate(uids_raw)]
    _expect(len(set(uids)) == m, f"{pointer}/uids", "duplicate uid")

    z_raw = raw["z"]
    _expect(isinstance(z_raw, list) and len(z_raw) == m, f"{pointer}/z",
            f"expected {m} node labels")
    z = []
    for i, c in enumerate(z_raw):
        c = _expect_int(c, f"{pointer}/z/{i}")
        _expect(0 <= c < class_count, f"{pointer}/z/{i}", f"node label {c} out of range")
        z.append(c)

    pairs = _parse_int_pairs(raw["edges"], f"{pointer}/edges", m)
    seen = set()
    for k, (i, j) in enumerate(pairs):
        _expect(i < j, f"{pointer}/edges/{k}", "edge must list the smaller index first")
        _expect((i, j) not in seen, f"{pointer}/edges/{k}", f"duplicate edge ({i}, {j})")
        seen.add((i, j))
    return GraphInstance(y=y, uids=uids, z=z, x=x, edges=pairs)


def dataset_to_obj(ds: HierDataset) -> dict:
    """Plain-JSON form of a dataset (the on-disk schema)."""
    return {
        "feature_dim": ds.feature_dim,
        "class_count": ds.class_count,
        "graphs": [
            {
                "y": g.y,
                "uids": list(g.uids),
                "z": list(g.z),
                "x": [[float(v) for v in row] for row in g.x],
                "edges": [[i, j] for i, j in g.edges],
            }
            for g in ds.graphs
        ],
        "hier_edges": [[i, j] for i, j in ds.hier_edges],
        "hier": ds.hier,
    }


def dataset_from_obj(raw) -> HierDataset:
    """Validate a parsed JSON object and build the dataset.

    Raises :class:`SchemaError` with a JSON pointer to the first offending
    element.
    """
    _expect_keys(raw, "", ("feature_dim", "class_count", "graphs", "hier_edges", "hier"))
    d = _expect_int(raw["feature_dim"], "/feature_dim")
    _expect(d >= 1, "/feature_dim", "must be >= 1")
    c = _expect_int(raw["class_count"], "/class_count")
    _expect(c >= 1, "/class_count", "must be >= 1")
    _expect(isinstance(raw["hier"], bool), "/hier", "expected true or false")
    graphs_raw = raw["graphs"]
    _expect(isinstance(graphs_raw, list) and graphs_raw, "/graphs",
            "expected a non-empty list of graphs")
    graphs = [_parse_graph(g, f"/graphs/{n}", d, c) for n, g in enumerate(graphs_raw)]
    pairs = _parse_int_pairs(raw["hier_edges"], "/hier_edges", len(graphs))
    seen = set()
    for k, (i, j) in enumerate(pairs):
        _expect(i < j, f"/hier_edges/{k}", "edge must list the smaller index first")
        _expect((i, j) not in seen, f"/hier_edges/{k}", f"duplicate edge ({i}, {j})")
        seen.add((i, j))
    return HierDataset(feature_dim=d, class_count=c, graphs=graphs,
                       hier_edges=pairs, hier=raw["hier"])


def save_dataset(ds: HierDataset, path) -> None:
    """Write ``ds`` to ``path`` as canonical JSON (byte-deterministic)."""
    canonjson.dump_path(dataset_to_obj(ds), path)


def load_dataset(path) -> HierDataset:
    """Load and validate a dataset file."""
    try:
        raw = canonjson.load_path(path)
    except ValueError as exc:
        raise SchemaError("", f"invalid JSON: {exc}") from exc
    return dataset_from_obj(raw)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


class SplitSpec:
    """A train/test partition for one evaluation case.

    ``held_nodes`` lists held-out node indices per graph (new-nodes case);
    ``held_graphs`` lists held-out graph indices (new-graphs case).  Both
    are empty for original-nodes, where training sees everything and
    evaluation covers every node.
    """

    __slots__ = ("case", "fraction", "seed", "held_nodes", "held_graphs")

    def __init__(self, case: str, fraction: float, seed: int, held_nodes, held_graphs):
        if case not in CASES:
            raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
        self.case = case
        self.fraction = float(fraction)
        self.seed = int(seed)
        self.held_nodes = tuple(tuple(int(i) for i in idx) for idx in held_nodes)
        self.held_graphs = tuple(int(i) for i in held_graphs)

    def __eq__(self, other):
        if not isinstance(other, SplitSpec):
            return NotImplemented
        return (self.case == other.case and self.fraction == other.fraction
                and self.seed == other.seed and self.held_nodes == other.held_nodes
                and self.held_graphs == other.held_graphs)

    def __repr__(self):
        return f"SplitSpec(case={self.case!r}, fraction={self.fraction}, seed={self.seed})"


def make_split(ds: HierDataset, case: str, fraction: float, seed: int) -> SplitSpec:
    """Draw a deterministic split for ``case``.

    new-nodes holds out ``floor(fraction * M_n)`` node indices per graph;
    new-graphs holds out ``floor(fraction * N)`` whole graphs.  Both draw
    without replacement from a generator keyed by (seed, case).
    """
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}; expected one of {CASES}")
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must be in [0, 1), got {fraction}")
    held_nodes: list = [() for _ in ds.graphs]
    held_graphs: tuple = ()
    if case == "new-nodes":
        rng = np.random.default_rng([int(seed), 1])
        held_nodes = []
        for g in ds.graphs:
            k = int(fraction * g.num_nodes)
            picks = rng.choice(g.num_nodes, size=k, replace=False) if k else []
            held_nodes.append(tuple(sorted(int(i) for i in picks)))
    elif case == "new-graphs":
        k = int(fraction * ds.num_graphs)
        if fraction > 0.0 and k < 1:
            raise ValueError(
                f"fraction {fraction} holds out zero of {ds.num_graphs} graphs")
        if k:
            rng = np.random.default_rng([int(seed), 2])
            picks = rng.choice(ds.num_graphs, size=k, replace=False)
            held_graphs = tuple(sorted(int(i) for i in picks))
    return SplitSpec(case, fraction, seed, held_nodes, held_graphs)


def _induced_subgraph(g: GraphInstance, keep) -> GraphInstance:
    keep = list(keep)
    pos = {old: new for new, old in enumerate(keep)}
    edges = [(pos[i], pos[j]) for i, j in g.edges if i in pos and j in pos]
    return GraphInstance(
        y=g.y,
        uids=[g.uids[i] for i in keep],
        z=[g.z[i] for i in keep],
        x=g.x[keep, :],
        edges=edges,
    )


def training_view(ds: HierDataset, split: SplitSpec) -> HierDataset:
    """The dataset as training sees it under ``split``.

    new-nodes: each graph becomes the induced subgraph on its training
    nodes.  new-graphs: held-out graphs are dropped and the graph-level
    edges restricted to the survivors.  original-nodes: unchanged.
    """
    if len(split.held_nodes) != ds.num_graphs:
        raise ValueError("split does not match dataset graph count")
    if split.case == "original-nodes":
        return ds
    if split.case == "new-nodes":
        graphs = []
        for g, held in zip(ds.graphs, split.held_nodes):
            held_set = set(held)
            if any(not 0 <= i < g.num_nodes for i in held_set):
                raise ValueError("held-out node index out of range")
            keep = [i for i in range(g.num_nodes) if i not in held_set]
            if not keep:
                raise ValueError("split holds out every node of a graph")
            graphs.append(_induced_subgraph(g, keep))
        return HierDataset(ds.feature_dim, ds.class_count, graphs,
                           ds.hier_edges, ds.hier)
    # new-graphs
    held = set(split.held_graphs)
    if any(not 0 <= i < ds.num_graphs for i in held):
        raise ValueError("held-out graph index out of range")
    keep = [i for i in range(ds.num_graphs) if i not in held]
    if not keep:
        raise ValueError("split holds out every graph")
    pos = {old: new for new, old in enumerate(keep)}
    hier_edges = [(pos[i], pos[j]) for i, j in ds.hier_edges if i in pos and j in pos]
    return HierDataset(ds.feature_dim, ds.class_count,
                       [ds.graphs[i] for i in keep], hier_edges, ds.hier)
