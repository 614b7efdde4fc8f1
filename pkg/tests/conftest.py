"""Shared test helpers."""

import numpy as np

from igi.graphdata import GraphInstance, HierDataset


def make_random_dataset(seed=0, n_graphs=6, nodes=8, d=4, classes=2, hier=True):
    """A small structurally valid dataset with shared uids across graphs."""
    r = np.random.default_rng(seed)
    pool = int(nodes * 2.5)
    graphs = []
    for n in range(n_graphs):
        uids = r.choice(pool, size=nodes, replace=False)
        edges = set()
        for _ in range(nodes * 2):
            i, j = r.integers(0, nodes, size=2)
            if i != j:
                edges.add((min(int(i), int(j)), max(int(i), int(j))))
        graphs.append(GraphInstance(
            y=int(n % classes),
            uids=uids,
            z=r.integers(0, classes, size=nodes),
            x=r.normal(size=(nodes, d)),
            edges=sorted(edges),
        ))
    hier_edges = set()
    for _ in range(n_graphs):
        i, j = r.integers(0, n_graphs, size=2)
        if i != j:
            hier_edges.add((min(int(i), int(j)), max(int(i), int(j))))
    return HierDataset(feature_dim=d, class_count=classes, graphs=graphs,
                       hier_edges=sorted(hier_edges), hier=hier)
