"""Node inference, clustering metrics, and the baseline families.

Inference assigns each node the class whose mixture mean is closest in
cosine similarity to the node's projected representation.  The metric
set (NMI, ARI, mapped accuracy, macro F1, precision at n) and the three
baselines (k-means and EM-GMM on raw pooled features, single-instance
labeling via logistic regression) are all implemented directly so every
number in a results table is reproducible from this file alone.

Label conventions: class 1 is the abnormal class throughout.  Methods
whose cluster ids carry no class identity (k-means, EM, the two-head
pooling ablation) get their abnormal cluster chosen by the best
accuracy mapping on the evaluated nodes, the usual cluster-to-class
protocol; the mixture model and the logistic baseline carry class
identity intrinsically.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .diffengine import Tape
from .graphdata import HierDataset, SplitSpec, training_view
from .model import ModelConfig, build_forward

ABNORMAL_CLASS = 1


class MetricError(ValueError):
    """Metric inputs are malformed (length mismatch, empty, bad n)."""


# ---------------------------------------------------------------------------
# Evaluation scope and assignments
# ---------------------------------------------------------------------------


def eval_scope(ds: HierDataset, split: SplitSpec) -> tuple:
    """Node ids to evaluate, per graph, under ``split``.

    original-nodes covers every node; new-nodes covers each graph's
    held-out nodes; new-graphs covers every node of held-out graphs
    (other graphs contribute an empty tuple).
    """
    if len(split.held_nodes) != ds.num_graphs:
        raise ValueError("split does not match dataset graph count")
    if split.case == "original-nodes":
        return tuple(tuple(range(g.num_nodes)) for g in ds.graphs)
    if split.case == "new-nodes":
        return split.held_nodes
    held = set(split.held_graphs)
    return tuple(tuple(range(g.num_nodes)) if i in held else ()
                 for i, g in enumerate(ds.graphs))


@dataclass(frozen=True)
class NodeAssignment:
    """Predicted labels for the in-scope nodes of each graph.

    ``graph_nodes[g]`` lists the node ids covered in graph ``g`` and
    ``labels[g]`` the matching predictions.  The flattened view runs
    through graphs in order, nodes in listed order.
    """

    graph_nodes: tuple
    labels: tuple

    def __post_init__(self):
        if len(self.graph_nodes) != len(self.labels):
            raise ValueError("graph_nodes and labels lengths differ")
        for nodes, labs in zip(self.graph_nodes, self.labels):
            if len(nodes) != len(labs):
                raise ValueError("per-graph node and label counts differ")
            if any(int(v) < 0 for v in labs):
                raise ValueError("labels must be non-negative")

    def keys(self) -> tuple:
        """Flattened (graph-index, node-index) pairs."""
        return tuple((g, i) for g, nodes in enumerate(self.graph_nodes)
                     for i in nodes)

    def flat(self) -> np.ndarray:
        """Flattened label vector matching :meth:`keys` order."""
        return np.asarray([v for labs in self.labels for v in labs], dtype=int)


def true_labels(ds: HierDataset, scope) -> tuple:
    """Ground-truth node labels per graph, restricted to ``scope``."""
    return tuple(tuple(int(ds.graphs[g].z[i]) for i in nodes)
                 for g, nodes in enumerate(scope))


def _flat_offsets(ds: HierDataset) -> np.ndarray:
    sizes = [g.num_nodes for g in ds.graphs]
    return np.concatenate([[0], np.cumsum(sizes)])


def _scoped_assignment(ds, scope, flat_pred) -> NodeAssignment:
    off = _flat_offsets(ds)
    labels = tuple(tuple(int(flat_pred[off[g] + i]) for i in nodes)
                   for g, nodes in enumerate(scope))
    return NodeAssignment(graph_nodes=tuple(tuple(n) for n in scope), labels=labels)


def _scoped_scores(ds, scope, flat_scores) -> tuple:
    off = _flat_offsets(ds)
    return tuple(np.asarray([float(flat_scores[off[g] + i]) for i in nodes])
                 for g, nodes in enumerate(scope))


# ---------------------------------------------------------------------------
# Model-based inference
# ---------------------------------------------------------------------------


def cosine_to_refs(rows: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Cosine of every row against every reference row; zero-norm rows
    or references give cosine 0 by convention."""
    rows = np.asarray(rows, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    rn = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    mn = np.sqrt((refs * refs).sum(axis=1, keepdims=True))
    cos = rows @ refs.T
    cos /= np.where(rn > 0.0, rn, 1.0)
    cos /= np.where(mn > 0.0, mn, 1.0).T
    cos *= rn > 0.0
    cos *= (mn > 0.0).T
    return cos


def assign_by_cosine(rows: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """argmax-cosine labels, ties and all-zero rows resolved to the
    smallest class index."""
    return cosine_to_refs(rows, refs).argmax(axis=1)


@dataclass(frozen=True)
class NodeOutputs:
    """Per-node tensors from one full forward pass, in dataset order."""

    embed: np.ndarray            # [total x gml_dim] projected representations
    pool: np.ndarray             # [total x r] pooling attention per head
    cosines: np.ndarray | None   # [total x C] cosine to each mean (mixture only)


def node_outputs(ds: HierDataset, params: dict, cfg: ModelConfig) -> NodeOutputs:
    """Run the model over the full dataset and collect node tensors."""
    tape = Tape()
    fwd = build_forward(tape, ds, cfg, params, trainable=False)
    embed = np.asarray(fwd.node_embed.value, dtype=np.float64)
    pool = np.asarray(fwd.node_pool.value, dtype=np.float64)
    cosines = None
    if cfg.variant == "gmgcn":
        means = np.asarray(fwd.params["gml.means"].value, dtype=np.float64)
        cosines = cosine_to_refs(embed, means)
    return NodeOutputs(embed=embed, pool=pool, cosines=cosines)


def infer_nodes(ds: HierDataset, params: dict, cfg: ModelConfig,
                split: SplitSpec) -> NodeAssignment:
    """Predict in-scope node labels from a trained model.

    The forward pass always runs on the full dataset (whole graphs in
    the new-nodes case, every graph in the new-graphs case); the mixture
    variant assigns by cosine against the class means, the two-head
    ablation by its larger pooling score.
    """
    out = node_outputs(ds, params, cfg)
    if out.cosines is not None:
        flat = out.cosines.argmax(axis=1)
    else:
        flat = out.pool.argmax(axis=1)
    return _scoped_assignment(ds, eval_scope(ds, split), flat)


def model_scores(ds: HierDataset, params: dict, cfg: ModelConfig,
                 split: SplitSpec) -> tuple:
    """Per-graph anomaly scores for the in-scope nodes.

    Mixture variant: cosine to the abnormal-class mean.  Two-head
    ablation: the pooling score of whichever head best maps to the
    abnormal class on the evaluated nodes.
    """
    out = node_outputs(ds, params, cfg)
    scope = eval_scope(ds, split)
    if out.cosines is not None:
        flat = out.cosines[:, ABNORMAL_CLASS]
        return _scoped_scores(ds, scope, flat)
    pred = _scoped_assignment(ds, scope, out.pool.argmax(axis=1))
    z = np.asarray([v for labs in true_labels(ds, scope) for v in labs], dtype=int)
    head = mapped_abnormal_cluster(z, pred.flat(), out.pool.shape[1])
    return _scoped_scores(ds, scope, out.pool[:, head])


# ---------------------------------------------------------------------------
# Partition metrics
# ---------------------------------------------------------------------------


def _paired(z, zh):
    z = np.asarray(list(z), dtype=int)
    zh = np.asarray(list(zh), dtype=int)
    if z.ndim != 1 or zh.ndim != 1 or z.shape != zh.shape:
        raise MetricError(f"label vectors must be 1-D and equal length, "
                          f"got {z.shape} and {zh.shape}")
    if z.size == 0:
        raise MetricError("label vectors are empty")
    return z, zh


def _contingency(z, zh) -> np.ndarray:
    _, zi = np.unique(z, return_inverse=True)
    _, hi = np.unique(zh, return_inverse=True)
    table = np.zeros((zi.max() + 1, hi.max() + 1))
    np.add.at(table, (zi, hi), 1.0)
    return table


def nmi(z, zh) -> float:
    """Normalized mutual information with natural logs and geometric
    normalization; 1 when both partitions are identical single clusters,
    0 when exactly one side has zero entropy."""
    z, zh = _paired(z, zh)
    table = _contingency(z, zh)
    n = table.sum()
    pi = table.sum(axis=1) / n
    pj = table.sum(axis=0) / n
    hz = -np.sum(pi[pi > 0] * np.log(pi[pi > 0]))
    hh = -np.sum(pj[pj > 0] * np.log(pj[pj > 0]))
    if hz == 0.0 or hh == 0.0:
        return 1.0 if hz == hh else 0.0
    pij = table / n
    mask = pij > 0
    outer = np.outer(pi, pj)
    info = np.sum(pij[mask] * np.log(pij[mask] / outer[mask]))
    return float(min(1.0, max(0.0, info / np.sqrt(hz * hh))))


def ari(z, zh) -> float:
    """Adjusted Rand index by pair counting; degenerate agreement
    (zero denominator) is 1 by convention."""
    z, zh = _paired(z, zh)
    if z.size < 2:
        return 1.0
    table = _contingency(z, zh)

    def comb2(x):
        return (x * (x - 1.0) / 2.0).sum()

    sum_ij = comb2(table)
    a = comb2(table.sum(axis=1))
    b = comb2(table.sum(axis=0))
    total = z.size * (z.size - 1.0) / 2.0
    expected = a * b / total
    denom = 0.5 * (a + b) - expected
    if denom == 0.0:
        return 1.0
    return float((sum_ij - expected) / denom)


def _macro_f1(z, mapped) -> float:
    classes = sorted(set(int(v) for v in z) | set(int(v) for v in mapped))
    scores = []
    for c in classes:
        tp = int(np.sum((mapped == c) & (z == c)))
        fp = int(np.sum((mapped == c) & (z != c)))
        fn = int(np.sum((mapped != c) & (z == c)))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def mapped_metrics(z, zh) -> tuple:
    """(accuracy, macro F1) under the cluster-to-class bijection that
    maximizes accuracy; exhaustive over label permutations (fine for the
    class counts used here), first maximizer wins ties."""
    z, zh = _paired(z, zh)
    c = int(max(z.max(), zh.max())) + 1
    if c > 8:
        raise MetricError(f"exhaustive mapping supports at most 8 classes, got {c}")
    best_acc, best_perm = -1.0, None
    for perm in itertools.permutations(range(c)):
        acc = float(np.mean(np.take(perm, zh) == z))
        if acc > best_acc:
            best_acc, best_perm = acc, perm
    mapped = np.take(best_perm, zh)
    return best_acc, _macro_f1(z, mapped)


def mapped_abnormal_cluster(z, zh, n_clusters: int) -> int:
    """The predicted cluster id that the accuracy-optimal mapping sends
    to the abnormal class."""
    z, zh = _paired(z, zh)
    c = max(int(n_clusters), int(max(z.max(), zh.max())) + 1)
    if c > 8:
        raise MetricError(f"exhaustive mapping supports at most 8 classes, got {c}")
    best_acc, best_perm = -1.0, None
    for perm in itertools.permutations(range(c)):
        acc = float(np.mean(np.take(perm, zh) == z))
        if acc > best_acc:
            best_acc, best_perm = acc, perm
    return best_perm.index(ABNORMAL_CLASS)


def precision_at_n(scores, z, n=None, abnormal: int = ABNORMAL_CLASS) -> float:
    """Mean over graphs of the abnormal fraction among each graph's n
    top-scored nodes.

    ``scores`` and ``z`` are per-graph sequences; ``n`` defaults to each
    graph's true abnormal count.  Graphs with nothing in scope, or a
    default n of zero, are skipped; an explicit n below 1 is an error.
    Score ties rank by node order.
    """
    if len(scores) != len(z):
        raise MetricError("scores and labels disagree on graph count")
    explicit = n is not None
    if explicit and len(n) != len(z):
        raise MetricError("n must give one count per graph")
    per_graph = []
    for g, (s_g, z_g) in enumerate(zip(scores, z)):
        s_g = np.asarray(list(s_g), dtype=float)
        z_g = np.asarray(list(z_g), dtype=int)
        if s_g.shape != z_g.shape:
            raise MetricError(f"graph {g}: score and label lengths differ")
        n_g = int(n[g]) if explicit else int(np.sum(z_g == abnormal))
        if explicit and n_g < 1:
            raise MetricError(f"graph {g}: n must be >= 1, got {n_g}")
        if z_g.size == 0 or n_g == 0:
            continue
        if n_g > z_g.size:
            raise MetricError(f"graph {g}: n={n_g} exceeds {z_g.size} nodes")
        top = np.argsort(-s_g, kind="stable")[:n_g]
        per_graph.append(float(np.sum(z_g[top] == abnormal)) / n_g)
    if not per_graph:
        raise MetricError("no graph has abnormal nodes in scope")
    return float(np.mean(per_graph))


@dataclass(frozen=True)
class MetricReport:
    """The five node-clustering metrics for one run, unscaled."""

    nmi: float
    ari: float
    acc: float
    f1: float
    pre: float

    def scaled(self) -> dict:
        """Metric name -> value on the conventional x100 scale."""
        return {k: 100.0 * getattr(self, k) for k in ("nmi", "ari", "acc", "f1", "pre")}


def evaluate(ds: HierDataset, split: SplitSpec, assignment: NodeAssignment,
             scores) -> MetricReport:
    """Score an assignment (plus per-graph anomaly scores) against the
    ground truth of the split's evaluation scope."""
    scope = eval_scope(ds, split)
    truth = true_labels(ds, scope)
    if assignment.graph_nodes != tuple(tuple(n) for n in scope):
        raise MetricError("assignment does not cover the evaluation scope")
    z = np.asarray([v for labs in truth for v in labs], dtype=int)
    zh = assignment.flat()
    acc, f1 = mapped_metrics(z, zh)
    return MetricReport(nmi=nmi(z, zh), ari=ari(z, zh), acc=acc, f1=f1,
                        pre=precision_at_n(scores, truth))


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: tuple   # per-iteration trace, non-increasing


def _sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


def kmeans(x, k: int, seed: int, max_iter: int = 300) -> KMeansResult:
    """Plain Lloyd iterations from a k-means++ start.

    Stops at an assignment fixpoint or ``max_iter``; a cluster left
    empty by an assignment is reseeded to the point farthest from its
    current center before the update step, which keeps the recorded
    inertia trace non-increasing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    rng = np.random.default_rng([int(seed), 0x6B6D])

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    for j in range(1, k):
        d2 = _sq_dists(x, centers[:j]).min(axis=1)
        total = d2.sum()
        if total > 0.0:
            centers[j] = x[rng.choice(n, p=d2 / total)]
        else:
            centers[j] = x[rng.integers(n)]

    labels = None
    trace = []
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        new = d2.argmin(axis=1)
        for j in range(k):
            if not np.any(new == j):
                worst = int(np.argmax(d2[np.arange(n), new]))
                centers[j] = x[worst]
                d2[:, j] = ((x - centers[j]) ** 2).sum(axis=1)
                new = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    return KMeansResult(labels=labels, centers=centers, inertia=tuple(trace))


# ---------------------------------------------------------------------------
# EM for a diagonal-covariance Gaussian mixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmResult:
    labels: np.ndarray
    means: np.ndarray
    covs: np.ndarray     # diagonal entries, floored
    weights: np.ndarray
    loglik: tuple        # per-iteration trace, non-decreasing


def _gmm_log_prob(x, means, covs, weights):
    diff = x[:, None, :] - means[None, :, :]
    quad = (diff * diff / covs[None, :, :]).sum(axis=2)
    logdet = np.log(covs).sum(axis=1)
    d = x.shape[1]
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw[None, :] - 0.5 * (quad + logdet[None, :] + d * np.log(2.0 * np.pi))


def em_gmm(x, k: int, seed: int, max_iter: int = 200, tol: float = 1e-7,
           cov_floor: float = 1e-6) -> EmResult:
    """Diagonal-covariance EM initialized from k-means.

    Covariances are floored, which projects the M step onto the feasible
    family and preserves monotonicity of the log-likelihood trace.
    Components that lose all responsibility keep their parameters at
    weight ~0 (an all-identical input collapses to a single effective
    component this way).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")

    km = kmeans(x, k, seed)
    means = km.centers.copy()
    covs = np.empty((k, d))
    weights = np.empty(k)
    global_var = np.maximum(x.var(axis=0), cov_floor)
    for j in range(k):
        members = x[km.labels == j]
        weights[j] = members.shape[0] / n
        covs[j] = np.maximum(members.var(axis=0), cov_floor) if members.shape[0] \
            else global_var

    trace = []
    for _ in range(max_iter):
        log_prob = _gmm_log_prob(x, means, covs, weights)
        norm = logsumexp(log_prob, axis=1)
        ll = float(norm.sum())
        converged = bool(trace) and ll - trace[-1] < tol
        trace.append(ll)
        if converged:
            break
        resp = np.exp(log_prob - norm[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        for j in range(k):
            if nk[j] < 1e-12:
                continue  # dead component: parameters frozen at weight ~0
            means[j] = resp[:, j] @ x / nk[j]
            diff = x - means[j]
            covs[j] = np.maximum(resp[:, j] @ (diff * diff) / nk[j], cov_floor)
    # Row-wise argmax of the log joint equals argmax responsibility and is
    # consistent with the returned parameters on either exit path.
    labels = _gmm_log_prob(x, means, covs, weights).argmax(axis=1)
    return EmResult(labels=labels, means=means, covs=covs, weights=weights,
                    loglik=tuple(trace))


# ---------------------------------------------------------------------------
# Baseline runners
# ---------------------------------------------------------------------------


def _pooled_features(ds: HierDataset) -> np.ndarray:
    return np.vstack([g.x for g in ds.graphs])


def kmeans_baseline(ds: HierDataset, split: SplitSpec, seed: int):
    """Cluster raw features of every node, ignoring structure and the
    split; returns (assignment, per-graph anomaly scores) on the
    evaluation scope.  Scores are negated distances to the cluster that
    maps to the abnormal class."""
    res = kmeans(_pooled_features(ds), ds.class_count, seed)
    scope = eval_scope(ds, split)
    pred = _scoped_assignment(ds, scope, res.labels)
    z = np.asarray([v for labs in true_labels(ds, scope) for v in labs], dtype=int)
    cluster = mapped_abnormal_cluster(z, pred.flat(), ds.class_count)
    flat_scores = -((_pooled_features(ds) - res.centers[cluster]) ** 2).sum(axis=1)
    return pred, _scoped_scores(ds, scope, flat_scores)


def em_baseline(ds: HierDataset, split: SplitSpec, seed: int):
    """EM-GMM on raw pooled features; scores are responsibilities of the
    component that maps to the abnormal class."""
    x = _pooled_features(ds)
    res = em_gmm(x, ds.class_count, seed)
    scope = eval_scope(ds, split)
    pred = _scoped_assignment(ds, scope, res.labels)
    z = np.asarray([v for labs in true_labels(ds, scope) for v in labs], dtype=int)
    comp = mapped_abnormal_cluster(z, pred.flat(), ds.class_count)
    log_prob = _gmm_log_prob(x, res.means, res.covs, res.weights)
    resp = np.exp(log_prob - logsumexp(log_prob, axis=1)[:, None])
    return pred, _scoped_scores(ds, scope, resp[:, comp])


def sil_baseline(ds: HierDataset, split: SplitSpec, seed: int = 0,
                 steps: int = 500, lr: float = 0.1):
    """Single-instance labeling: every training node inherits its
    graph's label, a softmax regression fits those pseudo-labels on raw
    features, and in-scope nodes take the fitted argmax.

    Zero initialization makes the fit deterministic; ``seed`` is
    accepted for interface uniformity.  Returns (assignment, per-graph
    abnormal-class probabilities).
    """
    del seed
    view = training_view(ds, split)
    x = _pooled_features(view)
    c = ds.class_count
    onehot = np.zeros((x.shape[0], c))
    row = 0
    for g in view.graphs:
        onehot[row:row + g.num_nodes, g.y] = 1.0
        row += g.num_nodes

    w = np.zeros((x.shape[1], c))
    b = np.zeros(c)
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / x.shape[0]
        w -= lr * (x.T @ err)
        b -= lr * err.sum(axis=0)

    x_all = _pooled_features(ds)
    logits = x_all @ w + b
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    scope = eval_scope(ds, split)
    pred = _scoped_assignment(ds, scope, logits.argmax(axis=1))
    return pred, _scoped_scores(ds, scope, p[:, ABNORMAL_CLASS])
