"""Model tests against straight-line reference implementations.

Every reference below recomputes the layer from the written formulas
with plain loops/numpy, independent of the tape engine.
"""

import math

import numpy as np
import pytest

from igi.diffengine import Tape
from igi.graphdata import GraphInstance, HierDataset
from igi.model import (ModelConfig, attn_pool, build_forward, gat_head, gat_layer,
                       gml_forward, hier_matrix, hiergcn_forward, init_params,
                       load_checkpoint, mixture_weights, param_shapes,
                       save_checkpoint, set_params, variant_config)


def rng(seed):
    return np.random.default_rng(seed)


def elu_ref(x):
    return np.where(x > 0, x, np.exp(np.minimum(x, 0)) - 1.0)


def ref_gat_head(x, adj, w, a_src, a_dst, slope):
    m = x.shape[0]
    p = x @ w
    mask = adj + np.eye(m)
    e = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            s = float(p[i] @ a_src[:, 0]) + float(p[j] @ a_dst[:, 0])
            e[i, j] = s if s > 0 else slope * s
    alpha = np.zeros((m, m))
    for i in range(m):
        nbrs = [j for j in range(m) if mask[i, j] != 0]
        mx = max(e[i, j] for j in nbrs)
        exps = {j: math.exp(e[i, j] - mx) for j in nbrs}
        z = sum(exps.values())
        for j in nbrs:
            alpha[i, j] = exps[j] / z
    return elu_ref(alpha @ p), alpha


def ref_mixture(v, means, logvars):
    m, d = v.shape
    c = means.shape[0]
    w = np.empty((m, c))
    for n in range(m):
        for k in range(c):
            q = sum((v[n, j] - means[k, j]) ** 2 / math.exp(logvars[k, j])
                    for j in range(d))
            w[n, k] = math.exp(-0.5 * q)
    return w


def ref_pool(hp, w1, w2):
    pre = np.tanh(hp @ w1) @ w2                     # [M x r]
    e = np.exp(pre - pre.max(axis=0, keepdims=True))
    scores = (e / e.sum(axis=0, keepdims=True)).T   # [r x M]
    return scores @ hp, scores


def ref_hier(pooled, a_hier, hier_w, cls_w, row_norm=True):
    a = a_hier + np.eye(pooled.shape[0])
    if row_norm:
        a = a / a.sum(axis=1, keepdims=True)
    h_hat = np.maximum(a @ pooled @ hier_w, 0.0)
    return np.concatenate([pooled, h_hat], axis=1) @ cls_w


def toy_dataset(seed=0, n_graphs=2, nodes=5, d=3):
    r = rng(seed)
    graphs = []
    for n in range(n_graphs):
        edges = [(i, i + 1) for i in range(nodes - 1)]
        graphs.append(GraphInstance(
            y=n % 2,
            uids=1000 * n + np.arange(nodes),
            z=r.integers(0, 2, size=nodes),
            x=r.normal(size=(nodes, d)),
            edges=edges,
        ))
    hier_edges = [(i, i + 1) for i in range(n_graphs - 1)]
    return HierDataset(feature_dim=d, class_count=2, graphs=graphs,
                       hier_edges=hier_edges, hier=True)


# ---------------------------------------------------------------------------
# Attention layer
# ---------------------------------------------------------------------------


def head_params(r, d_in, d_out):
    return (r.normal(size=(d_in, d_out)), r.normal(size=(d_out, 1)),
            r.normal(size=(d_out, 1)))


def test_gat_head_matches_reference():
    r = rng(0)
    m, d_in, d_out = 4, 3, 5
    x = r.normal(size=(m, d_in))
    adj = np.zeros((m, m))
    for i, j in [(0, 1), (1, 2), (0, 3)]:
        adj[i, j] = adj[j, i] = 1.0
    w, a_src, a_dst = head_params(r, d_in, d_out)
    tape = Tape()
    out, alpha = gat_head(tape, tape.leaf(x), tape.leaf(adj + np.eye(m)),
                          tape.leaf(w), tape.leaf(a_src), tape.leaf(a_dst), 0.2)
    ref_out, ref_alpha = ref_gat_head(x, adj, w, a_src, a_dst, 0.2)
    np.testing.assert_allclose(alpha.value, ref_alpha, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.value, ref_out, rtol=0, atol=1e-12)


def test_gat_isolated_node_is_self_attention():
    r = rng(1)
    x = r.normal(size=(1, 3))
    w, a_src, a_dst = head_params(r, 3, 4)
    tape = Tape()
    out, alpha = gat_head(tape, tape.leaf(x), tape.leaf(np.eye(1)),
                          tape.leaf(w), tape.leaf(a_src), tape.leaf(a_dst), 0.2)
    assert np.array_equal(alpha.value, [[1.0]])
    np.testing.assert_allclose(out.value, elu_ref(x @ w), rtol=0, atol=1e-15)


def test_gat_identical_neighbors_split_attention_evenly():
    r = rng(2)
    row = r.normal(size=3)
    x = np.vstack([row, row])
    adj = np.array([[0.0, 1.0], [1.0, 0.0]])
    w, a_src, a_dst = head_params(r, 3, 4)
    tape = Tape()
    _, alpha = gat_head(tape, tape.leaf(x), tape.leaf(adj + np.eye(2)),
                        tape.leaf(w), tape.leaf(a_src), tape.leaf(a_dst), 0.2)
    np.testing.assert_allclose(alpha.value, [[0.5, 0.5], [0.5, 0.5]],
                               rtol=0, atol=1e-12)


def test_gat_layer_concat_and_average():
    r = rng(3)
    m = 4
    x = r.normal(size=(m, 3))
    mask = np.eye(m)
    mask[0, 1] = mask[1, 0] = 1.0
    heads = [head_params(r, 3, 5), head_params(r, 3, 5)]
    tape = Tape()
    xl, ml = tape.leaf(x), tape.leaf(mask)
    hn = [(tape.leaf(w), tape.leaf(s), tape.leaf(t)) for w, s, t in heads]
    cat, alphas = gat_layer(tape, xl, ml, hn, 0.2, final=False)
    avg, _ = gat_layer(tape, xl, ml, hn, 0.2, final=True)
    singles = [gat_head(tape, xl, ml, *h, 0.2)[0].value for h in hn]
    assert cat.value.shape == (m, 10)
    np.testing.assert_allclose(cat.value, np.concatenate(singles, axis=1),
                               rtol=0, atol=0)
    np.testing.assert_allclose(avg.value, (singles[0] + singles[1]) / 2.0,
                               rtol=0, atol=1e-15)
    assert len(alphas) == 2
    for a in alphas:
        assert np.all(np.abs(a.value.sum(axis=1) - 1.0) <= 1e-12)


def test_gat_stack_zero_in_zero_out():
    m = 3
    tape = Tape()
    x = tape.leaf(np.zeros((m, 4)))
    mask = tape.leaf(np.ones((m, m)))
    h1, _ = gat_layer(tape, x, mask, [(tape.leaf(np.zeros((4, 5))),
                                       tape.leaf(np.zeros((5, 1))),
                                       tape.leaf(np.zeros((5, 1))))], 0.2)
    h2, _ = gat_layer(tape, h1, mask, [(tape.leaf(np.zeros((5, 6))),
                                        tape.leaf(np.zeros((6, 1))),
                                        tape.leaf(np.zeros((6, 1))))], 0.2, final=True)
    assert np.array_equal(h2.value, np.zeros((m, 6)))


# ---------------------------------------------------------------------------
# Mixture gate
# ---------------------------------------------------------------------------


def test_mixture_weight_is_one_at_the_mean():
    r = rng(4)
    means = r.normal(size=(3, 6))
    logvars = r.normal(size=(3, 6))
    v = np.vstack([means[1], means[2] + 10.0])
    tape = Tape()
    w = mixture_weights(tape, tape.leaf(v), tape.leaf(means), tape.leaf(logvars))
    assert w.value[0, 1] == 1.0  # exact: squared distance is exactly zero
    assert w.value[1, 2] < 1.0


def test_mixture_single_component_hand_value():
    # distance^2 = 2 with unit variance: w = exp(-1), gated row = exp(-1) * v
    tape = Tape()
    proj = tape.leaf(np.eye(2))
    h = tape.leaf(np.array([[1.0, 1.0]]))
    means = tape.leaf(np.zeros((1, 2)))
    logvars = tape.leaf(np.zeros((1, 2)))
    v, hp, w = gml_forward(tape, h, proj, means, logvars)
    expect = math.exp(-1.0)
    assert w.value[0, 0] == pytest.approx(expect, abs=1e-15)
    np.testing.assert_allclose(hp.value, [[expect, expect]], rtol=0, atol=1e-15)


def test_mixture_flat_limit_passes_through():
    r = rng(5)
    h = r.normal(size=(4, 3))
    tape = Tape()
    v, hp, w = gml_forward(tape, tape.leaf(h), tape.leaf(np.eye(3)),
                           tape.leaf(r.normal(size=(2, 3))),
                           tape.leaf(np.full((2, 3), 60.0)))
    np.testing.assert_allclose(w.value, np.ones((4, 2)), rtol=0, atol=1e-8)
    np.testing.assert_allclose(hp.value, h, rtol=1e-8, atol=1e-8)


def test_mixture_matches_reference():
    r = rng(6)
    v = r.normal(size=(5, 4))
    means = r.normal(size=(3, 4))
    logvars = r.normal(size=(3, 4))
    tape = Tape()
    w = mixture_weights(tape, tape.leaf(v), tape.leaf(means), tape.leaf(logvars))
    np.testing.assert_allclose(w.value, ref_mixture(v, means, logvars),
                               rtol=1e-12, atol=1e-14)
    assert np.all(w.value > 0.0) and np.all(w.value <= 1.0)


def test_gml_weights_vector_output():
    r = rng(7)
    tape = Tape()
    v, hp, w = gml_forward(tape, tape.leaf(r.normal(size=(4, 6))),
                           tape.leaf(r.normal(size=(6, 3))),
                           tape.leaf(r.normal(size=(2, 3))),
                           tape.leaf(np.zeros((2, 3))), output="weights-vector")
    assert hp is w
    assert hp.value.shape == (4, 2)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------


def test_pool_single_node():
    r = rng(8)
    hp = r.normal(size=(1, 4))
    tape = Tape()
    hg, scores = attn_pool(tape, tape.leaf(hp), tape.leaf(r.normal(size=(4, 3))),
                           tape.leaf(r.normal(size=(3, 1))), tape.leaf(np.ones((1, 1))))
    assert np.array_equal(scores.value, [[1.0]])
    np.testing.assert_allclose(hg.value, hp, rtol=0, atol=1e-15)


def test_pool_zero_scorer_gives_mean():
    r = rng(9)
    hp = r.normal(size=(5, 4))
    tape = Tape()
    hg, scores = attn_pool(tape, tape.leaf(hp), tape.leaf(r.normal(size=(4, 3))),
                           tape.leaf(np.zeros((3, 1))), tape.leaf(np.ones((1, 5))))
    np.testing.assert_allclose(scores.value, np.full((1, 5), 0.2), rtol=0, atol=1e-15)
    np.testing.assert_allclose(hg.value, hp.mean(axis=0, keepdims=True),
                               rtol=1e-14, atol=1e-14)


def test_pool_matches_reference_and_normalizes():
    r = rng(10)
    hp = r.normal(size=(5, 16))
    w1 = r.normal(size=(16, 32))
    w2 = r.normal(size=(32, 2))
    tape = Tape()
    hg, scores = attn_pool(tape, tape.leaf(hp), tape.leaf(w1), tape.leaf(w2),
                           tape.leaf(np.ones((2, 5))))
    ref_hg, ref_scores = ref_pool(hp, w1, w2)
    np.testing.assert_allclose(scores.value, ref_scores, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(hg.value, ref_hg, rtol=1e-12, atol=1e-13)
    assert np.all(np.abs(scores.value.sum(axis=1) - 1.0) <= 1e-12)


def test_pool_mask_excludes_padding():
    r = rng(30)
    hp_real = r.normal(size=(4, 6))
    hp_padded = np.vstack([hp_real, np.zeros((3, 6))])
    w1, w2 = r.normal(size=(6, 5)), r.normal(size=(5, 1))
    mask = np.array([[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]])
    tape = Tape()
    hg_pad, s_pad = attn_pool(tape, tape.leaf(hp_padded), tape.leaf(w1),
                              tape.leaf(w2), tape.leaf(mask))
    hg, s = attn_pool(tape, tape.leaf(hp_real), tape.leaf(w1), tape.leaf(w2),
                      tape.leaf(np.ones((1, 4))))
    assert np.all(s_pad.value[:, 4:] == 0.0)
    np.testing.assert_allclose(s_pad.value[:, :4], s.value, rtol=0, atol=1e-15)
    np.testing.assert_allclose(hg_pad.value, hg.value, rtol=0, atol=1e-14)


# ---------------------------------------------------------------------------
# Graph-level layer
# ---------------------------------------------------------------------------


def test_hiergcn_identity_zero_hidden():
    r = rng(11)
    pooled = r.normal(size=(3, 4))
    cls_w = r.normal(size=(4 + 6, 2))
    tape = Tape()
    logits = hiergcn_forward(tape, tape.leaf(pooled), tape.leaf(np.eye(3)),
                             tape.leaf(np.zeros((4, 6))), tape.leaf(cls_w))
    np.testing.assert_allclose(logits.value, pooled @ cls_w[:4], rtol=0, atol=1e-15)


def test_hiergcn_chain_matches_reference():
    r = rng(12)
    n = 4
    pooled = r.normal(size=(n, 5))
    a = np.zeros((n, n))
    for i in range(n - 1):
        a[i, i + 1] = a[i + 1, i] = 1.0
    hier_w = r.normal(size=(5, 6))
    cls_w = r.normal(size=(11, 2))
    a_hat = (a + np.eye(n)) / (a + np.eye(n)).sum(axis=1, keepdims=True)
    tape = Tape()
    logits = hiergcn_forward(tape, tape.leaf(pooled), tape.leaf(a_hat),
                             tape.leaf(hier_w), tape.leaf(cls_w))
    np.testing.assert_allclose(logits.value, ref_hier(pooled, a, hier_w, cls_w),
                               rtol=1e-12, atol=1e-13)


def test_hiergcn_identical_connected_rows_agree():
    r = rng(13)
    row = r.normal(size=5)
    pooled = np.vstack([row, row])
    a_hat = np.full((2, 2), 0.5)
    tape = Tape()
    logits = hiergcn_forward(tape, tape.leaf(pooled), tape.leaf(a_hat),
                             tape.leaf(r.normal(size=(5, 6))),
                             tape.leaf(r.normal(size=(11, 2))))
    np.testing.assert_allclose(logits.value[0], logits.value[1], rtol=0, atol=1e-12)


def test_hier_matrix_modes():
    ds = toy_dataset(n_graphs=3)
    cfg = variant_config(ds)
    a = hier_matrix(ds, cfg)
    assert np.all(np.abs(a.sum(axis=1) - 1.0) <= 1e-15)
    raw = hier_matrix(ds, ModelConfig(feature_dim=3, class_count=2, hier_norm="none"))
    assert np.array_equal(raw, ds.hier_adjacency() + np.eye(3))
    single = hier_matrix(ds, ModelConfig(feature_dim=3, class_count=2, hier_mode="single"))
    assert np.array_equal(single, np.eye(3))


# ---------------------------------------------------------------------------
# Full forward
# ---------------------------------------------------------------------------


def test_forward_shapes_and_ranges():
    ds = toy_dataset(seed=20, n_graphs=3, nodes=6, d=4)
    cfg = variant_config(ds)
    fwd = build_forward(Tape(), ds, cfg, init_params(cfg, seed=0))
    total = sum(g.num_nodes for g in ds.graphs)
    assert fwd.logits.value.shape == (3, 2)
    assert fwd.pooled.value.shape == (3, cfg.gml_dim)
    assert fwd.node_embed.value.shape == (total, cfg.gml_dim)
    assert fwd.node_weights.value.shape == (total, 2)
    assert np.all(fwd.node_weights.value > 0.0)
    assert np.all(fwd.node_weights.value <= 1.0)
    assert fwd.node_pool.value.shape == (total, 1)
    assert fwd.pool_scores.value.shape == (3, 1, 6)
    assert np.all(np.abs(fwd.pool_scores.value.sum(axis=-1) - 1.0) <= 1e-12)
    assert fwd.targets is fwd.params["gml.means"]


def ref_forward_per_graph(ds, params):
    """Composed straight-line forward, one graph at a time."""
    pooled_rows, embed_rows, weight_rows = [], [], []
    for g in ds.graphs:
        h_heads = [ref_gat_head(g.x, g.adjacency(), params[f"gat1.h{k}.w"],
                                params[f"gat1.h{k}.a_src"], params[f"gat1.h{k}.a_dst"],
                                0.2)[0] for k in range(2)]
        h1 = np.concatenate(h_heads, axis=1)
        h2 = ref_gat_head(h1, g.adjacency(), params["gat2.h0.w"],
                          params["gat2.h0.a_src"], params["gat2.h0.a_dst"], 0.2)[0]
        v = h2 @ params["gml.proj"]
        w = ref_mixture(v, params["gml.means"], params["gml.logvars"])
        hp = v * (w.mean(axis=1, keepdims=True))
        hg, _ = ref_pool(hp, params["pool.w1"], params["pool.w2"])
        pooled_rows.append(hg[0])
        embed_rows.append(v)
        weight_rows.append(w)
    pooled = np.vstack(pooled_rows)
    logits = ref_hier(pooled, ds.hier_adjacency(), params["hier.w"], params["cls.w"])
    return pooled, logits, np.vstack(embed_rows), np.vstack(weight_rows)


def test_forward_matches_composed_references():
    ds = toy_dataset(seed=21, n_graphs=3, nodes=5, d=3)
    cfg = variant_config(ds)
    params = init_params(cfg, seed=1)
    fwd = build_forward(Tape(), ds, cfg, params)
    pooled, logits, embed, weights = ref_forward_per_graph(ds, params)
    np.testing.assert_allclose(fwd.pooled.value, pooled, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fwd.logits.value, logits, rtol=1e-10, atol=1e-11)
    np.testing.assert_allclose(fwd.node_embed.value, embed, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fwd.node_weights.value, weights, rtol=1e-10, atol=1e-12)


def test_forward_unequal_graph_sizes_match_references():
    # Padding must be invisible: a batch of different-size graphs agrees
    # with the per-graph composed reference.
    r = rng(31)
    sizes = [3, 7, 5]
    graphs = []
    for n, m in enumerate(sizes):
        edges = [(i, i + 1) for i in range(m - 1)] + ([(0, m - 1)] if m > 2 else [])
        graphs.append(GraphInstance(y=n % 2, uids=100 * n + np.arange(m),
                                    z=r.integers(0, 2, size=m),
                                    x=r.normal(size=(m, 3)), edges=edges))
    ds = HierDataset(feature_dim=3, class_count=2, graphs=graphs,
                     hier_edges=[(0, 1), (1, 2)], hier=True)
    cfg = variant_config(ds)
    params = init_params(cfg, seed=11)
    fwd = build_forward(Tape(), ds, cfg, params)
    pooled, logits, embed, weights = ref_forward_per_graph(ds, params)
    np.testing.assert_allclose(fwd.pooled.value, pooled, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fwd.logits.value, logits, rtol=1e-10, atol=1e-11)
    np.testing.assert_allclose(fwd.node_embed.value, embed, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(fwd.node_weights.value, weights, rtol=1e-10, atol=1e-12)
    starts = np.cumsum([0] + sizes)
    for b, m in enumerate(sizes):
        s = fwd.pool_scores.value[b]
        assert np.all(s[:, m:] == 0.0)
        assert abs(s[0, :m].sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(fwd.node_pool.value[starts[b]:starts[b + 1], 0],
                                   s[0, :m], rtol=0, atol=0)


def permute_graph(g: GraphInstance, perm):
    inv = {old: new for new, old in enumerate(perm)}
    return GraphInstance(
        y=g.y,
        uids=[g.uids[i] for i in perm],
        z=[g.z[i] for i in perm],
        x=g.x[perm, :],
        edges=[(inv[i], inv[j]) for i, j in g.edges],
    )


def test_node_permutation_leaves_outputs_unchanged():
    ds = toy_dataset(seed=22, n_graphs=2, nodes=6, d=3)
    cfg = variant_config(ds)
    params = init_params(cfg, seed=2)
    base = build_forward(Tape(), ds, cfg, params)
    perm = list(np.random.default_rng(0).permutation(6))
    ds2 = HierDataset(ds.feature_dim, ds.class_count,
                      [permute_graph(ds.graphs[0], perm), ds.graphs[1]],
                      ds.hier_edges, ds.hier)
    permuted = build_forward(Tape(), ds2, cfg, params)
    np.testing.assert_allclose(permuted.pooled.value, base.pooled.value,
                               rtol=0, atol=1e-9)
    np.testing.assert_allclose(permuted.logits.value, base.logits.value,
                               rtol=0, atol=1e-9)


def test_graph_permutation_permutes_logits():
    ds = toy_dataset(seed=23, n_graphs=4, nodes=5, d=3)
    cfg = variant_config(ds)
    params = init_params(cfg, seed=3)
    base = build_forward(Tape(), ds, cfg, params)
    perm = [2, 0, 3, 1]
    inv = {old: new for new, old in enumerate(perm)}
    hier_edges = [tuple(sorted((inv[i], inv[j]))) for i, j in ds.hier_edges]
    ds2 = HierDataset(ds.feature_dim, ds.class_count,
                      [ds.graphs[i] for i in perm], hier_edges, ds.hier)
    permuted = build_forward(Tape(), ds2, cfg, params)
    np.testing.assert_allclose(permuted.logits.value, base.logits.value[perm, :],
                               rtol=0, atol=1e-9)


def test_attgcn_forward_and_untouched_mixture_params():
    ds = toy_dataset(seed=24, n_graphs=3, nodes=5, d=3)
    cfg = variant_config(ds, variant="attgcn")
    assert cfg.pool_heads == 2 and cfg.pooled_width == 32
    tape = Tape()
    fwd = build_forward(tape, ds, cfg, init_params(cfg, seed=4))
    assert fwd.logits.value.shape == (3, 2)
    assert fwd.pooled.value.shape == (3, 32)
    assert fwd.targets is None
    assert fwd.node_weights is None
    assert fwd.node_pool.value.shape == (15, 2)
    assert fwd.pool_scores.value.shape == (3, 2, 5)
    assert np.all(np.abs(fwd.pool_scores.value.sum(axis=-1) - 1.0) <= 1e-12)
    probe = tape.leaf(rng(0).normal(size=fwd.logits.value.shape))
    root = tape.full_sum(tape.mul(fwd.logits, probe))
    grads = tape.backward(root, wrt=[fwd.params["gml.means"], fwd.params["gml.logvars"]])
    assert np.array_equal(grads[fwd.params["gml.means"].id], np.zeros((2, 16)))
    assert np.array_equal(grads[fwd.params["gml.logvars"].id], np.zeros((2, 16)))


def test_weights_vector_variant_shapes_and_targets():
    ds = toy_dataset(seed=25, n_graphs=2, nodes=4, d=3)
    cfg = variant_config(ds, gml_output="weights-vector")
    assert cfg.node_width == 2 and cfg.pooled_width == 2
    fwd = build_forward(Tape(), ds, cfg, init_params(cfg, seed=5))
    assert fwd.pooled.value.shape == (2, 2)
    assert fwd.targets.value.shape == (2, 2)
    assert np.all(np.diag(fwd.targets.value) == 1.0)  # each mean matches itself


def test_end_to_end_gradients_sampled():
    ds = toy_dataset(seed=26, n_graphs=2, nodes=5, d=3)
    cfg = variant_config(ds)
    tape = Tape()
    fwd = build_forward(tape, ds, cfg, init_params(cfg, seed=6))
    probe = tape.leaf(rng(1).normal(size=fwd.logits.value.shape))
    root = tape.full_sum(tape.mul(fwd.logits, probe))
    grads = tape.backward(root, wrt=list(fwd.params.values()))
    h = 1e-5
    r = rng(2)
    for name, node in fwd.params.items():
        flat = node.value.ravel()
        analytic = grads[node.id].ravel()
        coords = r.choice(flat.size, size=min(4, flat.size), replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            tape.replay()
            f_plus = float(root.value)
            flat[i] = orig - h
            tape.replay()
            f_minus = float(root.value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            rel = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
            assert rel <= 1e-5, f"{name}[{i}]: rel err {rel:.2e}"
    tape.replay()


# ---------------------------------------------------------------------------
# Parameters and checkpoints
# ---------------------------------------------------------------------------


def test_param_shapes_and_init():
    cfg = ModelConfig(feature_dim=16, class_count=2)
    shapes = param_shapes(cfg)
    assert shapes["gat1.h0.w"] == (16, 64)
    assert shapes["gat2.h0.w"] == (128, 64)
    assert shapes["gml.proj"] == (64, 16)
    assert shapes["hier.w"] == (16, 64)
    assert shapes["cls.w"] == (80, 2)
    p1 = init_params(cfg, seed=0)
    p2 = init_params(cfg, seed=0)
    p3 = init_params(cfg, seed=1)
    for name, shape in shapes.items():
        assert p1[name].shape == shape
        assert np.array_equal(p1[name], p2[name])
    assert any(not np.array_equal(p1[n], p3[n]) for n in shapes)
    assert np.array_equal(p1["gml.logvars"], np.zeros((2, 16)))


def test_build_forward_rejects_bad_params():
    ds = toy_dataset()
    cfg = variant_config(ds)
    params = init_params(cfg, seed=0)
    missing = dict(params)
    del missing["cls.w"]
    with pytest.raises(ValueError):
        build_forward(Tape(), ds, cfg, missing)
    wrong = dict(params)
    wrong["cls.w"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        build_forward(Tape(), ds, cfg, wrong)


def test_set_params_replay_matches_fresh_build():
    ds = toy_dataset(seed=27)
    cfg = variant_config(ds)
    p_a = init_params(cfg, seed=7)
    p_b = init_params(cfg, seed=8)
    tape = Tape()
    fwd = build_forward(tape, ds, cfg, p_a)
    set_params(fwd, p_b)
    tape.replay()
    fresh = build_forward(Tape(), ds, cfg, p_b)
    assert np.array_equal(fwd.logits.value, fresh.logits.value)


def test_checkpoint_round_trip_and_validation(tmp_path):
    cfg = ModelConfig(feature_dim=5, class_count=2)
    params = init_params(cfg, seed=9)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(params, cfg, p1)
    save_checkpoint(params, cfg, p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded, loaded_cfg = load_checkpoint(p1)
    assert loaded_cfg == cfg
    for name in params:
        assert np.array_equal(loaded[name], params[name])

    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    cfg = ModelConfig(feature_dim=5, class_count=2)
    params = init_params(cfg, seed=10)
    params["cls.w"] = params["cls.w"][:, :1]
    path = tmp_path / "ckpt.json"
    with pytest.raises(Exception):
        save_checkpoint(params, cfg, path)
        load_checkpoint(path)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=4, class_count=2, variant="resnet")
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=4, class_count=2, hier_mode="both")
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=0, class_count=2)
    cfg = ModelConfig(feature_dim=4, class_count=2)
    assert ModelConfig.from_obj(cfg.to_obj()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_obj({"feature_dim": 4, "class_count": 2, "bogus": 1})