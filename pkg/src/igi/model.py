"""The GMGCN model: graph attention layers, a Gaussian-mixture gate,
attention pooling, and a graph-level GCN classifier, all recorded on one
tape for end-to-end gradients.

Widths follow the d-128-64-16-64-C schedule: two attention heads of 64
concatenated to 128, a second single-head layer to 64, a projection to
the 16-dim mixture space, a 64-wide graph-level hidden layer, and a
C-way classifier on the concatenation.

Graphs are packed into one zero-padded batch tensor so each layer is a
single tape operation; padded rows are fully masked out of attention and
pooling and therefore stay exactly zero end to end.

The ``attgcn`` variant drops the mixture gate (the projection passes
through unchanged) and pools with two heads instead of one.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import canonjson
from .diffengine import Node, Tape
from .graphdata import HierDataset

VARIANTS = ("gmgcn", "attgcn")
HIER_MODES = ("hierarchical", "single")
GML_OUTPUTS = ("gated", "weights-vector")
HIER_NORMS = ("row", "none")
DTYPES = ("float64", "float32")

CHECKPOINT_SCHEMA = "igi-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.  Defaults give the standard width schedule."""

    feature_dim: int
    class_count: int
    variant: str = "gmgcn"
    hier_mode: str = "hierarchical"
    gml_output: str = "gated"
    hier_norm: str = "row"
    gat1_heads: int = 2
    gat1_out: int = 64
    gat2_out: int = 64
    gml_dim: int = 16
    pool_hidden: int = 32
    hier_out: int = 64
    leaky_slope: float = 0.2
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.hier_mode not in HIER_MODES:
            raise ValueError(f"hier_mode must be one of {HIER_MODES}, got {self.hier_mode!r}")
        if self.gml_output not in GML_OUTPUTS:
            raise ValueError(f"gml_output must be one of {GML_OUTPUTS}, got {self.gml_output!r}")
        if self.hier_norm not in HIER_NORMS:
            raise ValueError(f"hier_norm must be one of {HIER_NORMS}, got {self.hier_norm!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        for name in ("feature_dim", "class_count", "gat1_heads", "gat1_out",
                     "gat2_out", "gml_dim", "pool_hidden", "hier_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def pool_heads(self) -> int:
        """Pooling heads r: two for attgcn, one otherwise."""
        return 2 if self.variant == "attgcn" else 1

    @property
    def node_width(self) -> int:
        """Width of per-node vectors entering the pool."""
        if self.variant == "gmgcn" and self.gml_output == "weights-vector":
            return self.class_count
        return self.gml_dim

    @property
    def pooled_width(self) -> int:
        """Width of one graph's pooled vector (heads flattened)."""
        return self.pool_heads * self.node_width

    def to_obj(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_obj(cls, raw: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**raw)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered name -> shape map for every learnable tensor.

    The mixture parameters are present for both variants so checkpoints
    are uniform; attgcn simply never reads them (their gradients stay
    exactly zero).
    """
    shapes = {}
    for k in range(cfg.gat1_heads):
        shapes[f"gat1.h{k}.w"] = (cfg.feature_dim, cfg.gat1_out)
        shapes[f"gat1.h{k}.a_src"] = (cfg.gat1_out, 1)
        shapes[f"gat1.h{k}.a_dst"] = (cfg.gat1_out, 1)
    gat2_in = cfg.gat1_heads * cfg.gat1_out
    shapes["gat2.h0.w"] = (gat2_in, cfg.gat2_out)
    shapes["gat2.h0.a_src"] = (cfg.gat2_out, 1)
    shapes["gat2.h0.a_dst"] = (cfg.gat2_out, 1)
    shapes["gml.proj"] = (cfg.gat2_out, cfg.gml_dim)
    shapes["gml.means"] = (cfg.class_count, cfg.gml_dim)
    shapes["gml.logvars"] = (cfg.class_count, cfg.gml_dim)
    shapes["pool.w1"] = (cfg.node_width, cfg.pool_hidden)
    shapes["pool.w2"] = (cfg.pool_hidden, cfg.pool_heads)
    shapes["hier.w"] = (cfg.pooled_width, cfg.hier_out)
    shapes["cls.w"] = (cfg.pooled_width + cfg.hier_out, cfg.class_count)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict:
    """Deterministic initialization: weights uniform in the fan-balanced
    range, mixture means standard normal, log-variances zero.

    Draws are always made in float64 and then cast, so the float32 and
    float64 configurations start from the same points.
    """
    rng = np.random.default_rng([int(seed), 0xA11])
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "gml.means":
            arr = rng.normal(size=shape)
        elif name == "gml.logvars":
            arr = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = arr.astype(cfg.np_dtype)
    return params


@dataclass
class Forward:
    """Handles into a recorded forward pass.

    Per-node tensors are stacked over every graph in dataset order (graph
    0's nodes first).  ``node_embed`` rows live in the mixture space;
    ``node_weights`` holds the mixture weights (None for attgcn);
    ``node_pool`` holds each node's per-head pooling attention;
    ``targets`` is what the consensus loss measures pooled vectors
    against (the means, or their weight vectors in weights-vector mode).
    """

    tape: Tape
    cfg: ModelConfig
    params: dict                 # name -> leaf Node
    node_embed: Node             # [total_nodes x gml_dim]
    node_weights: Node | None    # [total_nodes x C] or None (attgcn)
    node_pool: Node              # [total_nodes x r]
    pool_scores: Node            # [N x r x max_nodes]
    pooled: Node                 # [N x pooled_width]
    logits: Node                 # [N x C]
    targets: Node | None         # [C x node_width] or None (attgcn)


@dataclass(frozen=True)
class BatchInputs:
    """Constant tensors for a dataset packed into one padded batch.

    ``x`` is (N, max_nodes, d) with zero rows past each graph's size;
    ``att_mask`` carries adjacency plus self-loops on the real block and
    zeros elsewhere, so padded rows are fully masked; ``real_rows`` maps
    dataset node order into the flattened (N * max_nodes) row space.
    """

    x: np.ndarray
    att_mask: np.ndarray
    pool_mask: np.ndarray        # (N, r, max_nodes) node-presence mask
    real_rows: np.ndarray
    sizes: tuple
    max_nodes: int


def batch_inputs(ds: HierDataset, cfg: ModelConfig) -> BatchInputs:
    """Pack a dataset's features and adjacencies for batched layers."""
    dt = cfg.np_dtype
    sizes = tuple(g.num_nodes for g in ds.graphs)
    n, m = len(sizes), max(sizes)
    x = np.zeros((n, m, ds.feature_dim), dtype=dt)
    att = np.zeros((n, m, m), dtype=dt)
    present = np.zeros((n, m), dtype=dt)
    for b, g in enumerate(ds.graphs):
        k = sizes[b]
        x[b, :k] = g.x
        att[b, :k, :k] = g.adjacency() + np.eye(k)
        present[b, :k] = 1.0
    pool = np.ascontiguousarray(
        np.broadcast_to(present[:, None, :], (n, cfg.pool_heads, m)))
    real = np.concatenate([np.arange(k) + b * m for b, k in enumerate(sizes)])
    return BatchInputs(x=x, att_mask=att, pool_mask=pool, real_rows=real,
                       sizes=sizes, max_nodes=m)


def gat_head(tape, x, mask, w, a_src, a_dst, slope):
    """One attention head: project, score pairs, normalize over the
    masked neighborhood (self included), aggregate, activate.

    Pair score e[i, j] = LeakyReLU(a_src . p_i + a_dst . p_j) with
    p = x @ w; attention is the fused masked row softmax over e; output
    ELU(alpha @ p).  Works on one graph (2-D x) or a padded batch (3-D).
    Returns (output, attention) nodes.
    """
    p = tape.matmul(x, w)
    u = tape.matmul(p, a_src)
    vt = tape.transpose(tape.matmul(p, a_dst))
    alpha = tape.attn_coeffs(u, vt, mask, slope=slope)
    return tape.elu(tape.matmul(alpha, p)), alpha


def gat_layer(tape, x, mask, heads, slope, final=False):
    """Multi-head attention layer.

    ``heads`` is a list of (w, a_src, a_dst) node triples.  Head outputs
    are concatenated, or averaged when ``final`` (for one head the two
    agree).  Returns (output, list of attention nodes).
    """
    outs, alphas = [], []
    for w, a_src, a_dst in heads:
        out, alpha = gat_head(tape, x, mask, w, a_src, a_dst, slope)
        outs.append(out)
        alphas.append(alpha)
    if len(outs) == 1:
        return outs[0], alphas
    if final:
        acc = outs[0]
        for out in outs[1:]:
            acc = tape.add(acc, out)
        return tape.smul(acc, 1.0 / len(outs)), alphas
    return tape.concat_cols(*outs), alphas


def mixture_weights(tape, v, means, logvars):
    """Per-row, per-component Gaussian weights in the projected space.

    w[n, c] = exp(-0.5 * sum_d (v[n,d] - mu[c,d])^2 / exp(l[c,d])).
    Computed per component from explicit differences so a row equal to a
    mean gets weight exactly 1.
    """
    c = means.value.shape[0]
    cols = []
    for k in range(c):
        mu_k = tape.gather_rows(means, [k])                        # [1 x D]
        inv_k = tape.exp(tape.neg(tape.gather_rows(logvars, [k])))
        diff = tape.sub(v, mu_k)
        quad = tape.row_sum(tape.mul(tape.mul(diff, diff), inv_k))  # [M x 1]
        cols.append(tape.exp(tape.smul(quad, -0.5)))
    return cols[0] if c == 1 else tape.concat_cols(*cols)


def gml_forward(tape, h, proj, means, logvars, output: str = "gated"):
    """Project to the mixture space and apply the mixture gate.

    Returns (v, hp, w): the projection, the gated rows (or the weight
    vectors themselves in weights-vector mode), and the raw weights.
    """
    v = tape.matmul(h, proj)
    w = mixture_weights(tape, v, means, logvars)
    if output == "weights-vector":
        return v, w, w
    c = means.value.shape[0]
    gate = tape.smul(tape.row_sum(w), 1.0 / c)                 # [M x 1]
    return v, tape.mul(v, gate), w


def attn_pool(tape, hp, w1, w2, mask):
    """Attention pooling: per-head softmax over nodes, output r x width.

    Scores come from a bias-free two-layer scorer (tanh hidden layer);
    each head's weights sum to one across the graph's real nodes (the
    mask zeroes padding).  Works per graph ([M x w] with an [r x M]
    mask) or batched ([N x M x w] with [N x r x M]).
    """
    pre = tape.matmul(tape.tanh(tape.matmul(hp, w1)), w2)      # [.. x M x r]
    scores = tape.masked_softmax(tape.transpose(pre), mask)    # [.. x r x M]
    return tape.matmul(scores, hp), scores


def hiergcn_forward(tape, pooled, a_hat, hier_w, cls_w):
    """Graph-level layer: propagate pooled vectors through the relation,
    concatenate with the originals, classify."""
    h_hat = tape.relu(tape.matmul(tape.matmul(a_hat, pooled), hier_w))
    return tape.matmul(tape.concat_cols(pooled, h_hat), cls_w)


def hier_matrix(ds: HierDataset, cfg: ModelConfig) -> np.ndarray:
    """The graph-level propagation matrix: relation plus self-loops,
    row-normalized unless disabled; identity in single mode."""
    n = ds.num_graphs
    if cfg.hier_mode == "single":
        return np.eye(n, dtype=cfg.np_dtype)
    a = ds.hier_adjacency() + np.eye(n)
    if cfg.hier_norm == "row":
        a = a / a.sum(axis=1, keepdims=True)
    return a.astype(cfg.np_dtype)


def build_forward(tape: Tape, ds: HierDataset, cfg: ModelConfig, params: dict,
                  trainable: bool = True) -> Forward:
    """Record the full forward pass for every graph in ``ds``.

    ``params`` maps names to arrays (see :func:`param_shapes`); they
    become tape leaves whose handles are returned for training updates.
    The whole dataset runs as one padded batch; per-node outputs are
    gathered back into dataset node order.
    """
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: shape {params[name].shape} != expected {shape}")

    dt = cfg.np_dtype
    pn = {name: tape.leaf(params[name].astype(dt, copy=False), requires_grad=trainable)
          for name in expected}

    bat = batch_inputs(ds, cfg)
    n, m = ds.num_graphs, bat.max_nodes
    x = tape.leaf(bat.x)
    mask = tape.leaf(bat.att_mask)

    heads1 = [(pn[f"gat1.h{k}.w"], pn[f"gat1.h{k}.a_src"], pn[f"gat1.h{k}.a_dst"])
              for k in range(cfg.gat1_heads)]
    h1, _ = gat_layer(tape, x, mask, heads1, cfg.leaky_slope, final=False)
    h2, _ = gat_layer(tape, h1, mask,
                      [(pn["gat2.h0.w"], pn["gat2.h0.a_src"], pn["gat2.h0.a_dst"])],
                      cfg.leaky_slope, final=True)

    flat = tape.reshape(h2, (n * m, cfg.gat2_out))
    if cfg.variant == "gmgcn":
        v, hp, w = gml_forward(tape, flat, pn["gml.proj"], pn["gml.means"],
                               pn["gml.logvars"], output=cfg.gml_output)
        node_weights = tape.gather_rows(w, bat.real_rows)
    else:
        v = tape.matmul(flat, pn["gml.proj"])
        node_weights = None
        hp = v
    node_embed = tape.gather_rows(v, bat.real_rows)

    hp3 = tape.reshape(hp, (n, m, cfg.node_width))
    pool_mask = tape.leaf(bat.pool_mask)
    hg, scores = attn_pool(tape, hp3, pn["pool.w1"], pn["pool.w2"], pool_mask)
    pooled = tape.reshape(hg, (n, cfg.pooled_width))
    node_pool = tape.gather_rows(
        tape.reshape(tape.transpose(scores), (n * m, cfg.pool_heads)), bat.real_rows)

    a_hat = tape.leaf(hier_matrix(ds, cfg))
    logits = hiergcn_forward(tape, pooled, a_hat, pn["hier.w"], pn["cls.w"])

    targets = None
    if cfg.variant == "gmgcn":
        if cfg.gml_output == "weights-vector":
            targets = mixture_weights(tape, pn["gml.means"], pn["gml.means"],
                                      pn["gml.logvars"])
        else:
            targets = pn["gml.means"]

    return Forward(tape=tape, cfg=cfg, params=pn, node_embed=node_embed,
                   node_weights=node_weights, node_pool=node_pool,
                   pool_scores=scores, pooled=pooled, logits=logits,
                   targets=targets)


def set_params(fwd: Forward, params: dict) -> None:
    """Load new parameter values into the recorded tape (then replay)."""
    for name, node in fwd.params.items():
        fwd.tape.set_leaf(node, params[name])


def current_params(fwd: Forward) -> dict:
    return {name: node.value.copy() for name, node in fwd.params.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: dict, cfg: ModelConfig, path) -> None:
    """Canonical-JSON checkpoint: schema tag, config, and every tensor."""
    obj = {
        "schema": CHECKPOINT_SCHEMA,
        "config": cfg.to_obj(),
        "params": {
            name: {"shape": list(arr.shape),
                   "data": [float(x) for x in np.asarray(arr).ravel()]}
            for name, arr in params.items()
        },
    }
    canonjson.dump_path(obj, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, ModelConfig)."""
    raw = canonjson.load_path(path)
    if not isinstance(raw, dict) or raw.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"not a checkpoint file (expected schema {CHECKPOINT_SCHEMA!r})")
    cfg = ModelConfig.from_obj(raw["config"])
    expected = param_shapes(cfg)
    params = {}
    for name, shape in expected.items():
        if name not in raw["params"]:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        entry = raw["params"][name]
        if tuple(entry["shape"]) != shape:
            raise ValueError(f"{name}: checkpoint shape {entry['shape']} != expected {list(shape)}")
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
        if not np.isfinite(arr).all():
            raise ValueError(f"{name}: non-finite checkpoint values")
        params[name] = arr.astype(cfg.np_dtype)
    unknown = sorted(set(raw["params"]) - set(expected))
    if unknown:
        raise ValueError(f"checkpoint has unknown parameters: {', '.join(unknown)}")
    return params, cfg


def variant_config(ds: HierDataset, variant: str = "gmgcn",
                   hier_mode: str = "hierarchical", **overrides) -> ModelConfig:
    """Convenience constructor sized to a dataset."""
    return ModelConfig(feature_dim=ds.feature_dim, class_count=ds.class_count,
                       variant=variant, hier_mode=hier_mode, **overrides)
