"""Built-in oracle suite: gradient checks, metric oracles, loss identities.

Everything here is self-contained and fast (well under half a minute) so
a fresh install can be sanity-checked with one command.  Gradient checks
compare reverse-mode results against central finite differences with
h = 1e-5 and a relative-error tolerance of 1e-5; the check table is
asserted to cover every registered primitive, so adding an engine
primitive without a corresponding check fails the suite.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .diffengine import Tape, grad_check, primitive_kinds
from .evalsuite import ari, mapped_metrics, nmi, precision_at_n
from .graphdata import GraphInstance, HierDataset
from .losses import LossConfig, attach_objective, consensus_loss
from .model import ModelConfig, build_forward, init_params

GRAD_TOL = 1e-5
FD_STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    """One named check with its outcome and a human-readable detail."""

    name: str
    ok: bool
    detail: str


def _rng(tag: str) -> np.random.Generator:
    return np.random.default_rng(abs(hash(tag)) % (2**32))


def _away_from_zero(r, shape, gap=0.1):
    """Random values with |x| >= gap, clear of relu/leaky kinks."""
    x = r.normal(size=shape)
    return np.sign(x) * (np.abs(x) + gap)


def _positive(r, shape, floor=0.5):
    return floor + np.abs(r.normal(size=shape))


def _probe(tape, out, tag: str):
    probe = tape.leaf(_rng(tag + "/probe").normal(size=out.value.shape))
    return tape.full_sum(tape.mul(out, probe))


def _softmax_mask(r, rows, cols):
    mask = (r.random(size=(rows, cols)) < 0.6).astype(float)
    mask[0] = 1.0
    mask[1] = 0.0
    mask[2, :1] = 1.0
    return mask


def _primitive_cases() -> dict:
    """kind -> list of (build, point) gradient-check cases.

    Binary primitives get one case per differentiable operand; masks and
    index attributes are held fixed.
    """
    cases: dict[str, list] = {}

    def unary(kind, point, **attrs):
        def build(tape, x):
            return _probe(tape, tape.apply(kind, x, **attrs), kind)
        cases.setdefault(kind, []).append((build, point))

    def binary(kind, a, b, grad_mask=(True, True), **attrs):
        def left(tape, x):
            return _probe(tape, tape.apply(kind, x, tape.leaf(b), **attrs), kind)

        def right(tape, x):
            return _probe(tape, tape.apply(kind, tape.leaf(a), x, **attrs), kind)
        entry = cases.setdefault(kind, [])
        if grad_mask[0]:
            entry.append((left, a))
        if grad_mask[1]:
            entry.append((right, b))

    r = _rng("points")
    a34, b34 = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    binary("matmul", r.normal(size=(3, 4)), r.normal(size=(4, 2)))
    binary("add", a34, b34)
    binary("sub", a34, b34)
    binary("mul", a34, b34)
    unary("smul", r.normal(size=(3, 4)), scalar=-1.7)
    unary("neg", r.normal(size=(3, 4)))
    unary("recip", np.sign(r.normal(size=(3, 4))) * _positive(r, (3, 4)))
    unary("exp", r.normal(size=(3, 4)))
    unary("log", _positive(r, (3, 4)))
    unary("sqrt", _positive(r, (3, 4)))
    unary("tanh", r.normal(size=(3, 4)))
    unary("leaky_relu", _away_from_zero(r, (3, 4)), slope=0.2)
    unary("relu", _away_from_zero(r, (3, 4)))
    unary("elu", _away_from_zero(r, (3, 4)))

    fixed_l, fixed_r = r.normal(size=(3, 2)), r.normal(size=(3, 3))

    def concat_mid(tape, x):
        out = tape.concat_cols(tape.leaf(fixed_l), x, tape.leaf(fixed_r))
        return _probe(tape, out, "concat_cols")
    cases["concat_cols"] = [(concat_mid, r.normal(size=(3, 4)))]

    unary("row_sum", r.normal(size=(4, 3)))
    unary("row_mean", r.normal(size=(4, 3)))
    unary("full_sum", r.normal(size=(4, 3)))
    unary("transpose", r.normal(size=(3, 4)))
    unary("reshape", r.normal(size=(3, 4)), shape=(2, 6))

    mask = _softmax_mask(r, 4, 5)
    binary("masked_softmax", r.normal(size=(4, 5)), mask, grad_mask=(True, False))
    binary("masked_log_softmax", r.normal(size=(4, 5)), mask, grad_mask=(True, False))

    m = 5
    att = (r.random(size=(m, m)) < 0.6).astype(float)
    att[np.arange(m), np.arange(m)] = 1.0
    u = _away_from_zero(r, (m, 1), gap=0.3)
    vt = _away_from_zero(r, (1, m), gap=0.3)

    def attn_u(tape, x):
        out = tape.attn_coeffs(x, tape.leaf(vt), tape.leaf(att), slope=0.2)
        return _probe(tape, out, "attn_coeffs")

    def attn_v(tape, x):
        out = tape.attn_coeffs(tape.leaf(u), x, tape.leaf(att), slope=0.2)
        return _probe(tape, out, "attn_coeffs")
    cases["attn_coeffs"] = [(attn_u, u), (attn_v, vt)]

    def gather(tape, x):
        return _probe(tape, tape.gather_rows(x, [0, 2, 2, 1]), "gather_rows")
    cases["gather_rows"] = [(gather, r.normal(size=(3, 4)))]

    rows = _away_from_zero(r, (4, 3), gap=0.4)
    refs = _away_from_zero(r, (2, 3), gap=0.4)
    binary("sq_row_dist", rows, refs)
    binary("cosine_rows", rows, refs)
    return cases


def check_primitives() -> list[CheckResult]:
    """Finite-difference check for every registered primitive."""
    cases = _primitive_cases()
    results = []
    missing = sorted(set(primitive_kinds()) - set(cases))
    extra = sorted(set(cases) - set(primitive_kinds()))
    ok = not missing and not extra
    detail = "table spans the registry" if ok else f"missing={missing} extra={extra}"
    results.append(CheckResult("primitive-coverage", ok, detail))
    for kind in sorted(cases):
        worst = 0.0
        for build, point in cases[kind]:
            worst = max(worst, grad_check(build, point, h=FD_STEP))
        results.append(CheckResult(
            f"grad:{kind}", worst <= GRAD_TOL, f"max rel err {worst:.2e}"))
    return results


# ---------------------------------------------------------------------------
# End-to-end loss gradient on a toy instance
# ---------------------------------------------------------------------------


def toy_dataset(seed: int = 0, graphs: int = 2, nodes: int = 5,
                d: int = 3) -> HierDataset:
    """Tiny structurally complete dataset for end-to-end checks."""
    r = np.random.default_rng(seed)
    gs = []
    for n in range(graphs):
        uids = r.choice(graphs * nodes, size=nodes, replace=False)
        edges = sorted({(min(int(i), int(j)), max(int(i), int(j)))
                        for i, j in r.integers(0, nodes, size=(nodes * 2, 2))
                        if i != j})
        gs.append(GraphInstance(
            y=n % 2,
            uids=uids,
            z=r.integers(0, 2, size=nodes),
            x=r.normal(size=(nodes, d)),
            edges=edges,
        ))
    hier_edges = [(i, i + 1) for i in range(graphs - 1)]
    return HierDataset(feature_dim=d, class_count=2, graphs=gs,
                       hier_edges=hier_edges, hier=True)


def _toy_config(ds: HierDataset, variant: str = "gmgcn") -> ModelConfig:
    return ModelConfig(
        feature_dim=ds.feature_dim, class_count=ds.class_count,
        variant=variant, hier_mode="hierarchical",
        gat1_heads=2, gat1_out=4, gat2_out=4, gml_dim=3,
        pool_hidden=3, hier_out=4, dtype="float64",
    )


def check_end_to_end(seed: int = 0) -> CheckResult:
    """Central-difference check of the full training objective.

    Every parameter tensor of the gmgcn variant is perturbed coordinate
    by coordinate on a 2-graph/5-node instance, replaying the recorded
    tape, and compared against the reverse-mode gradient.
    """
    ds = toy_dataset(seed)
    cfg = _toy_config(ds)
    params = init_params(cfg, seed)
    tape = Tape()
    fwd = build_forward(tape, ds, cfg, params, trainable=True)
    obj = attach_objective(tape, fwd, ds, LossConfig())
    grads = tape.backward(obj.total, wrt=list(fwd.params.values()))

    worst = 0.0
    for name, node in fwd.params.items():
        analytic = grads[node.id]
        base = node.value.copy()
        flat = base.ravel()
        numeric = np.zeros_like(base)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            tape.set_leaf(node, base)
            tape.replay()
            f_plus = float(obj.total.value)
            flat[i] = orig - FD_STEP
            tape.set_leaf(node, base)
            tape.replay()
            f_minus = float(obj.total.value)
            flat[i] = orig
            numeric.ravel()[i] = (f_plus - f_minus) / (2.0 * FD_STEP)
        tape.set_leaf(node, base)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, err)
    tape.replay()
    return CheckResult("grad:end-to-end", worst <= GRAD_TOL,
                       f"max rel err {worst:.2e} over {len(fwd.params)} tensors")


def check_frozen_mixture(seed: int = 0) -> CheckResult:
    """The attention-only variant must leave the mixture parameters with
    exactly zero gradient."""
    ds = toy_dataset(seed)
    cfg = _toy_config(ds, variant="attgcn")
    params = init_params(cfg, seed)
    tape = Tape()
    fwd = build_forward(tape, ds, cfg, params, trainable=True)
    obj = attach_objective(tape, fwd, ds, LossConfig())
    wrt = [fwd.params["gml.means"], fwd.params["gml.logvars"]]
    grads = tape.backward(obj.total, wrt=wrt)
    peak = max(float(np.max(np.abs(grads[n.id]))) for n in wrt)
    return CheckResult("attgcn-frozen-mixture", peak == 0.0,
                       f"max |grad| {peak:.1e}")


# ---------------------------------------------------------------------------
# Metric oracles
# ---------------------------------------------------------------------------


def _brute_nmi(z, zh) -> float:
    n = len(z)
    pa = {a: z.count(a) / n for a in set(z)}
    pb = {b: zh.count(b) / n for b in set(zh)}
    joint = {}
    for a, b in zip(z, zh):
        joint[a, b] = joint.get((a, b), 0) + 1 / n
    mi = sum(p * math.log(p / (pa[a] * pb[b])) for (a, b), p in joint.items())
    ha = -sum(p * math.log(p) for p in pa.values())
    hb = -sum(p * math.log(p) for p in pb.values())
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    return mi / math.sqrt(ha * hb)


def _brute_ari(z, zh) -> float:
    n = len(z)
    s11 = s10 = s01 = s00 = 0
    for i, j in itertools.combinations(range(n), 2):
        same_a, same_b = z[i] == z[j], zh[i] == zh[j]
        s11 += same_a and same_b
        s10 += same_a and not same_b
        s01 += same_b and not same_a
        s00 += not same_a and not same_b
    num = 2.0 * (s11 * s00 - s10 * s01)
    den = (s11 + s10) * (s10 + s00) + (s11 + s01) * (s01 + s00)
    return num / den if den else 1.0


def check_metrics() -> list[CheckResult]:
    """Pinned metric values plus brute-force agreement on random labelings."""
    results = []

    val = ari([0, 0, 1, 1], [0, 1, 0, 1])
    results.append(CheckResult("ari:anticorrelated", abs(val + 0.5) <= 1e-12,
                               f"ari = {val:+.3f} (want -0.5)"))

    both = nmi([2, 2, 2], [7, 7, 7])
    one = nmi([0, 0, 1], [5, 5, 5])
    results.append(CheckResult(
        "nmi:degenerate-conventions", both == 1.0 and one == 0.0,
        f"both-constant {both}, one-constant {one}"))

    acc, _ = mapped_metrics([0, 0, 1, 1, 2, 2], [1, 1, 2, 2, 0, 0])
    results.append(CheckResult("acc:permutation-map", acc == 1.0,
                               f"relabeled clustering acc = {acc}"))

    pre = precision_at_n([[0.9, 0.8, 0.1, 0.2]], [[1, 0, 0, 1]], n=[2])
    results.append(CheckResult("pre:top-n", pre == 0.5, f"pre@2 = {pre}"))

    r = np.random.default_rng(20240822)
    worst = 0.0
    for t in range(20):
        n = int(r.integers(4, 11))
        z = [int(v) for v in r.integers(0, 3, size=n)]
        zh = [int(v) for v in r.integers(0, 3, size=n)]
        if t % 5 == 0:
            zh = [0] * n
        worst = max(worst, abs(nmi(z, zh) - _brute_nmi(z, zh)),
                    abs(ari(z, zh) - _brute_ari(z, zh)))
    results.append(CheckResult("metrics:brute-force-agreement", worst <= 1e-12,
                               f"max |delta| {worst:.1e} over 20 labelings"))
    return results


# ---------------------------------------------------------------------------
# Consensus enhancement identity
# ---------------------------------------------------------------------------


def check_consensus_noop(trials: int = 100, seed: int = 0) -> CheckResult:
    """all-columns enhancement adds a per-row constant, which the row
    softmax cancels: losses match delta = 0 to 1e-12 and gradients to
    1e-9, at any delta."""
    r = np.random.default_rng([seed, 0xC0])
    worst_val, worst_grad = 0.0, 0.0
    for _ in range(trials):
        n = int(r.integers(2, 9))
        c = int(r.integers(2, 5))
        d = int(r.integers(2, 6))
        hg = r.normal(size=(n, d))
        mu = r.normal(size=(c, d))
        y = r.integers(0, c, size=n)

        def eval_loss(delta):
            tape = Tape()
            h = tape.leaf(hg, requires_grad=True)
            m = tape.leaf(mu, requires_grad=True)
            loss = consensus_loss(tape, h, m, y, delta, mode="all-columns")
            grads = tape.backward(loss, wrt=[h, m])
            return float(loss.value), grads[h.id], grads[m.id]

        v_on, gh_on, gm_on = eval_loss(0.5)
        v_off, gh_off, gm_off = eval_loss(0.0)
        worst_val = max(worst_val, abs(v_on - v_off))
        worst_grad = max(worst_grad,
                         float(np.max(np.abs(gh_on - gh_off))),
                         float(np.max(np.abs(gm_on - gm_off))))
    ok = worst_val <= 1e-12 and worst_grad <= 1e-9
    return CheckResult("consensus:all-columns-noop", ok,
                       f"max loss delta {worst_val:.1e}, grad delta {worst_grad:.1e}")


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


def run_checks(seed: int = 0) -> list[CheckResult]:
    """Run the complete oracle suite and return every result."""
    results = check_primitives()
    results.append(check_end_to_end(seed))
    results.append(check_frozen_mixture(seed))
    results.extend(check_metrics())
    results.append(check_consensus_noop(seed=seed))
    return results


def run_selftest(seed: int = 0, log=print) -> int:
    """Print a pass/fail line per check; exit status 0 only if all pass."""
    t0 = time.perf_counter()
    results = run_checks(seed)
    width = max(len(res.name) for res in results)
    for res in results:
        log(f"{'PASS' if res.ok else 'FAIL'}  {res.name:<{width}}  {res.detail}")
    failed = sum(not res.ok for res in results)
    took = time.perf_counter() - t0
    if failed:
        log(f"selftest: {failed} of {len(results)} checks FAILED ({took:.1f}s)")
        return 1
    log(f"selftest: all {len(results)} checks passed ({took:.1f}s)")
    return 0
