"""Losses and training: consensus loss over enhanced distances,
classification cross-entropy, their blend, Adam, and the full-batch
training loop (tape built once, replayed every epoch).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import canonjson
from .diffengine import DiffEngineError, Node, Tape
from .graphdata import HierDataset, SplitSpec, training_view
from .model import Forward, ModelConfig, build_forward, current_params, init_params, set_params

ENHANCE_MODES = ("true-column", "all-columns")

REPORT_SCHEMA = "igi-train-report-v1"


class TrainingDivergence(RuntimeError):
    """Loss or parameters became non-finite during training."""


@dataclass(frozen=True)
class LossConfig:
    """Objective and optimizer knobs."""

    delta: float = 0.5
    alpha: float = 0.5
    enhance_mode: str = "true-column"
    epochs: int = 800
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0.0:
            raise ValueError("delta must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.enhance_mode not in ENHANCE_MODES:
            raise ValueError(f"enhance_mode must be one of {ENHANCE_MODES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")

    def to_obj(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_obj(cls, raw: dict) -> "LossConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ValueError(f"unknown loss config keys: {', '.join(unknown)}")
        return cls(**raw)


def _check_labels(y, count: int, rows: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (rows,):
        raise ValueError(f"expected {rows} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= count):
        raise ValueError(f"label out of range [0, {count})")
    return y


# ---------------------------------------------------------------------------
# Loss graph builders
# ---------------------------------------------------------------------------


def distance_matrix(tape: Tape, hg: Node, mu: Node) -> Node:
    """Euclidean (not squared) distances between rows and centres."""
    return tape.sqrt(tape.sq_row_dist(hg, mu))


def enhance_distances(tape: Tape, d: Node, y, delta: float, mode: str) -> Node:
    """Push each row's true-class distance up by a factor (1 + delta).

    true-column multiplies only the true entry; all-columns adds
    delta * d[n, y_n] to every entry of row n (which a later row-softmax
    cancels exactly; kept for the equivalence test).
    """
    if mode not in ENHANCE_MODES:
        raise ValueError(f"enhance mode must be one of {ENHANCE_MODES}, got {mode!r}")
    n, c = d.value.shape
    y = _check_labels(y, c, n)
    onehot = np.eye(c)[y]
    dt = d.value.dtype
    if mode == "true-column":
        scale = np.ones((n, c)) + delta * onehot
        return tape.mul(d, tape.leaf(scale.astype(dt)))
    true_col = tape.row_sum(tape.mul(d, tape.leaf(onehot.astype(dt))))   # [N x 1]
    return tape.add(d, tape.smul(true_col, delta))


def _mean_true_neg_logp(tape: Tape, logp: Node, onehot: np.ndarray) -> Node:
    onehot = onehot.astype(logp.value.dtype)
    picked = tape.row_sum(tape.mul(logp, tape.leaf(onehot)))
    return tape.smul(tape.full_sum(picked), -1.0 / onehot.shape[0])


def consensus_loss(tape: Tape, hg: Node, mu: Node, y, delta: float,
                   mode: str = "true-column") -> Node:
    """Cross-entropy of softmax(-enhanced distances) against raw labels."""
    d = distance_matrix(tape, hg, mu)
    d_enh = enhance_distances(tape, d, y, delta, mode)
    n, c = d.value.shape
    ones = tape.leaf(np.ones((n, c), dtype=d.value.dtype))
    logp = tape.masked_log_softmax(tape.neg(d_enh), ones)
    return _mean_true_neg_logp(tape, logp, np.eye(c)[_check_labels(y, c, n)])


def classification_loss(tape: Tape, logits: Node, y) -> Node:
    """Softmax cross-entropy averaged over rows."""
    n, c = logits.value.shape
    y = _check_labels(y, c, n)
    logp = tape.masked_log_softmax(logits, tape.leaf(np.ones((n, c), dtype=logits.value.dtype)))
    return _mean_true_neg_logp(tape, logp, np.eye(c)[y])


def total_loss(tape: Tape, l_cls: Node, l_con: Node, alpha: float) -> Node:
    """alpha * classification + (1 - alpha) * consensus."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return tape.add(tape.smul(l_cls, alpha), tape.smul(l_con, 1.0 - alpha))


@dataclass
class Objective:
    """Loss nodes attached to a recorded forward pass."""

    total: Node
    cls: Node
    con: Node | None
    alpha: float


def attach_objective(tape: Tape, fwd: Forward, ds: HierDataset,
                     loss_cfg: LossConfig) -> Objective:
    """Build the training objective on the forward pass's tape.

    ``ds`` must be the dataset the forward was built on (its graph labels
    are the targets).  The attgcn variant has no consensus targets, so
    its objective is pure classification and alpha is forced to 1.
    """
    y = [g.y for g in ds.graphs]
    l_cls = classification_loss(tape, fwd.logits, y)
    if fwd.targets is None:
        return Objective(total=l_cls, cls=l_cls, con=None, alpha=1.0)
    l_con = consensus_loss(tape, fwd.pooled, fwd.targets, y,
                           loss_cfg.delta, loss_cfg.enhance_mode)
    total = total_loss(tape, l_cls, l_con, loss_cfg.alpha)
    return Objective(total=total, cls=l_cls, con=l_con, alpha=loss_cfg.alpha)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators per parameter, plus step count."""

    m: dict
    v: dict
    t: int = 0


def adam_init(params: dict) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()},
                     t=0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter {p.shape}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    """One training run's trace and outcome.

    ``loss_con`` is None for variants without a consensus objective.
    Wall-clock is informational only and excluded from any byte-level
    reproducibility guarantees.
    """

    seed: int
    epochs: int
    alpha: float
    loss: list = field(default_factory=list)
    loss_cls: list = field(default_factory=list)
    loss_con: list | None = None
    params: dict = field(default_factory=dict)
    wall_clock_sec: float = 0.0


def train(ds: HierDataset, split: SplitSpec, model_cfg: ModelConfig,
          loss_cfg: LossConfig, log=None) -> TrainReport:
    """Full-batch training on the split's training view.

    The forward and loss graph are recorded once; each epoch replays the
    tape with updated parameters.  Non-finite losses or parameters abort
    with the epoch index and parameter norms.  ``log``, when given, gets
    one line per epoch.
    """
    view = training_view(ds, split)
    params = init_params(model_cfg, loss_cfg.seed)
    tape = Tape()
    fwd = build_forward(tape, view, model_cfg, params)
    obj = attach_objective(tape, fwd, view, loss_cfg)

    report = TrainReport(seed=loss_cfg.seed, epochs=loss_cfg.epochs, alpha=obj.alpha,
                         loss_con=None if obj.con is None else [])
    start = time.perf_counter()
    state = adam_init(params)
    param_nodes = list(fwd.params.values())
    names = list(fwd.params.keys())
    for epoch in range(loss_cfg.epochs):
        l_total = float(obj.total.value)
        l_cls = float(obj.cls.value)
        l_con = None if obj.con is None else float(obj.con.value)
        if not np.isfinite(l_total) or not np.isfinite(l_cls) or (
                l_con is not None and not np.isfinite(l_con)):
            raise TrainingDivergence(_divergence_message(epoch, params))
        report.loss.append(l_total)
        report.loss_cls.append(l_cls)
        if report.loss_con is not None:
            report.loss_con.append(l_con)
        if log is not None:
            con_part = "" if l_con is None else f" con={l_con:.6f}"
            log(f"epoch {epoch}: loss={l_total:.6f} cls={l_cls:.6f}{con_part}")

        grad_map = tape.backward(obj.total, wrt=param_nodes)
        grads = {name: grad_map[node.id] for name, node in fwd.params.items()}
        params = adam_step(params, grads, state, loss_cfg.learning_rate,
                           loss_cfg.beta1, loss_cfg.beta2, loss_cfg.eps)
        if any(not np.isfinite(params[name]).all() for name in names):
            raise TrainingDivergence(_divergence_message(epoch, params))
        set_params(fwd, params)
        try:
            tape.replay()
        except DiffEngineError as exc:
            raise TrainingDivergence(
                f"epoch {epoch}: replay failed after update: {exc}") from exc

    report.params = {name: np.asarray(p).copy() for name, p in params.items()}
    report.wall_clock_sec = time.perf_counter() - start
    return report


def _divergence_message(epoch: int, params: dict) -> str:
    norms = ", ".join(f"{name}={float(np.linalg.norm(p)):.3e}"
                      for name, p in params.items())
    return f"non-finite loss at epoch {epoch}; parameter norms: {norms}"


def save_report(report: TrainReport, path) -> None:
    """Write the training trace as canonical JSON (parameters live in the
    checkpoint, not here; wall-clock is included but not reproducible)."""
    obj = {
        "schema": REPORT_SCHEMA,
        "seed": report.seed,
        "epochs": report.epochs,
        "alpha": report.alpha,
        "loss": [float(x) for x in report.loss],
        "loss_cls": [float(x) for x in report.loss_cls],
        "loss_con": None if report.loss_con is None else [float(x) for x in report.loss_con],
        "wall_clock_sec": float(report.wall_clock_sec),
    }
    canonjson.dump_path(obj, path)


def load_report(path) -> dict:
    raw = canonjson.load_path(path)
    if not isinstance(raw, dict) or raw.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"not a training report (expected schema {REPORT_SCHEMA!r})")
    return raw
