"""Two-layer graph convolutional classifier with hand-written gradients.

Forward pass (Kipf-style symmetric normalization, dense weights):

    A_hat = D~^{-1/2} (A + I) D~^{-1/2}
    H1    = dropout(relu(A_hat X W0 + b0))        (dropout in train mode only)
    H_f   = A_hat H1 W1 + b1                      (final-layer representation)
    Z     = row_softmax(H_f)

The training objective mixes three terms over the working set V_S:

    L = (1 - alpha - beta) * L_S + alpha * L_T + beta * L_F

    L_S  mean cross-entropy against hard labels
    L_T  mean cross-entropy against temperature-softened teacher distributions
    L_F  mean squared error between H_f rows and aligned rationale vectors

All gradients are derived analytically (no autograd) so they can be checked
against central finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    BadWeights,
    Diverged,
    DimMismatch,
    MissingRationaleTarget,
    MissingTeacherProbs,
    NonFiniteInput,
    ShapeMismatch,
    StaleCache,
)
from .graph_store import TextGraph

LOG_CLAMP = 1e-12          # floor inside every log(); teacher probs may be exactly 0

CHECKPOINT_MAGIC = b"GDCK"
CHECKPOINT_VERSION = 1


@dataclass
class GcnModel:
    w0: np.ndarray           # (d_emb, d_hidden)
    b0: np.ndarray           # (d_hidden,)
    w1: np.ndarray           # (d_hidden, C)
    b1: np.ndarray           # (C,)
    dropout_rate: float = 0.5

    def __post_init__(self):
        for p in (self.w0, self.b0, self.w1, self.b1):
            if not np.all(np.isfinite(p)):
                raise NonFiniteInput("model parameters must be finite")
        if self.w0.shape[1] != self.w1.shape[0]:
            raise ShapeMismatch("w0/w1 hidden dimensions disagree")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise BadWeights(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def d_emb(self) -> int:
        return self.w0.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w0.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w1.shape[1]

    def copy(self) -> "GcnModel":
        return GcnModel(
            self.w0.copy(), self.b0.copy(), self.w1.copy(), self.b1.copy(),
            self.dropout_rate,
        )


def init_model(
    d_emb: int, num_classes: int, d_hidden: int = 64,
    dropout_rate: float = 0.5, seed: int = 0,
) -> GcnModel:
    """Xavier-uniform weights, zero biases, seeded."""
    rng = np.random.default_rng(seed)

    def xavier(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    return GcnModel(
        w0=xavier(d_emb, d_hidden),
        b0=np.zeros(d_hidden),
        w1=xavier(d_hidden, num_classes),
        b1=np.zeros(num_classes),
        dropout_rate=dropout_rate,
    )


def normalized_adjacency(g: TextGraph, drop_node: int | None = None) -> sp.csr_matrix:
    """Symmetric normalization D~^{-1/2} (A + I) D~^{-1/2}.

    With drop_node set, every edge incident to that node is removed before
    normalizing (the node keeps its self-loop), which is the ablated graph
    used by the neighborhood entropy-reduction score.
    """
    n = g.num_nodes
    rows, cols = [], []
    for u, v in g.edges:
        if drop_node is not None and (u == drop_node or v == drop_node):
            continue
        rows.extend((u, v))
        cols.extend((v, u))
    rows.extend(range(n))
    cols.extend(range(n))
    data = np.ones(len(rows))
    a_tilde = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return sp.csr_matrix(a_tilde.multiply(d_inv_sqrt[:, None]).multiply(d_inv_sqrt[None, :]))


def row_softmax(h: np.ndarray) -> np.ndarray:
    shifted = h - h.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardCache:
    """Activations saved by a train-mode forward pass for backward()."""

    x: np.ndarray
    a_hat: sp.csr_matrix
    s0: np.ndarray           # A_hat X
    p0: np.ndarray           # pre-relu layer-1 activation
    drop_mask: np.ndarray    # inverted-dropout mask (ones when rate = 0 or eval)
    h1d: np.ndarray          # post-dropout hidden
    s1: np.ndarray           # A_hat H1d
    hf: np.ndarray
    z: np.ndarray
    train_mode: bool


def forward(
    model: GcnModel,
    a_hat: sp.csr_matrix,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Returns (H_f, Z, cache).  Dropout fires only in train mode."""
    if x.shape[1] != model.d_emb:
        raise ShapeMismatch(f"x has {x.shape[1]} features, model expects {model.d_emb}")
    if a_hat.shape[0] != x.shape[0]:
        raise ShapeMismatch("adjacency and feature row counts disagree")
    train_mode = mode == "train"
    s0 = a_hat @ x
    p0 = s0 @ model.w0 + model.b0
    h1 = np.maximum(p0, 0.0)
    if train_mode and model.dropout_rate > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = 1.0 - model.dropout_rate
        drop_mask = (rng.random(h1.shape) < keep) / keep
    else:
        drop_mask = np.ones_like(h1)
    h1d = h1 * drop_mask
    s1 = a_hat @ h1d
    hf = s1 @ model.w1 + model.b1
    z = row_softmax(hf)
    cache = ForwardCache(
        x=x, a_hat=a_hat, s0=s0, p0=p0, drop_mask=drop_mask,
        h1d=h1d, s1=s1, hf=hf, z=z, train_mode=train_mode,
    )
    return hf, z, cache


def teacher_distribution(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax p_j = exp(l_j / tau) / sum_c exp(l_c / tau)."""
    l = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(l)):
        raise NonFiniteInput("teacher logits must be finite")
    if tau <= 0:
        raise BadWeights(f"temperature must be positive, got {tau}")
    scaled = l / tau
    scaled -= scaled.max()
    e = np.exp(scaled)
    return e / e.sum()


@dataclass
class TrainBundle:
    """Everything the loss needs about the working set V_S.

    Arrays are aligned with node_ids.  teacher_probs / rationale_targets are
    None when the corresponding loss term is disabled.
    """

    node_ids: np.ndarray                     # (n,) distinct node ids
    hard_labels: np.ndarray                  # (n,) class indices
    alpha: float = 0.0
    beta: float = 0.0
    tau: float = 1.0
    teacher_probs: np.ndarray | None = None       # (n, C) rows sum to 1
    rationale_targets: np.ndarray | None = None   # (n, C)

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.hard_labels = np.asarray(self.hard_labels, dtype=np.int64)
        if len(np.unique(self.node_ids)) != len(self.node_ids):
            raise BadWeights("bundle node_ids must be distinct")
        if self.hard_labels.shape != self.node_ids.shape:
            raise ShapeMismatch("hard_labels must align with node_ids")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta >= 1.0:
            raise BadWeights(
                f"need alpha >= 0, beta >= 0, alpha + beta < 1; got "
                f"alpha={self.alpha}, beta={self.beta}"
            )
        if self.tau <= 0:
            raise BadWeights(f"temperature must be positive, got {self.tau}")
        if self.teacher_probs is not None:
            self.teacher_probs = np.asarray(self.teacher_probs, dtype=np.float64)
            if self.teacher_probs.shape[0] != len(self.node_ids):
                raise ShapeMismatch("teacher_probs must align with node_ids")
            sums = self.teacher_probs.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise BadWeights("teacher_probs rows must sum to 1 within 1e-6")
        if self.rationale_targets is not None:
            self.rationale_targets = np.asarray(self.rationale_targets, dtype=np.float64)
            if self.rationale_targets.shape[0] != len(self.node_ids):
                raise ShapeMismatch("rationale_targets must align with node_ids")

    @property
    def size(self) -> int:
        return len(self.node_ids)


def loss_student(z: np.ndarray, bundle: TrainBundle) -> float:
    """Mean -log Z[v, y_v] over the bundle (log clamped at 1e-12)."""
    picked = z[bundle.node_ids, bundle.hard_labels]
    return float(np.mean(-np.log(np.maximum(picked, LOG_CLAMP))))


def loss_teacher(z: np.ndarray, bundle: TrainBundle) -> float:
    """Mean cross-entropy of Z rows against the teacher distributions."""
    if bundle.teacher_probs is None:
        raise MissingTeacherProbs("bundle has no teacher_probs")
    rows = z[bundle.node_ids]
    logz = np.log(np.maximum(rows, LOG_CLAMP))
    return float(np.mean(-(bundle.teacher_probs * logz).sum(axis=1)))


def loss_feature(hf: np.ndarray, bundle: TrainBundle) -> float:
    """Mean over nodes of the per-dimension mean squared error to targets."""
    if bundle.rationale_targets is None:
        raise MissingRationaleTarget("bundle has no rationale_targets")
    if bundle.rationale_targets.shape[1] != hf.shape[1]:
        raise DimMismatch(
            f"rationale targets have dim {bundle.rationale_targets.shape[1]}, "
            f"final layer has {hf.shape[1]}"
        )
    diff = hf[bundle.node_ids] - bundle.rationale_targets
    return float(np.mean(np.mean(diff ** 2, axis=1)))


def loss_total(l_s: float, l_t: float, l_f: float, alpha: float, beta: float) -> float:
    if alpha < 0 or beta < 0 or alpha + beta >= 1.0:
        raise BadWeights(
            f"need alpha >= 0, beta >= 0, alpha + beta < 1; got alpha={alpha}, beta={beta}"
        )
    return (1.0 - alpha - beta) * l_s + alpha * l_t + beta * l_f


def bundle_losses(hf: np.ndarray, z: np.ndarray, bundle: TrainBundle):
    """(total, L_S, L_T, L_F) with disabled terms reported as 0."""
    l_s = loss_student(z, bundle)
    l_t = loss_teacher(z, bundle) if bundle.teacher_probs is not None else 0.0
    l_f = loss_feature(hf, bundle) if bundle.rationale_targets is not None else 0.0
    return loss_total(l_s, l_t, l_f, bundle.alpha, bundle.beta), l_s, l_t, l_f


@dataclass
class Grads:
    w0: np.ndarray
    b0: np.ndarray
    w1: np.ndarray
    b1: np.ndarray


def _softmax_vjp(z_rows: np.ndarray, dldz: np.ndarray) -> np.ndarray:
    # J_softmax^T u = z * u - z * (z . u), row-wise
    inner = (z_rows * dldz).sum(axis=1, keepdims=True)
    return z_rows * dldz - z_rows * inner


def backward(model: GcnModel, cache: ForwardCache, bundle: TrainBundle) -> Grads:
    """Analytic gradients of the mixed loss; only V_S rows feed the output
    gradient (everything upstream still flows through the shared adjacency).
    """
    if not cache.train_mode:
        raise StaleCache("backward needs a cache from a train-mode forward pass")
    n = bundle.size
    ids = bundle.node_ids
    z_rows = cache.z[ids]
    hf_rows = cache.hf[ids]
    coef_s = (1.0 - bundle.alpha - bundle.beta) / n

    # dL/dZ for the cross-entropy terms, honoring the log clamp exactly
    dldz = np.zeros_like(z_rows)
    picked = z_rows[np.arange(n), bundle.hard_labels]
    live = picked > LOG_CLAMP
    dldz[np.arange(n)[live], bundle.hard_labels[live]] -= coef_s / picked[live]
    if bundle.teacher_probs is not None and bundle.alpha > 0:
        coef_t = bundle.alpha / n
        live_t = z_rows > LOG_CLAMP
        dldz -= np.where(live_t, coef_t * bundle.teacher_probs / np.maximum(z_rows, LOG_CLAMP), 0.0)

    dhf_rows = _softmax_vjp(z_rows, dldz)
    if bundle.rationale_targets is not None and bundle.beta > 0:
        c = hf_rows.shape[1]
        dhf_rows = dhf_rows + (2.0 * bundle.beta / (n * c)) * (hf_rows - bundle.rationale_targets)

    dhf = np.zeros_like(cache.hf)
    dhf[ids] = dhf_rows

    dw1 = cache.s1.T @ dhf
    db1 = dhf.sum(axis=0)
    ds1 = dhf @ model.w1.T
    dh1d = cache.a_hat.T @ ds1
    dh1 = dh1d * cache.drop_mask
    dp0 = dh1 * (cache.p0 > 0.0)
    dw0 = cache.s0.T @ dp0
    db0 = dp0.sum(axis=0)
    return Grads(w0=dw0, b0=db0, w1=dw1, b1=db1)


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4       # L2 on w0/w1 only
    epochs: int = 300
    patience: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class _Adam:
    def __init__(self, model: GcnModel, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(getattr(model, k)) for k in ("w0", "b0", "w1", "b1")}
        self.v = {k: np.zeros_like(getattr(model, k)) for k in ("w0", "b0", "w1", "b1")}

    def step(self, model: GcnModel, grads: Grads):
        self.t += 1
        c = self.cfg
        for k in ("w0", "b0", "w1", "b1"):
            g = getattr(grads, k)
            if c.weight_decay > 0 and k in ("w0", "w1"):
                g = g + c.weight_decay * getattr(model, k)
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            m_hat = self.m[k] / (1 - c.beta1 ** self.t)
            v_hat = self.v[k] / (1 - c.beta2 ** self.t)
            getattr(model, k)[...] -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class HistoryRow:
    epoch: int
    loss_total: float
    loss_s: float
    loss_t: float
    loss_f: float
    val_acc: float


def accuracy(z: np.ndarray, node_ids, labels) -> float:
    """Fraction of argmax predictions matching labels (argmax ties resolve
    to the lowest class index)."""
    ids = np.asarray(list(node_ids), dtype=np.int64)
    if len(ids) == 0:
        return 0.0
    pred = z[ids].argmax(axis=1)
    return float(np.mean(pred == np.asarray(list(labels), dtype=np.int64)))


def train(
    model: GcnModel,
    g: TextGraph,
    bundle: TrainBundle,
    opt: OptimizerConfig | None = None,
    *,
    val_ids=None,
    val_labels=None,
    seed: int = 0,
    a_hat: sp.csr_matrix | None = None,
) -> tuple[GcnModel, list[HistoryRow]]:
    """Full-batch Adam with early stopping on validation accuracy.

    Returns the best-on-validation parameters (final parameters when no
    validation set is given).  Deterministic for a fixed seed: the only
    randomness is the dropout stream drawn from default_rng(seed).
    """
    opt = opt or OptimizerConfig()
    if a_hat is None:
        a_hat = normalized_adjacency(g)
    x = g.embeddings
    model = model.copy()         # never mutate the caller's parameters
    drop_rng = np.random.default_rng(seed)
    adam = _Adam(model, opt)
    history: list[HistoryRow] = []
    use_val = val_ids is not None and len(val_ids) > 0
    best_val = -1.0
    best_params = model.copy()
    best_epoch = -1

    for epoch in range(opt.epochs):
        hf, z, cache = forward(model, a_hat, x, mode="train", rng=drop_rng)
        total, l_s, l_t, l_f = bundle_losses(hf, z, bundle)
        if not np.isfinite(total):
            raise Diverged(f"non-finite loss at epoch {epoch}")
        grads = backward(model, cache, bundle)
        adam.step(model, grads)

        if use_val:
            _, z_eval, _ = forward(model, a_hat, x, mode="eval")
            val_acc = accuracy(z_eval, val_ids, val_labels)
        else:
            val_acc = float("nan")
        history.append(HistoryRow(epoch, total, l_s, l_t, l_f, val_acc))

        if use_val:
            if val_acc > best_val:
                best_val = val_acc
                best_params = model.copy()
                best_epoch = epoch
            elif epoch - best_epoch > opt.patience:
                break

    if use_val and best_epoch >= 0:
        return best_params, history
    return model, history


def save_checkpoint(model: GcnModel, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u32 d_emb, u32 d_hidden, u32 C,
    then w0, b0, w1, b1 as row-major f32le."""
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, model.d_emb,
                             model.d_hidden, model.num_classes))
        for p in (model.w0, model.b0, model.w1, model.b1):
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> GcnModel:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ShapeMismatch("not a model checkpoint (bad magic)")
    version, d_emb, d_hidden, c = struct.unpack("<IIII", blob[4:20])
    if version != CHECKPOINT_VERSION:
        raise ShapeMismatch(f"unsupported checkpoint version {version}")
    sizes = [d_emb * d_hidden, d_hidden, d_hidden * c, c]
    expected = 20 + 4 * sum(sizes)
    if len(blob) != expected:
        raise ShapeMismatch(f"checkpoint is {len(blob)} bytes, expected {expected}")
    offset = 20
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
                      .astype(np.float64))
        offset += count * 4
    return GcnModel(
        w0=arrays[0].reshape(d_emb, d_hidden),
        b0=arrays[1],
        w1=arrays[2].reshape(d_hidden, c),
        b1=arrays[3],
    )


def write_history_csv(history: list[HistoryRow], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        fh.write("epoch,loss_total,loss_S,loss_T,loss_F,val_acc\n")
        for row in history:
            fh.write(
                f"{row.epoch},{row.loss_total:.10g},{row.loss_s:.10g},"
                f"{row.loss_t:.10g},{row.loss_f:.10g},{row.val_acc:.10g}\n"
            )
