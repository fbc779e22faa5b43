"""Learning MRF weights by back-propagating through unrolled mean-field inference.

Two losses:

* masked-token pretraining: observed tokens become strong one-hot unaries,
  hidden positions get flat unaries, and the loss is cross-entropy of the
  inferred marginals at the hidden positions;
* distillation: inference starts from a teacher's intermediate logits and is
  scored against the teacher's final committed tokens.

Both are optimized with ADAM. Everything here runs on numpy in float64.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mrf import log_softmax, mean_field_forward
from .types import (
    GridGeometry,
    LogitField,
    MaskedTokenGrid,
    MRFParams,
    TokenGrid,
    ValidationError,
    VocabSpec,
    check_compatible,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "distill")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    num_iterations_mf: int = 5
    mask_fraction: float = 0.20
    unary_strength_kappa: float = 10.0
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if not self.adam_epsilon > 0:
            raise ValidationError("adam_epsilon must be positive")
        if self.batch_size < 1 or self.num_iterations_mf < 1:
            raise ValidationError("batch_size and num_iterations_mf must be positive")
        if not 0 < self.mask_fraction < 1:
            raise ValidationError("mask_fraction must lie in (0, 1)")
        if not self.unary_strength_kappa > 0:
            raise ValidationError("unary_strength_kappa must be positive")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")


@dataclass(frozen=True, eq=False)
class GradientBundle:
    d_w_spatial: np.ndarray
    d_w_label: np.ndarray
    d_logits: np.ndarray | None = None

    def __post_init__(self):
        for name in ("d_w_spatial", "d_w_label", "d_logits"):
            g = getattr(self, name)
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")


@dataclass
class AdamState:
    m_spatial: np.ndarray
    v_spatial: np.ndarray
    m_label: np.ndarray
    v_label: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MRFParams) -> AdamState:
        z = np.zeros_like
        return cls(z(params.w_spatial), z(params.w_spatial), z(params.w_label), z(params.w_label))


@dataclass(frozen=True, eq=False)
class DistillExample:
    """Teacher logits at the cut step (committed rows already pinned) and its final tokens."""

    logits: LogitField
    target: TokenGrid


@dataclass
class MetricsLog:
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)

    def append(self, step: int, stage: str, loss: float, wallclock_ms: float):
        self.rows.append((step, stage, float(loss), float(wallclock_ms)))

    def to_tsv(self) -> str:
        return "".join(f"{s}\t{st}\t{loss:.9g}\t{ms:.3f}\n" for s, st, loss, ms in self.rows)

    def write(self, path, append=True):
        with open(Path(path), "a" if append else "w") as fh:
            fh.write(self.to_tsv())

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])


def init_params(geometry: GridGeometry, vocab: VocabSpec, seed: int, label_eps: float = 0.1, spatial_std: float = 0.01):
    """Small identity label matrix and tiny random spatial weights with a zero diagonal.

    All-zero weights are a saddle: with W_label = 0 no gradient reaches W_spatial.
    """
    rng = np.random.default_rng(seed)
    ws = rng.normal(0.0, spatial_std, size=(geometry.n, geometry.n))
    np.fill_diagonal(ws, 0.0)
    return MRFParams(ws, label_eps * np.eye(vocab.size_v), geometry, vocab)


def _by_location(x):
    """(..., n, V) -> (n, batch*V) so a batch reduces inside one matmul."""
    return np.moveaxis(x, -2, 0).reshape(x.shape[-2], -1)


def _softmax_backward(q, g):
    return q * (g - (g * q).sum(axis=-1, keepdims=True))


def _unrolled_backward(w_spatial, w_label, trace, grad_q=None, grad_z=None):
    """Reverse pass of ``mean_field_forward``; ``f`` may carry leading batch dims.

    The upstream gradient enters either on the final marginals (``grad_q``)
    or on the final pre-softmax field (``grad_z``). Returns per-matrix grads
    summed over the batch and the gradient on the logits.
    """
    qs, mixed = trace["qs"], trace["mixed"]
    T = len(mixed)
    v = w_label.shape[0]
    d_ws = np.zeros_like(w_spatial)
    d_wl = np.zeros_like(w_label)
    if grad_z is None:
        grad_z = _softmax_backward(qs[T], grad_q)
    d_f = np.zeros_like(grad_z)
    dz = grad_z
    for t in range(T, 0, -1):
        d_f += dz
        a, q_prev = mixed[t - 1], qs[t - 1]
        # z = a @ W_label^T + f ;  a = W_spatial @ q_prev
        d_wl += dz.reshape(-1, v).T @ a.reshape(-1, v)
        da = dz @ w_label
        d_ws += _by_location(da) @ _by_location(q_prev).T
        g = np.matmul(w_spatial.T, da)
        dz = _softmax_backward(q_prev, g)
    d_f += dz
    return d_ws, d_wl, d_f


def mean_field_backward(
    params: MRFParams, logits: LogitField, num_iterations: int, loss_grad_on_Q: np.ndarray
) -> GradientBundle:
    """Exact reverse-mode gradients through ``num_iterations`` unrolled mean-field steps."""
    check_compatible(params.geometry, params.vocab, logits)
    g = np.asarray(loss_grad_on_Q, dtype=np.float64)
    if g.shape != logits.values.shape:
        raise ValidationError(f"dimension mismatch: loss gradient shape {g.shape}, expected {logits.values.shape}")
    if not np.all(np.isfinite(g)):
        raise ValidationError("non-finite entry in loss gradient")
    _, trace = mean_field_forward(params.w_spatial, params.w_label, logits.values, num_iterations, keep=True)
    d_ws, d_wl, d_f = _unrolled_backward(params.w_spatial, params.w_label, trace, grad_q=g)
    return GradientBundle(d_ws, d_wl, d_f)


def pinned_unaries(labels: np.ndarray, observed: np.ndarray, vocab_size: int, kappa: float) -> np.ndarray:
    """kappa-strength one-hot rows at observed positions, zero rows elsewhere."""
    labels = np.asarray(labels)
    f = np.zeros(labels.shape + (vocab_size,))
    obs = np.asarray(observed, dtype=bool)
    np.put_along_axis(f, labels[..., None], np.where(obs, kappa, 0.0)[..., None], axis=-1)
    return f


def pin_committed(logits: LogitField, grid: TokenGrid, committed: np.ndarray, kappa: float) -> LogitField:
    """Replace logit rows of committed positions with kappa one-hot rows on their labels."""
    values = np.array(logits.values)
    committed = np.asarray(committed, dtype=bool)
    values[committed] = pinned_unaries(grid.labels[committed], np.ones(committed.sum(), bool), logits.vocab.size_v, kappa)
    return LogitField(logits.geometry, logits.vocab, values)


def _cross_entropy(ws, wl, f, targets, weight, num_iterations):
    """Weighted mean cross-entropy of final marginals against ``targets``, with grads.

    ``f`` is (B, n, V), ``targets`` (B, n) and ``weight`` (B, n) holds each
    position's share of the loss (rows of zeros are ignored).
    """
    _, trace = mean_field_forward(ws, wl, f, num_iterations, keep=True)
    q = trace["qs"][-1]
    # final pre-softmax field, recomputed for a numerically stable log
    z = f if num_iterations == 0 else np.matmul(trace["mixed"][-1], wl.T) + f
    logq = log_softmax(z)
    nll = -np.take_along_axis(logq, targets[..., None], axis=-1)[..., 0]
    loss = float((weight * nll).sum())
    onehot = np.zeros_like(q)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    grad_z = weight[..., None] * (q - onehot)
    d_ws, d_wl, d_f = _unrolled_backward(ws, wl, trace, grad_z=grad_z)
    return loss, d_ws, d_wl, d_f


def _pretrain_batch(params: MRFParams, labels, masks, config: TrainConfig):
    labels = np.asarray(labels)
    masks = np.asarray(masks, dtype=bool)
    counts = masks.sum(axis=1)
    if np.any(counts == 0):
        raise ValidationError("no masked positions: pretraining loss undefined")
    f = pinned_unaries(labels, ~masks, params.vocab.size_v, config.unary_strength_kappa)
    weight = masks / counts[:, None] / len(labels)
    return _cross_entropy(params.w_spatial, params.w_label, f, labels, weight, config.num_iterations_mf)


def pretrain_loss(params: MRFParams, masked: MaskedTokenGrid, config: TrainConfig):
    """Mean cross-entropy at hidden positions, observed tokens pinned with strength kappa."""
    check_compatible(params.geometry, params.vocab, masked)
    loss, d_ws, d_wl, d_f = _pretrain_batch(params, masked.grid.labels[None], masked.mask[None], config)
    return loss, GradientBundle(d_ws, d_wl, d_f[0])


def _distill_batch(params: MRFParams, f, targets, config: TrainConfig):
    f = np.asarray(f, dtype=np.float64)
    targets = np.asarray(targets)
    weight = np.full(targets.shape, 1.0 / targets.size)
    return _cross_entropy(params.w_spatial, params.w_label, f, targets, weight, config.num_iterations_mf)


def distill_loss(params: MRFParams, teacher_logits_at_k: LogitField, teacher_final: TokenGrid, config: TrainConfig):
    """KL(onehot(final) || Q) averaged over positions, i.e. mean cross-entropy."""
    check_compatible(params.geometry, params.vocab, teacher_logits_at_k, teacher_final)
    loss, d_ws, d_wl, d_f = _distill_batch(
        params, teacher_logits_at_k.values[None], teacher_final.labels[None], config
    )
    return loss, GradientBundle(d_ws, d_wl, d_f[0])


def adam_step(params: MRFParams, grads: GradientBundle, state: AdamState, config: TrainConfig):
    """One bias-corrected ADAM update of both weight matrices; returns new params and state."""
    if state.m_spatial.shape != params.w_spatial.shape or state.m_label.shape != params.w_label.shape:
        raise ValidationError("dimension mismatch: optimizer state does not match params")
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    t = state.step + 1
    new = {}
    moments = {}
    for key, w, g, m, v in (
        ("spatial", params.w_spatial, grads.d_w_spatial, state.m_spatial, state.v_spatial),
        ("label", params.w_label, grads.d_w_label, state.m_label, state.v_label),
    ):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        upd = lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(upd)):
            raise FloatingPointError(f"non-finite ADAM update for {key} weights")
        new[key] = w - upd
        moments[key] = (m, v)
    state = AdamState(*moments["spatial"], *moments["label"], step=t)
    return params.replace(new["spatial"], new["label"]), state


def sample_mask(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Exactly floor(fraction * n) hidden positions, drawn without replacement."""
    count = int(np.floor(fraction * n))
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=count, replace=False)] = True
    return mask


def train(
    corpus: Sequence,
    stage: str,
    config: TrainConfig,
    teacher=None,
    schedule=None,
    init: MRFParams | None = None,
    metrics: MetricsLog | None = None,
    temperature: float = 1.0,
) -> tuple[MRFParams, MetricsLog]:
    """Minibatch ADAM training for ``config.steps`` steps.

    ``corpus`` holds TokenGrids (or (grid, condition) pairs) for pretraining.
    For distillation it holds DistillExamples, or (grid, condition) pairs
    from which teacher traces are generated with ``teacher`` and ``schedule``.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if len(corpus) == 0:
        raise ValidationError("empty corpus")
    metrics = MetricsLog() if metrics is None else metrics
    rng = np.random.default_rng(config.seed)

    if stage == "pretrain":
        grids = [c[0] if isinstance(c, tuple) else c for c in corpus]
        geometry, vocab = grids[0].geometry, grids[0].vocab
        data = np.stack([g.labels for g in grids])
    else:
        if not isinstance(corpus[0], DistillExample):
            if teacher is None or schedule is None:
                raise ValidationError("distill stage requires a teacher and a decode schedule")
            from .teacher import build_distill_set

            corpus = build_distill_set(
                teacher, [c[1] for c in corpus], schedule, temperature, config.seed, config.unary_strength_kappa
            )
        geometry, vocab = corpus[0].logits.geometry, corpus[0].logits.vocab
        data_f = np.stack([ex.logits.values for ex in corpus])
        data_t = np.stack([ex.target.labels for ex in corpus])

    params = init if init is not None else init_params(geometry, vocab, config.seed)
    check_compatible(geometry, vocab, params)
    state = AdamState.zeros_like(params)
    count = len(corpus)
    t0 = time.perf_counter()
    for step in range(config.steps):
        idx = rng.integers(0, count, size=config.batch_size)
        if stage == "pretrain":
            masks = np.stack([sample_mask(geometry.n, config.mask_fraction, rng) for _ in idx])
            loss, d_ws, d_wl, _ = _pretrain_batch(params, data[idx], masks, config)
        else:
            loss, d_ws, d_wl, _ = _distill_batch(params, data_f[idx], data_t[idx], config)
        params, state = adam_step(params, GradientBundle(d_ws, d_wl), state, config)
        metrics.append(step, stage, loss, (time.perf_counter() - t0) * 1e3)
        if step % 200 == 0 or step == config.steps - 1:
            log.info("%s step %d loss %.5f", stage, step, loss)
    return params, metrics


def masked_accuracy(params: MRFParams, grids: Sequence[TokenGrid], config: TrainConfig, seed: int) -> float:
    """Fraction of hidden tokens recovered by argmax of the inferred marginals."""
    rng = np.random.default_rng(seed)
    labels = np.stack([g.labels for g in grids])
    masks = np.stack([sample_mask(params.geometry.n, config.mask_fraction, rng) for _ in grids])
    f = pinned_unaries(labels, ~masks, params.vocab.size_v, config.unary_strength_kappa)
    q, _ = mean_field_forward(params.w_spatial, params.w_label, f, config.num_iterations_mf)
    pred = q.argmax(axis=-1)
    return float((pred[masks] == labels[masks]).mean())


def save_params(path, params: MRFParams, meta: dict | None = None):
    from . import mgtf

    meta = dict(meta or {})
    meta.update(height=params.geometry.height, width=params.geometry.width, vocab=params.vocab.size_v)
    mgtf.write(path, {"w_spatial": params.w_spatial, "w_label": params.w_label}, meta)


def load_params(path) -> MRFParams:
    from . import mgtf

    tensors, meta = mgtf.read(path)
    if meta is None or "w_spatial" not in tensors or "w_label" not in tensors:
        raise mgtf.MGTFError("malformed file: missing MRF tensors or metadata")
    return MRFParams(
        tensors["w_spatial"].astype(np.float64),
        tensors["w_label"].astype(np.float64),
        GridGeometry(meta["height"], meta["width"]),
        VocabSpec(meta["vocab"]),
    )
