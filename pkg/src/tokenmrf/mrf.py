"""Fully-connected token MRF: energy, parallel mean-field inference, MAP readout.

Energy of an assignment x over n locations and V labels::

    E(x) = sum_i -f_i(x_i) + sum_i sum_j -W_label[x_i, x_j] * W_spatial[i, j]

Both sums run over every ordered pair, self-pairs included.
"""

from __future__ import annotations

import numpy as np

from .types import (
    LogitField,
    MarginalField,
    MRFParams,
    TokenGrid,
    ValidationError,
    check_compatible,
)

DEFAULT_MF_ITERATIONS = 5


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def mean_field_forward(w_spatial, w_label, f, num_iterations, keep=False, dtype=np.float64):
    """Array-level mean-field loop; ``f`` is (..., n, V).

    Returns ``(q, trace)`` where ``trace`` is None unless ``keep``; then it
    holds ``qs`` (the T+1 marginals, qs[0] = softmax(f)) and ``mixed`` (the
    T spatially mixed fields W_spatial @ q) for the backward pass.
    """
    f = np.asarray(f, dtype=dtype)
    w_spatial = np.asarray(w_spatial, dtype=dtype)
    w_label = np.asarray(w_label, dtype=dtype)
    q = softmax(f)
    qs, mixed = ([q], []) if keep else (None, None)
    wl_t = w_label.T
    for _ in range(num_iterations):
        with np.errstate(over="ignore", invalid="ignore"):
            a = np.matmul(w_spatial, q)
            z = np.matmul(a, wl_t)
            z += f
        if not np.all(np.isfinite(z)):
            raise FloatingPointError("non-finite intermediate in mean-field inference")
        q = softmax(z)
        if keep:
            mixed.append(a)
            qs.append(q)
    return q, ({"qs": qs, "mixed": mixed} if keep else None)


def energy(params: MRFParams, logits: LogitField, assignment: TokenGrid) -> float:
    check_compatible(params.geometry, params.vocab, logits, assignment)
    x = assignment.labels
    unary = -logits.values[np.arange(x.size), x].sum()
    pairwise = -(params.w_label[np.ix_(x, x)] * params.w_spatial).sum()
    return float(unary + pairwise)


def log_unnormalized_prob(params: MRFParams, logits: LogitField, assignment: TokenGrid) -> float:
    """-E(x); the Gibbs probability is exp of this over the partition function."""
    return -energy(params, logits, assignment)


def mean_field_infer(
    params: MRFParams, logits: LogitField, num_iterations: int = DEFAULT_MF_ITERATIONS, dtype=np.float64
) -> MarginalField:
    """Parallel mean-field refinement of softmax(f).

    Each iteration mixes marginals across locations with W_spatial, across
    labels with W_label, adds the logits back and renormalizes per location.
    Zero iterations return softmax(f). ``dtype=np.float32`` trades accuracy
    for roughly 3x speed; the result is returned in float64 either way.
    """
    check_compatible(params.geometry, params.vocab, logits)
    if num_iterations < 0:
        raise ValidationError("num_iterations must be >= 0")
    q, _ = mean_field_forward(params.w_spatial, params.w_label, logits.values, num_iterations, dtype=dtype)
    if q.dtype != np.float64:
        q = q.astype(np.float64)
        q /= q.sum(axis=1, keepdims=True)
    return MarginalField(logits.geometry, logits.vocab, q)


def map_decode(q: MarginalField) -> TokenGrid:
    # np.argmax returns the first maximum: ties go to the lowest label
    return TokenGrid(q.geometry, q.vocab, np.argmax(q.values, axis=1))


def variational_free_energy(params: MRFParams, logits: LogitField, q: MarginalField) -> float:
    """E_Q[E(x)] - H(Q) for a factorized Q (equals KL(Q||P) - log Z)."""
    check_compatible(params.geometry, params.vocab, logits, q)
    qv = q.values
    unary = -(qv * logits.values).sum()
    pairwise = -(params.w_spatial * (qv @ params.w_label @ qv.T)).sum()
    nz = qv > 0
    neg_entropy = (qv[nz] * np.log(qv[nz])).sum()
    return float(unary + pairwise + neg_entropy)
