"""Exact inference by enumeration, plus a single-site Gibbs sampler.

Enumeration is guarded at V**n <= 10**7 states. Assignments are visited in
lexicographic order (location 0 most significant), which fixes tie-breaks.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .types import LogitField, MarginalField, MRFParams, TokenGrid, ValidationError, check_compatible

MAX_STATES = 10**7
_CHUNK_CELLS = 1 << 22


class InstanceTooLarge(ValidationError):
    pass


def _guard(params: MRFParams) -> int:
    n, v = params.geometry.n, params.vocab.size_v
    # compare in log space to avoid building huge ints for big grids
    if n * np.log10(v) > np.log10(MAX_STATES) + 1e-12:
        raise InstanceTooLarge(f"instance too large: {v}**{n} states exceeds {MAX_STATES}")
    return v**n


def _chunks(params: MRFParams, logits: LogitField):
    """Yield (assignments, energies) over all states in lexicographic order."""
    check_compatible(params.geometry, params.vocab, logits)
    total = _guard(params)
    n, v = params.geometry.n, params.vocab.size_v
    step = max(1, _CHUNK_CELLS // (n * n))
    f, ws, wl = logits.values, params.w_spatial, params.w_label
    radix = v ** np.arange(n - 1, -1, -1, dtype=np.int64)
    for start in range(0, total, step):
        codes = np.arange(start, min(start + step, total), dtype=np.int64)
        xs = (codes[:, None] // radix[None, :]) % v
        unary = -f[np.arange(n)[None, :], xs].sum(axis=1)
        pair = -(wl[xs[:, :, None], xs[:, None, :]] * ws[None]).sum(axis=(1, 2))
        yield xs, unary + pair


def enumerate_joint(params: MRFParams, logits: LogitField) -> tuple[np.ndarray, np.ndarray]:
    """All assignments (states x n) and their exact probabilities."""
    xs, es = zip(*_chunks(params, logits))
    xs, es = np.concatenate(xs), np.concatenate(es)
    log_z = logsumexp(-es)
    return xs, np.exp(-es - log_z)


def enumerate_partition(params: MRFParams, logits: LogitField) -> float:
    """log Z by log-sum-exp over every assignment."""
    parts = [logsumexp(-e) for _, e in _chunks(params, logits)]
    return float(logsumexp(parts))


def exact_marginals(params: MRFParams, logits: LogitField) -> MarginalField:
    n, v = params.geometry.n, params.vocab.size_v
    xs, p = enumerate_joint(params, logits)
    out = np.zeros((n, v))
    for i in range(n):
        out[i] = np.bincount(xs[:, i], weights=p, minlength=v)
    out /= out.sum(axis=1, keepdims=True)
    return MarginalField(params.geometry, params.vocab, out)


def exact_map(params: MRFParams, logits: LogitField) -> TokenGrid:
    best_e, best_x = np.inf, None
    for xs, es in _chunks(params, logits):
        j = int(np.argmin(es))
        if es[j] < best_e:
            best_e, best_x = es[j], xs[j]
    return TokenGrid(params.geometry, params.vocab, best_x)


def gibbs_sample_array(
    params: MRFParams, logits: LogitField, burn_in: int, num_samples: int, seed: int, chains: int = 1
) -> np.ndarray:
    """Gibbs samples as a (num_samples, n) label array.

    Each sweep updates sites in row-major order from their exact conditional
    (both ordered pairs touching the site plus its self term). With several
    chains, sweeps run in lockstep and samples are interleaved chain-major
    per sweep; ``num_samples`` must then be a multiple of ``chains``.
    """
    check_compatible(params.geometry, params.vocab, logits)
    if num_samples % chains:
        raise ValueError("num_samples must be a multiple of chains")
    n, v = params.geometry.n, params.vocab.size_v
    rng = np.random.default_rng(seed)
    f, ws, wl = logits.values, params.w_spatial, params.w_label
    diag_wl = np.diag(wl)
    x = rng.integers(0, v, size=(chains, n))
    rows = np.arange(chains)
    sweeps = burn_in + num_samples // chains
    out = np.empty((num_samples, n), dtype=np.int64)
    for sweep in range(sweeps):
        u = rng.random((n, chains))
        for i in range(n):
            xi = x[:, i]
            # sum_j W_s[i,j] W_l[k, x_j] + W_s[j,i] W_l[x_j, k], then swap j=i terms for the self term
            field = wl[:, x] @ ws[i] + (wl[x, :] * ws[:, i][None, :, None]).sum(axis=1).T
            field -= ws[i, i] * (wl[:, xi] + wl[xi, :].T)
            field += ws[i, i] * diag_wl[:, None]
            logit = f[i][None, :] + field.T
            p = np.exp(logit - logit.max(axis=1, keepdims=True))
            cdf = np.cumsum(p, axis=1)
            x[:, i] = np.minimum((cdf < u[i][:, None] * cdf[:, -1:]).sum(axis=1), v - 1)
        if sweep >= burn_in:
            k = sweep - burn_in
            out[k * chains : (k + 1) * chains] = x[rows]
    return out


def gibbs_sample(
    params: MRFParams, logits: LogitField, burn_in: int, num_samples: int, seed: int, chains: int = 1
) -> list[TokenGrid]:
    arr = gibbs_sample_array(params, logits, burn_in, num_samples, seed, chains)
    return [TokenGrid(params.geometry, params.vocab, row) for row in arr]
