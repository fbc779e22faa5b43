"""Oracle-backed property checks shared by the ``verify`` subcommand and the acceptance tests.

Each check draws its instances from a fixed seed and returns a CheckResult
carrying the measured quantity next to its threshold.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle
from .datagen import CorpusSpec, generate
from .mrf import map_decode, mean_field_infer, softmax, variational_free_energy
from .train import TrainConfig, mean_field_backward, masked_accuracy, train
from .types import GridGeometry, LogitField, MRFParams, VocabSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _instance(rng, h, w, v, weight_std, logit_std=1.0):
    geo, voc = GridGeometry(h, w), VocabSpec(v)
    ws = rng.normal(0, weight_std, (geo.n, geo.n))
    wl = rng.normal(0, weight_std, (v, v))
    f = rng.normal(0, logit_std, (geo.n, v))
    return MRFParams(ws, wl, geo, voc), LogitField(geo, voc, f)


def zero_weight_fixed_point(seed: int = 0, fields: int = 100, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    geo, voc = GridGeometry(4, 4), VocabSpec(8)
    zero = MRFParams.zeros(geo, voc)
    worst = 0.0
    for _ in range(fields):
        f = LogitField(geo, voc, rng.normal(0, 3, (16, 8)))
        ref = softmax(np.array(f.values))
        for t in (0, 1, 5, 10):
            worst = max(worst, float(np.abs(mean_field_infer(zero, f, t).values - ref).max()))
    return CheckResult("zero-weight fixed point", worst <= tol, f"max deviation {worst:.2e} (tol {tol:g})")


def gradient_check(
    seed: int = 0, instances: int = 20, h: float = 1e-3, rel_tol: float = 1e-4, abs_tol: float = 1e-6
) -> CheckResult:
    """Central differences of <Q_T, G> against the hand-written backward pass."""
    rng = np.random.default_rng(seed)
    worst_rel, violations, entries = 0.0, 0, 0
    for i in range(instances):
        side = (2, 3)[i % 2]
        v = (3, 4)[(i // 2) % 2]
        iters = 1 + i % 3
        params, logits = _instance(rng, side, side, v, 0.5)
        upstream = rng.normal(size=(side * side, v))
        geo, voc = params.geometry, params.vocab

        def objective(ws, wl, f):
            q = mean_field_infer(MRFParams(ws, wl, geo, voc), LogitField(geo, voc, f), iters).values
            return float((q * upstream).sum())

        grads = mean_field_backward(params, logits, iters, upstream)
        base = [np.array(params.w_spatial), np.array(params.w_label), np.array(logits.values)]
        for which, analytic in enumerate((grads.d_w_spatial, grads.d_w_label, grads.d_logits)):
            for idx in np.ndindex(analytic.shape):
                up = [a.copy() for a in base]
                dn = [a.copy() for a in base]
                up[which][idx] += h
                dn[which][idx] -= h
                ref = (objective(*up) - objective(*dn)) / (2 * h)
                err = abs(analytic[idx] - ref)
                entries += 1
                if abs(ref) < 1e-6:
                    violations += err > abs_tol
                else:
                    worst_rel = max(worst_rel, err / abs(ref))
                    violations += err / abs(ref) > rel_tol
    return CheckResult(
        "backward pass vs finite differences",
        violations == 0,
        f"{entries} entries, {violations} out of tolerance, worst relative error {worst_rel:.2e}",
    )


def free_energy_descent(seed: int = 0, instances: int = 100, required: int = 90) -> CheckResult:
    rng = np.random.default_rng(seed)
    good = 0
    for _ in range(instances):
        params, logits = _instance(rng, 2, 2, 3, 0.1)
        after = variational_free_energy(params, logits, mean_field_infer(params, logits, 10))
        before = variational_free_energy(params, logits, mean_field_infer(params, logits, 0))
        good += after <= before + 1e-9
    return CheckResult(
        "free energy decreases under mean field",
        good >= required,
        f"{good}/{instances} instances (need {required})",
    )


def mean_field_vs_exact(seed: int = 0, instances: int = 100, tol: float = 0.05, map_rate: float = 0.95) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        params, logits = _instance(rng, 2, 2, 3, 0.01)
        q = mean_field_infer(params, logits, 10).values
        worst = max(worst, float(np.abs(q - oracle.exact_marginals(params, logits).values).max()))
    agree = 0
    for _ in range(instances):
        params, logits = _instance(rng, 2, 2, 3, 0.01)
        f = np.array(logits.values)
        f[np.arange(4), rng.integers(0, 3, 4)] += 5.0
        logits = LogitField(logits.geometry, logits.vocab, f)
        agree += map_decode(mean_field_infer(params, logits, 10)) == oracle.exact_map(params, logits)
    ok = worst <= tol and agree >= map_rate * instances
    return CheckResult(
        "mean field vs exact marginals and MAP",
        ok,
        f"max marginal error {worst:.4f} (tol {tol}), MAP agreement {agree}/{instances}",
    )


def oracle_consistency(seed: int = 0, samples: int = 100_000, tol: float = 0.02) -> CheckResult:
    """Enumeration normalizes, and Gibbs marginals converge to the exact ones."""
    rng = np.random.default_rng(seed)
    worst_norm, worst_gibbs = 0.0, 0.0
    for shape, std in (((2, 2, 3), 0.5), ((3, 3, 2), 0.3), ((2, 3, 2), 0.8)):
        params, logits = _instance(rng, *shape, std)
        _, p = oracle.enumerate_joint(params, logits)
        worst_norm = max(worst_norm, abs(float(p.sum()) - 1.0))
        draws = oracle.gibbs_sample_array(params, logits, 200, samples, int(rng.integers(2**31)), chains=500)
        v = params.vocab.size_v
        freq = np.stack([np.bincount(draws[:, i], minlength=v) for i in range(params.geometry.n)]) / samples
        worst_gibbs = max(worst_gibbs, float(np.abs(freq - oracle.exact_marginals(params, logits).values).max()))
    return CheckResult(
        "oracle self-consistency",
        worst_norm <= 1e-9 and worst_gibbs <= tol,
        f"normalization error {worst_norm:.1e}, Gibbs marginal error {worst_gibbs:.4f} (tol {tol})",
    )


def checkerboard_pretraining(seed: int = 0, steps: int = 2000, target: float = 0.90) -> CheckResult:
    geo, voc = GridGeometry(16, 16), VocabSpec(2)
    grids = [g for g, _ in generate(CorpusSpec("checkerboard", geo, voc, 64, seed=seed))]
    cfg = TrainConfig(steps=steps, seed=seed)
    params, _ = train(grids, "pretrain", cfg)
    acc = masked_accuracy(params, grids, cfg, seed=seed + 10**6)
    return CheckResult(
        "checkerboard pretraining", acc >= target, f"masked accuracy {acc:.3f} after {steps} steps (need {target})"
    )


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "A1": zero_weight_fixed_point,
    "A2": gradient_check,
    "A3": free_energy_descent,
    "A4": mean_field_vs_exact,
    "A7": checkerboard_pretraining,
    "A8": oracle_consistency,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    out = []
    for key, fn in CHECKS.items():
        t0 = time.perf_counter()
        res = fn(seed=seed)
        res = CheckResult(f"{key} {res.name}", res.passed, res.detail, time.perf_counter() - t0)
        log.info(res.line())
        out.append(res)
    return out
