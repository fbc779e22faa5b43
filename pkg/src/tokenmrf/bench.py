"""Speed/quality harness: full decode vs early exit vs MRF fast-forward.

All three variants share the teacher's first k steps for a given seed; they
differ only in how the remaining positions are filled.
"""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import datagen
from .mrf import DEFAULT_MF_ITERATIONS, map_decode, mean_field_infer
from .teacher import DecodeTrace, TeacherModel, early_exit, progressive_decode
from .train import pin_committed
from .types import DecodeSchedule, MRFParams, TokenGrid, ValidationError

VARIANTS = ("full", "early-exit", "markovgen")
DEFAULT_KAPPA = 10.0
# fast-forward precision: weights are stored as float32 and teacher logits are float32 already
DECODE_DTYPE = np.float32


@dataclass
class Decoded:
    grid: TokenGrid
    trace: DecodeTrace
    total_ms: float
    teacher_ms: float
    mrf_ms: float = 0.0

    @property
    def bookkeeping_ms(self) -> float:
        return max(self.total_ms - self.teacher_ms - self.mrf_ms, 0.0)


def _fast_forward(trace: DecodeTrace, mrf_params: MRFParams, k: int, mf_iterations: int, kappa: float, dtype):
    labels, committed = trace.committed_through(k)
    partial = TokenGrid(trace.geometry, trace.vocab, labels)
    unaries = pin_committed(trace.steps[k - 1].logits, partial, committed, kappa)
    t0 = time.perf_counter()
    q = mean_field_infer(mrf_params, unaries, mf_iterations, dtype=dtype)
    mrf_ms = (time.perf_counter() - t0) * 1e3
    out = np.where(committed, labels, map_decode(q).labels)
    return TokenGrid(trace.geometry, trace.vocab, out), mrf_ms


def decode_variant(
    variant: str,
    teacher: TeacherModel,
    mrf_params: MRFParams | None,
    condition: int,
    schedule: DecodeSchedule,
    temperature: float,
    seed: int,
    mf_iterations: int = DEFAULT_MF_ITERATIONS,
    kappa: float = DEFAULT_KAPPA,
    dtype=DECODE_DTYPE,
) -> Decoded:
    """Run one variant end to end with its own wallclock."""
    k = schedule.cut_step
    t0 = time.perf_counter()
    if variant == "full":
        trace = progressive_decode(teacher, condition, schedule, temperature, seed)
        grid, mrf_ms = trace.final, 0.0
    elif variant == "early-exit":
        trace = progressive_decode(teacher, condition, schedule, temperature, seed, stop_after=k)
        grid, mrf_ms = early_exit(trace, k), 0.0
    elif variant == "markovgen":
        if mrf_params is None:
            raise ValidationError("markovgen variant needs MRF params")
        if k == schedule.total_steps:
            trace = progressive_decode(teacher, condition, schedule, temperature, seed)
            grid, mrf_ms = trace.final, 0.0
        else:
            trace = progressive_decode(teacher, condition, schedule, temperature, seed, stop_after=k)
            grid, mrf_ms = _fast_forward(trace, mrf_params, k, mf_iterations, kappa, dtype)
    else:
        raise ValidationError(f"unknown variant {variant!r}")
    total = (time.perf_counter() - t0) * 1e3
    return Decoded(grid, trace, total, sum(r.teacher_ms for r in trace.steps), mrf_ms)


def markovgen_decode(
    teacher: TeacherModel,
    mrf_params: MRFParams,
    condition: int,
    schedule: DecodeSchedule,
    mf_iterations: int = DEFAULT_MF_ITERATIONS,
    seed: int = 0,
    temperature: float = 0.0,
    kappa: float = DEFAULT_KAPPA,
    dtype=DECODE_DTYPE,
) -> TokenGrid:
    """Teacher steps 1..k, then one mean-field pass replaces steps k+1..n.

    Committed positions enter the MRF as kappa-pinned one-hot unaries and are
    copied through unchanged regardless of the MRF output.
    """
    if mrf_params.geometry != teacher.geometry or mrf_params.vocab != teacher.vocab:
        raise ValidationError("dimension mismatch between teacher and MRF")
    return decode_variant(
        "markovgen", teacher, mrf_params, condition, schedule, temperature, seed, mf_iterations, kappa, dtype
    ).grid


def disagreement(a: TokenGrid, b: TokenGrid) -> float:
    return float(np.mean(a.labels != b.labels))


def cooccurrence_distance(grids: Sequence[TokenGrid], reference: Sequence[TokenGrid], vocab_size: int) -> float:
    """Total-variation distance between adjacent-pair label histograms."""
    p = datagen.cooccurrence(grids, vocab_size)
    q = datagen.cooccurrence(reference, vocab_size)
    return 0.5 * float(np.abs(p - q).sum())


@dataclass
class VariantStats:
    name: str
    times_ms: list[float] = field(default_factory=list)
    teacher_ms: list[float] = field(default_factory=list)
    mrf_ms: list[float] = field(default_factory=list)
    bookkeeping_ms: list[float] = field(default_factory=list)
    step_ms: list[float] = field(default_factory=list)
    grids: list[TokenGrid] = field(default_factory=list)
    disagreement: float = 0.0
    cooccurrence_tv: float = 0.0

    def summary(self) -> dict:
        med = statistics.median
        return {
            "mean_ms": statistics.fmean(self.times_ms),
            "median_ms": med(self.times_ms),
            "teacher_ms": med(self.teacher_ms),
            "mrf_ms": med(self.mrf_ms),
            "bookkeeping_ms": med(self.bookkeeping_ms),
            "teacher_step_ms": med(self.step_ms) if self.step_ms else None,
            "decodes_timed": len(self.times_ms),
            "disagreement_vs_full": self.disagreement,
            "cooccurrence_tv_vs_full": self.cooccurrence_tv,
        }


@dataclass
class BenchReport:
    variants: dict[str, VariantStats]
    config: dict
    mrf_single_ms: float | None = None
    failures: list[str] = field(default_factory=list)

    def speedup(self, variant: str) -> float | None:
        if "full" not in self.variants or variant == "full" or variant not in self.variants:
            return None
        return statistics.median(self.variants["full"].times_ms) / statistics.median(self.variants[variant].times_ms)

    def teacher_step_ms(self) -> float:
        steps = [s for v in self.variants.values() for s in v.step_ms]
        return statistics.median(steps)

    def to_dict(self) -> dict:
        out = {
            "machine": {"python": platform.python_version(), "platform": platform.platform()},
            "config": self.config,
            "variants": {},
            "mrf_inference_ms": self.mrf_single_ms,
            "teacher_step_ms": self.teacher_step_ms(),
            "failures": self.failures,
        }
        for name, st in self.variants.items():
            d = st.summary()
            sp = self.speedup(name)
            if sp is not None:
                d["speedup_vs_full"] = sp
            out["variants"][name] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        cols = ["variant", "median_ms", "mean_ms", "teacher_ms", "mrf_ms", "bookkeep_ms", "speedup", "disagree", "cooc_tv"]
        rows = [cols]
        for name, st in self.variants.items():
            s = st.summary()
            sp = self.speedup(name)
            rows.append(
                [
                    name,
                    f"{s['median_ms']:.2f}",
                    f"{s['mean_ms']:.2f}",
                    f"{s['teacher_ms']:.2f}",
                    f"{s['mrf_ms']:.3f}",
                    f"{s['bookkeeping_ms']:.2f}",
                    "-" if sp is None else f"{sp:.2f}x",
                    f"{st.disagreement:.4f}",
                    f"{st.cooccurrence_tv:.4f}",
                ]
            )
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def time_mrf_inference(
    mrf_params: MRFParams, logits, mf_iterations: int, repetitions: int = 20, dtype=DECODE_DTYPE
) -> float:
    """Median wallclock (ms) of one mean-field inference, first call discarded."""
    mean_field_infer(mrf_params, logits, mf_iterations, dtype=dtype)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        mean_field_infer(mrf_params, logits, mf_iterations, dtype=dtype)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def run_benchmark(
    teacher: TeacherModel,
    mrf_params: MRFParams | None,
    conditions: Sequence[int],
    schedule: DecodeSchedule,
    variants: Sequence[str] = VARIANTS,
    repetitions: int = 3,
    seed: int = 0,
    temperature: float = 0.0,
    mf_iterations: int = DEFAULT_MF_ITERATIONS,
    kappa: float = DEFAULT_KAPPA,
    dtype=DECODE_DTYPE,
) -> BenchReport:
    """Time and score each variant; repetition 0 is warmup and excluded from timing stats.

    Decode ``j`` of every variant uses seed ``seed + j``. Quality is measured
    against the full decode at the same seed; if ``full`` is not among the
    variants it is still decoded once per seed as the reference.
    """
    if repetitions < 3:
        raise ValidationError("repetitions must be >= 3")
    variants = list(dict.fromkeys(variants))
    for v in variants:
        if v not in VARIANTS:
            raise ValidationError(f"unknown variant {v!r}")
    stats = {v: VariantStats(v) for v in variants}
    failures: list[str] = []
    reference: list[TokenGrid] = []
    k = schedule.cut_step
    for rep in range(repetitions):
        for j, cond in enumerate(conditions):
            s = seed + j
            results = {}
            for v in variants:
                results[v] = decode_variant(
                    v, teacher, mrf_params, cond, schedule, temperature, s, mf_iterations, kappa, dtype
                )
            if rep == 0:
                ref = results["full"] if "full" in results else decode_variant(
                    "full", teacher, None, cond, schedule, temperature, s
                )
                reference.append(ref.grid)
                _check_invariants(results, ref, k, failures, j)
                continue
            for v, r in results.items():
                st = stats[v]
                st.times_ms.append(r.total_ms)
                st.teacher_ms.append(r.teacher_ms)
                st.mrf_ms.append(r.mrf_ms)
                st.bookkeeping_ms.append(r.bookkeeping_ms)
                st.step_ms.extend(rec.teacher_ms for rec in r.trace.steps)
                if rep == repetitions - 1:
                    st.grids.append(r.grid)
    vsize = teacher.vocab.size_v
    for st in stats.values():
        st.disagreement = float(np.mean([disagreement(g, r) for g, r in zip(st.grids, reference)]))
        st.cooccurrence_tv = cooccurrence_distance(st.grids, reference, vsize)
        if any(t <= 0 for t in st.times_ms):
            failures.append(f"{st.name}: non-positive timing")
    if "full" in stats and stats["full"].disagreement != 0.0:
        failures.append("full decode disagrees with itself")
    mrf_single = None
    if mrf_params is not None and "markovgen" in stats and stats["markovgen"].grids:
        probe = progressive_decode(teacher, conditions[0], schedule, temperature, seed, stop_after=k)
        mrf_single = time_mrf_inference(mrf_params, probe.steps[-1].logits, mf_iterations, dtype=dtype)
    config = {
        "schedule": {
            "total_steps": schedule.total_steps,
            "cut_step": k,
            "commits_per_step": list(schedule.commits_per_step),
        },
        "variants": variants,
        "repetitions": repetitions,
        "decodes_per_repetition": len(conditions),
        "seed": seed,
        "temperature": temperature,
        "mf_iterations": mf_iterations,
        "kappa": kappa,
        "mf_dtype": np.dtype(dtype).name,
    }
    return BenchReport(stats, config, mrf_single, failures)


def _check_invariants(results: dict, ref: Decoded, k: int, failures: list[str], j: int):
    ref_labels, ref_committed = ref.trace.committed_through(k)
    for v, r in results.items():
        labels, committed = r.trace.committed_through(min(k, len(r.trace.steps)))
        if not (np.array_equal(committed, ref_committed) and np.array_equal(labels, ref_labels)):
            failures.append(f"decode {j}: {v} trace diverges from full decode before step {k}")
        if not np.array_equal(r.grid.labels[committed], labels[committed]):
            failures.append(f"decode {j}: {v} changed a committed token")
