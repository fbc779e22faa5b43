"""Desk-scale masked-token teacher and progressive parallel decoding.

The teacher sees a token grid in which hidden positions carry a dedicated
mask token, plus a discrete condition label, and predicts logits for every
position at once. A stack of residual 3x3 convolutions gives it a receptive
field covering the whole 16x16 grid.

Decoding starts fully masked. Each step predicts all positions, samples a
candidate for every hidden one, and commits the most confident candidates
(probability of the sampled token) according to the schedule.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import mgtf
from .types import (
    DecodeSchedule,
    GridGeometry,
    LogitField,
    MaskedTokenGrid,
    TokenGrid,
    ValidationError,
    VocabSpec,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TeacherConfig:
    channels: int = 256
    layers: int = 8
    condition_count: int = 4
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0


class ContextPredictor(nn.Module):
    def __init__(self, vocab_size: int, height: int, width: int, condition_count: int, channels: int, layers: int):
        super().__init__()
        self.mask_id = vocab_size
        self.tok = nn.Embedding(vocab_size + 1, channels)
        self.pos = nn.Parameter(torch.randn(1, channels, height, width) * 0.02)
        self.cond = nn.Embedding(condition_count, channels)
        self.norms = nn.ModuleList([nn.GroupNorm(8, channels) for _ in range(layers)])
        self.convs = nn.ModuleList([nn.Conv2d(channels, channels, 3, padding=1) for _ in range(layers)])
        self.head_norm = nn.GroupNorm(8, channels)
        self.head = nn.Conv2d(channels, vocab_size, 1)

    def forward(self, tokens: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        # tokens (B, H, W) with mask_id at hidden positions -> logits (B, H*W, V)
        h = self.tok(tokens).permute(0, 3, 1, 2) + self.pos + self.cond(condition)[:, :, None, None]
        for norm, conv in zip(self.norms, self.convs):
            h = h + conv(F.gelu(norm(h)))
        out = self.head(F.gelu(self.head_norm(h)))
        return out.flatten(2).transpose(1, 2)


@dataclass(eq=False)
class TeacherModel:
    geometry: GridGeometry
    vocab: VocabSpec
    config: TeacherConfig
    net: ContextPredictor

    @property
    def condition_count(self) -> int:
        return self.config.condition_count

    @classmethod
    def create(cls, geometry: GridGeometry, vocab: VocabSpec, config: TeacherConfig) -> TeacherModel:
        torch.manual_seed(config.seed)
        net = ContextPredictor(
            vocab.size_v, geometry.height, geometry.width, config.condition_count, config.channels, config.layers
        )
        net.eval()
        return cls(geometry, vocab, config, net)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def _check_condition(model: TeacherModel, condition: int):
    if not 0 <= int(condition) < model.condition_count:
        raise ValidationError(f"unknown condition label {condition} (model has {model.condition_count})")


def _raw_logits(model: TeacherModel, labels: np.ndarray, hidden: np.ndarray, condition: int) -> np.ndarray:
    tokens = np.where(hidden, model.net.mask_id, labels).reshape(1, *model.geometry.shape)
    with torch.inference_mode():
        out = model.net(torch.from_numpy(tokens), torch.tensor([int(condition)]))
    return out[0].double().numpy()


def predict_logits(model: TeacherModel, masked: MaskedTokenGrid, condition: int) -> LogitField:
    """Logits for every position, hidden labels never consulted."""
    _check_condition(model, condition)
    if masked.geometry != model.geometry or masked.vocab != model.vocab:
        raise ValidationError("dimension mismatch between teacher and grid")
    values = _raw_logits(model, masked.grid.labels, masked.mask, condition)
    return LogitField(model.geometry, model.vocab, values)


def _mask_ratio(rng: np.random.Generator, size: int) -> np.ndarray:
    # cosine-distributed ratios, matching the masking levels seen while decoding
    return np.cos(0.5 * np.pi * rng.random(size))


def train_teacher(
    corpus: Sequence[TokenGrid], conditions: Sequence[int], config: TeacherConfig, log_every: int = 100
) -> TeacherModel:
    """Masked-token cross-entropy training with per-example cosine mask ratios."""
    if len(corpus) == 0:
        raise ValidationError("empty corpus")
    if len(conditions) != len(corpus):
        raise ValidationError("one condition label per grid required")
    geometry, vocab = corpus[0].geometry, corpus[0].vocab
    model = TeacherModel.create(geometry, vocab, config)
    for c in set(int(c) for c in conditions):
        _check_condition(model, c)
    net = model.net
    net.train()
    rng = np.random.default_rng(config.seed)
    data = torch.from_numpy(np.stack([g.labels for g in corpus]).reshape(-1, *geometry.shape))
    conds = torch.tensor(np.asarray(conditions, dtype=np.int64))
    n = geometry.n
    opt = torch.optim.AdamW(net.parameters(), lr=config.learning_rate, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=config.learning_rate, total_steps=max(config.steps, 1), pct_start=0.1
    )
    for step in range(config.steps):
        idx = rng.integers(0, len(corpus), size=config.batch_size)
        x = data[idx]
        counts = np.maximum(1, np.ceil(_mask_ratio(rng, config.batch_size) * n)).astype(int)
        scores = rng.random((config.batch_size, n))
        thresh = np.sort(scores, axis=1)[np.arange(config.batch_size), counts - 1]
        hidden = torch.from_numpy(scores <= thresh[:, None]).reshape(x.shape)
        inp = torch.where(hidden, torch.full_like(x, net.mask_id), x)
        logits = net(inp, conds[idx])
        loss = F.cross_entropy(logits[hidden.flatten(1)], x.flatten(1)[hidden.flatten(1)])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % log_every == 0 or step == config.steps - 1:
            log.info("teacher step %d loss %.4f", step, loss.item())
    net.eval()
    return model


def masked_accuracy(
    model: TeacherModel, grids: Sequence[TokenGrid], conditions: Sequence[int], mask_fraction: float, seed: int
) -> float:
    """Argmax accuracy on a random ``mask_fraction`` of hidden positions per grid."""
    rng = np.random.default_rng(seed)
    n = model.geometry.n
    hits = total = 0
    for g, c in zip(grids, conditions):
        hidden = np.zeros(n, bool)
        hidden[rng.choice(n, size=max(1, int(mask_fraction * n)), replace=False)] = True
        pred = _raw_logits(model, g.labels, hidden, c).argmax(axis=1)
        hits += int((pred[hidden] == g.labels[hidden]).sum())
        total += int(hidden.sum())
    return hits / total


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    logits: LogitField
    positions: np.ndarray
    labels: np.ndarray
    wallclock_ms: float
    teacher_ms: float


@dataclass(eq=False)
class DecodeTrace:
    geometry: GridGeometry
    vocab: VocabSpec
    schedule: DecodeSchedule
    condition: int
    steps: list[StepRecord] = field(default_factory=list)
    final: TokenGrid | None = None

    def committed_through(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(labels, committed mask) after step k; uncommitted labels are 0."""
        labels = np.zeros(self.geometry.n, dtype=np.int64)
        committed = np.zeros(self.geometry.n, dtype=bool)
        for rec in self.steps[:k]:
            labels[rec.positions] = rec.labels
            committed[rec.positions] = True
        return labels, committed


def _sample(logits: np.ndarray, temperature: float, rng: np.random.Generator):
    """Candidate token and its probability for each row."""
    if temperature == 0:
        tok = logits.argmax(axis=1)
        z = logits
    else:
        z = logits / temperature
        tok = (z + rng.gumbel(size=z.shape)).argmax(axis=1)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return tok, p[np.arange(len(tok)), tok]


def progressive_decode(
    model: TeacherModel,
    condition: int,
    schedule: DecodeSchedule,
    temperature: float,
    seed: int,
    stop_after: int | None = None,
) -> DecodeTrace:
    """Confidence-ordered iterative unmasking; ``stop_after`` truncates the trace.

    A truncated trace consumes exactly the same random draws as the
    corresponding prefix of the full decode.
    """
    _check_condition(model, condition)
    n = model.geometry.n
    if schedule.n != n:
        raise ValidationError(f"schedule commits {schedule.n} positions, grid has {n}")
    if temperature < 0:
        raise ValidationError("temperature must be nonnegative")
    last = schedule.total_steps if stop_after is None else stop_after
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    hidden = np.ones(n, dtype=bool)
    trace = DecodeTrace(model.geometry, model.vocab, schedule, int(condition))
    for s in range(last):
        t0 = time.perf_counter()
        raw = _raw_logits(model, labels, hidden, condition)
        t1 = time.perf_counter()
        open_pos = np.flatnonzero(hidden)
        tok, conf = _sample(raw[open_pos], temperature, rng)
        # stable sort on -conf: equal confidence keeps the lower position first
        order = np.argsort(-conf, kind="stable")[: schedule.commits_per_step[s]]
        pos = open_pos[order]
        labels[pos] = tok[order]
        hidden[pos] = False
        t2 = time.perf_counter()
        trace.steps.append(
            StepRecord(
                s + 1,
                LogitField(model.geometry, model.vocab, raw),
                pos,
                tok[order],
                (t2 - t0) * 1e3,
                (t1 - t0) * 1e3,
            )
        )
    if last == schedule.total_steps:
        trace.final = TokenGrid(model.geometry, model.vocab, labels)
    return trace


def early_exit(trace: DecodeTrace, k: int) -> TokenGrid:
    """Keep commitments through step k, fill the rest by argmax of the step-k logits."""
    if not 1 <= k <= len(trace.steps):
        raise ValidationError(f"k={k} outside [1, {len(trace.steps)}]")
    labels, committed = trace.committed_through(k)
    fill = trace.steps[k - 1].logits.values.argmax(axis=1)
    return TokenGrid(trace.geometry, trace.vocab, np.where(committed, labels, fill))


def build_distill_set(
    model: TeacherModel,
    conditions: Sequence[int],
    schedule: DecodeSchedule,
    temperature: float,
    seed: int,
    kappa: float,
):
    """One full teacher decode per condition entry, reduced to (pinned step-k logits, final grid)."""
    from .train import DistillExample, pin_committed

    k = schedule.cut_step
    out = []
    for i, c in enumerate(conditions):
        trace = progressive_decode(model, int(c), schedule, temperature, seed + i)
        labels, committed = trace.committed_through(k)
        grid = TokenGrid(trace.geometry, trace.vocab, labels)
        out.append(DistillExample(pin_committed(trace.steps[k - 1].logits, grid, committed, kappa), trace.final))
    return out


def save_teacher(path, model: TeacherModel, meta: dict | None = None):
    meta = dict(meta or {})
    meta.update(
        kind="teacher",
        height=model.geometry.height,
        width=model.geometry.width,
        vocab=model.vocab.size_v,
        teacher_config=asdict(model.config),
    )
    tensors = {k: v.detach().float().numpy() for k, v in model.net.state_dict().items()}
    mgtf.write(path, tensors, meta)


def load_teacher(path) -> TeacherModel:
    tensors, meta = mgtf.read(path)
    if not meta or meta.get("kind") != "teacher":
        raise mgtf.MGTFError("malformed file: not a teacher weights container")
    model = TeacherModel.create(
        GridGeometry(meta["height"], meta["width"]), VocabSpec(meta["vocab"]), TeacherConfig(**meta["teacher_config"])
    )
    model.net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.net.eval()
    return model


def save_trace(path, trace: DecodeTrace):
    """Trace tensors in MGTF plus a ``<path>.json`` index mapping steps to tensor names."""
    tensors, index = {}, []
    for rec in trace.steps:
        names = {f: f"step{rec.step:03d}/{f}" for f in ("logits", "positions", "labels")}
        tensors[names["logits"]] = rec.logits.values
        tensors[names["positions"]] = rec.positions
        tensors[names["labels"]] = rec.labels
        index.append({"step": rec.step, "tensors": names, "wallclock_ms": rec.wallclock_ms, "teacher_ms": rec.teacher_ms})
    if trace.final is not None:
        tensors["final"] = trace.final.labels
    mgtf.write(path, tensors)
    sidecar = {
        "format_version": mgtf.VERSION,
        "height": trace.geometry.height,
        "width": trace.geometry.width,
        "vocab": trace.vocab.size_v,
        "condition": trace.condition,
        "schedule": {
            "total_steps": trace.schedule.total_steps,
            "cut_step": trace.schedule.cut_step,
            "commits_per_step": list(trace.schedule.commits_per_step),
        },
        "steps": index,
        "final": "final" if trace.final is not None else None,
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))


def load_trace(path) -> DecodeTrace:
    tensors, _ = mgtf.read(path)
    side = json.loads(Path(f"{path}.json").read_text())
    geometry, vocab = GridGeometry(side["height"], side["width"]), VocabSpec(side["vocab"])
    sch = side["schedule"]
    trace = DecodeTrace(
        geometry, vocab, DecodeSchedule(sch["total_steps"], sch["cut_step"], sch["commits_per_step"]), side["condition"]
    )
    for entry in side["steps"]:
        names = entry["tensors"]
        trace.steps.append(
            StepRecord(
                entry["step"],
                LogitField(geometry, vocab, tensors[names["logits"]]),
                tensors[names["positions"]].astype(np.int64),
                tensors[names["labels"]].astype(np.int64),
                entry["wallclock_ms"],
                entry["teacher_ms"],
            )
        )
    if side["final"]:
        trace.final = TokenGrid(geometry, vocab, tensors[side["final"]])
    return trace
