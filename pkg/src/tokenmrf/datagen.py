"""Synthetic token-grid corpora with known structure, and corpus files.

Kinds:
    checkerboard  labels alternate between even and odd label subsets by (row + col) parity
    stripes       horizontal bands of ``band`` rows, each band one label, neighbours differ
    blobs         seeded region growing from a few random seeds with random labels
    gt_mrf        Gibbs samples from a given MRF with zero unaries

Grid ``i`` draws from ``default_rng(seed + i)``, so generation is
order-independent and reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mgtf
from .types import GridGeometry, LogitField, MRFParams, TokenGrid, ValidationError, VocabSpec

KINDS = ("checkerboard", "stripes", "blobs", "gt_mrf")
DEFAULT_CONDITION = {"checkerboard": 0, "stripes": 1, "blobs": 2, "gt_mrf": 3}


@dataclass(frozen=True, eq=False)
class CorpusSpec:
    kind: str
    geometry: GridGeometry
    vocab: VocabSpec
    count: int
    noise_rate: float = 0.0
    seed: int = 0
    condition: int | None = None
    band: int = 2
    regions: tuple[int, int] = (3, 8)
    gibbs_burn_in: int = 20
    mrf: MRFParams | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown corpus kind {self.kind!r}")
        if self.count < 1:
            raise ValidationError("corpus count must be >= 1")
        if not 0 <= self.noise_rate < 1:
            raise ValidationError("noise_rate must lie in [0, 1)")
        if self.kind == "gt_mrf":
            if self.mrf is None:
                raise ValidationError("gt_mrf corpus needs an MRFParams")
            if self.mrf.geometry != self.geometry or self.mrf.vocab != self.vocab:
                raise ValidationError("dimension mismatch between gt_mrf params and corpus shape")

    @property
    def condition_label(self) -> int:
        return DEFAULT_CONDITION[self.kind] if self.condition is None else self.condition

    def echo(self) -> dict:
        d = {
            "kind": self.kind,
            "height": self.geometry.height,
            "width": self.geometry.width,
            "vocab": self.vocab.size_v,
            "count": self.count,
            "noise_rate": self.noise_rate,
            "seed": self.seed,
            "condition": self.condition_label,
            "band": self.band,
            "regions": list(self.regions),
        }
        if self.kind == "gt_mrf":
            d["gibbs_burn_in"] = self.gibbs_burn_in
        return d


def checkerboard(geometry: GridGeometry, v: int, rng: np.random.Generator) -> np.ndarray:
    r, c = np.indices(geometry.shape)
    parity = ((r + c) % 2).ravel()
    # parity p draws from labels {p, p+2, p+4, ...}; with V=2 this is exactly (row+col) mod 2
    sizes = np.array([(v + 1) // 2, v // 2])
    return parity + 2 * (rng.random(parity.size) * sizes[parity]).astype(np.int64)


def stripes(geometry: GridGeometry, v: int, rng: np.random.Generator, band: int = 2) -> np.ndarray:
    bands = -(-geometry.height // band)
    labels = [int(rng.integers(v))]
    for _ in range(bands - 1):
        nxt = int(rng.integers(v - 1))
        labels.append(nxt + (nxt >= labels[-1]))
    rows = np.repeat(labels, band)[: geometry.height]
    return np.repeat(rows, geometry.width)


def blobs(geometry: GridGeometry, v: int, rng: np.random.Generator, regions=(3, 8)) -> np.ndarray:
    h, w = geometry.shape
    n = geometry.n
    k = int(rng.integers(regions[0], regions[1] + 1))
    out = np.full(n, -1, dtype=np.int64)
    seeds = rng.choice(n, size=min(k, n), replace=False)
    out[seeds] = rng.integers(0, v, size=seeds.size)

    def neighbours(i):
        r, c = divmod(i, w)
        if r > 0:
            yield i - w
        if r < h - 1:
            yield i + w
        if c > 0:
            yield i - 1
        if c < w - 1:
            yield i + 1

    # frontier as list + membership set; swap-remove keeps draws deterministic
    frontier, queued = [], set()

    def push(i):
        for j in neighbours(i):
            if out[j] < 0 and j not in queued:
                queued.add(j)
                frontier.append(j)

    for s in seeds:
        push(int(s))
    while frontier:
        t = int(rng.integers(len(frontier)))
        frontier[t], frontier[-1] = frontier[-1], frontier[t]
        i = frontier.pop()
        owners = [j for j in neighbours(i) if out[j] >= 0]
        out[i] = out[owners[int(rng.integers(len(owners)))]]
        push(i)
    return out


def _corrupt(labels: np.ndarray, v: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate == 0:
        return labels
    flip = rng.random(labels.size) < rate
    return np.where(flip, rng.integers(0, v, size=labels.size), labels)


def generate(spec: CorpusSpec) -> list[tuple[TokenGrid, int]]:
    v = spec.vocab.size_v
    out = []
    if spec.kind == "gt_mrf":
        from .oracle import gibbs_sample_array

        zero = LogitField(spec.geometry, spec.vocab, np.zeros((spec.geometry.n, v)))
        arrays = [
            gibbs_sample_array(spec.mrf, zero, spec.gibbs_burn_in, 1, spec.seed + i)[0] for i in range(spec.count)
        ]
    for i in range(spec.count):
        rng = np.random.default_rng(spec.seed + i)
        if spec.kind == "checkerboard":
            labels = checkerboard(spec.geometry, v, rng)
        elif spec.kind == "stripes":
            labels = stripes(spec.geometry, v, rng, spec.band)
        elif spec.kind == "blobs":
            labels = blobs(spec.geometry, v, rng, spec.regions)
        else:
            labels = arrays[i]
        labels = _corrupt(labels, v, spec.noise_rate, rng)
        out.append((TokenGrid(spec.geometry, spec.vocab, labels), spec.condition_label))
    return out


def write_corpus(path, corpus, echo: dict | None = None, meta: dict | None = None) -> None:
    """Labels as one uint16 tensor (count, H, W); conditions and spec echo in ``<path>.json``."""
    if len(corpus) == 0:
        raise ValidationError("cannot write an empty corpus")
    grids = [g for g, _ in corpus]
    geometry, vocab = grids[0].geometry, grids[0].vocab
    if any(g.geometry != geometry or g.vocab != vocab for g in grids):
        raise ValidationError("dimension mismatch inside corpus")
    labels = np.stack([g.as_2d() for g in grids])
    mgtf.write(path, {"labels": labels}, meta)
    sidecar = {
        "format_version": mgtf.VERSION,
        "height": geometry.height,
        "width": geometry.width,
        "vocab": vocab.size_v,
        "count": len(grids),
        "conditions": [int(c) for _, c in corpus],
        "spec": echo or {},
    }
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2))


def read_corpus(path) -> list[tuple[TokenGrid, int]]:
    tensors, _ = mgtf.read(path)
    try:
        side = json.loads(Path(f"{path}.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise mgtf.MGTFError(f"malformed file: corpus sidecar unreadable ({exc})") from None
    if side.get("format_version") != mgtf.VERSION:
        raise mgtf.MGTFError(f"version mismatch: sidecar has {side.get('format_version')}")
    if "labels" not in tensors:
        raise mgtf.MGTFError("malformed file: no labels tensor")
    geometry, vocab = GridGeometry(side["height"], side["width"]), VocabSpec(side["vocab"])
    labels = tensors["labels"].astype(np.int64)
    if labels.shape != (side["count"], geometry.height, geometry.width) or len(side["conditions"]) != side["count"]:
        raise mgtf.MGTFError("malformed file: corpus shape disagrees with sidecar")
    return [(TokenGrid(geometry, vocab, lab), int(c)) for lab, c in zip(labels, side["conditions"])]


def neighbour_pairs(geometry: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (a, b) of all horizontally and vertically adjacent location pairs."""
    idx = np.arange(geometry.n).reshape(geometry.shape)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return a, b


def cooccurrence(grids, vocab_size: int) -> np.ndarray:
    """Symmetric, normalized V x V histogram of adjacent label pairs."""
    grids = list(grids)
    a, b = neighbour_pairs(grids[0].geometry)
    counts = np.zeros((vocab_size, vocab_size))
    for g in grids:
        np.add.at(counts, (g.labels[a], g.labels[b]), 1.0)
    counts = counts + counts.T
    return counts / counts.sum()


def same_label_rate(grids) -> float:
    grids = list(grids)
    a, b = neighbour_pairs(grids[0].geometry)
    return float(np.mean([np.mean(g.labels[a] == g.labels[b]) for g in grids]))


def spec_from_dict(d: dict, mrf: MRFParams | None = None) -> CorpusSpec:
    return CorpusSpec(
        kind=d["kind"],
        geometry=GridGeometry(d["height"], d["width"]),
        vocab=VocabSpec(d["vocab"]),
        count=d["count"],
        noise_rate=d.get("noise_rate", 0.0),
        seed=d.get("seed", 0),
        condition=d.get("condition"),
        band=d.get("band", 2),
        regions=tuple(d.get("regions", (3, 8))),
        gibbs_burn_in=d.get("gibbs_burn_in", 20),
        mrf=mrf,
    )

