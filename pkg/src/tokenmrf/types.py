"""Shared value types for token grids, logit/marginal fields and MRF weights.

All types are immutable after construction: array fields are copied and
marked read-only. Constructors validate, so an instance that exists is
valid; :func:`validate` re-checks any instance explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-6


class ValidationError(ValueError):
    """An invariant of a core type does not hold."""


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VocabSpec:
    size_v: int

    def __post_init__(self):
        validate(self)


@dataclass(frozen=True)
class GridGeometry:
    height: int
    width: int

    def __post_init__(self):
        validate(self)

    @property
    def n(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def index_to_rowcol(geometry: GridGeometry, i: int) -> tuple[int, int]:
    """Row-major location index -> (row, col)."""
    if not 0 <= i < geometry.n:
        raise IndexError(f"index {i} out of range for {geometry.height}x{geometry.width} grid")
    return divmod(int(i), geometry.width)


def rowcol_to_index(geometry: GridGeometry, row: int, col: int) -> int:
    if not (0 <= row < geometry.height and 0 <= col < geometry.width):
        raise IndexError(f"(row={row}, col={col}) out of range for {geometry.height}x{geometry.width} grid")
    return int(row) * geometry.width + int(col)


@dataclass(frozen=True, eq=False)
class TokenGrid:
    geometry: GridGeometry
    vocab: VocabSpec
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", _frozen(np.ravel(self.labels), np.int64))
        validate(self)

    def __eq__(self, other):
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.vocab == other.vocab
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None

    def as_2d(self) -> np.ndarray:
        return self.labels.reshape(self.geometry.shape)


@dataclass(frozen=True, eq=False)
class MaskedTokenGrid:
    """A grid plus a hidden-position mask (True = hidden).

    Labels under the mask are kept as ground truth for losses; consumers
    that must not see them (the teacher) replace them with a mask token.
    """

    grid: TokenGrid
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _frozen(np.ravel(self.mask), bool))
        validate(self)

    @property
    def geometry(self) -> GridGeometry:
        return self.grid.geometry

    @property
    def vocab(self) -> VocabSpec:
        return self.grid.vocab


@dataclass(frozen=True, eq=False)
class LogitField:
    geometry: GridGeometry
    vocab: VocabSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        validate(self)


@dataclass(frozen=True, eq=False)
class MarginalField:
    geometry: GridGeometry
    vocab: VocabSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        validate(self)


@dataclass(frozen=True, eq=False)
class MRFParams:
    """Spatial similarity (n x n) and label compatibility (V x V) weights.

    Stored dense. At V = 8192 the label matrix alone is 512 MiB in float64,
    which is fine for a note and not for this package's defaults.
    """

    w_spatial: np.ndarray
    w_label: np.ndarray
    geometry: GridGeometry
    vocab: VocabSpec

    def __post_init__(self):
        object.__setattr__(self, "w_spatial", _frozen(self.w_spatial, np.float64))
        object.__setattr__(self, "w_label", _frozen(self.w_label, np.float64))
        validate(self)

    @classmethod
    def zeros(cls, geometry: GridGeometry, vocab: VocabSpec) -> MRFParams:
        n, v = geometry.n, vocab.size_v
        return cls(np.zeros((n, n)), np.zeros((v, v)), geometry, vocab)

    def replace(self, w_spatial=None, w_label=None) -> MRFParams:
        return MRFParams(
            self.w_spatial if w_spatial is None else w_spatial,
            self.w_label if w_label is None else w_label,
            self.geometry,
            self.vocab,
        )


@dataclass(frozen=True, eq=False)
class DecodeSchedule:
    total_steps: int
    cut_step: int
    commits_per_step: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "commits_per_step", tuple(int(c) for c in self.commits_per_step))
        validate(self)

    def __eq__(self, other):
        if not isinstance(other, DecodeSchedule):
            return NotImplemented
        return (self.total_steps, self.cut_step, self.commits_per_step) == (
            other.total_steps,
            other.cut_step,
            other.commits_per_step,
        )

    __hash__ = None

    @property
    def n(self) -> int:
        return sum(self.commits_per_step)

    def with_cut(self, cut_step: int) -> DecodeSchedule:
        return DecodeSchedule(self.total_steps, cut_step, self.commits_per_step)


def cosine_schedule(n: int, total_steps: int, cut_step: int | None = None) -> DecodeSchedule:
    """Commit counts from a cosine masking curve: few commits early, most late.

    After step t, floor(n * cos(pi/2 * t/T)) positions remain masked. When
    n >= T every step commits at least one position.
    """
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    t = np.arange(total_steps + 1)
    remaining = np.floor(n * np.cos(0.5 * np.pi * t / total_steps)).astype(np.int64)
    remaining[0], remaining[-1] = n, 0
    commits = -np.diff(remaining)
    if n >= total_steps:
        # borrow from the largest later step so no step is empty
        for s in range(total_steps):
            while commits[s] == 0:
                donor = s + 1 + int(np.argmax(commits[s + 1 :]))
                commits[donor] -= 1
                commits[s] += 1
    return DecodeSchedule(total_steps, total_steps if cut_step is None else cut_step, tuple(commits))


def _check_shape(arr: np.ndarray, shape: tuple[int, ...], what: str):
    if arr.shape != shape:
        raise ValidationError(f"dimension mismatch: {what} has shape {arr.shape}, expected {shape}")


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"non-finite entry in {what}")


def validate(obj) -> None:
    """Raise :class:`ValidationError` naming the violated invariant, else return None."""
    if isinstance(obj, VocabSpec):
        if not isinstance(obj.size_v, (int, np.integer)) or obj.size_v < 2:
            raise ValidationError(f"vocab size must be an integer >= 2, got {obj.size_v!r}")
    elif isinstance(obj, GridGeometry):
        for name in ("height", "width"):
            val = getattr(obj, name)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise ValidationError(f"{name} must be a positive integer, got {val!r}")
    elif isinstance(obj, TokenGrid):
        _check_shape(obj.labels, (obj.geometry.n,), "labels")
        if obj.labels.size and (obj.labels.min() < 0 or obj.labels.max() >= obj.vocab.size_v):
            raise ValidationError(f"label out of range [0, {obj.vocab.size_v})")
    elif isinstance(obj, MaskedTokenGrid):
        validate(obj.grid)
        _check_shape(obj.mask, (obj.grid.geometry.n,), "mask")
    elif isinstance(obj, (LogitField, MarginalField)):
        kind = type(obj).__name__
        _check_shape(obj.values, (obj.geometry.n, obj.vocab.size_v), kind)
        _check_finite(obj.values, kind)
        if isinstance(obj, MarginalField):
            if obj.values.min() < 0.0 or obj.values.max() > 1.0:
                raise ValidationError("marginal entry outside [0, 1]")
            worst = np.max(np.abs(obj.values.sum(axis=1) - 1.0))
            if worst > ROW_SUM_TOL:
                raise ValidationError(f"row not normalized (max deviation {worst:.3g})")
    elif isinstance(obj, MRFParams):
        n, v = obj.geometry.n, obj.vocab.size_v
        _check_shape(obj.w_spatial, (n, n), "w_spatial")
        _check_shape(obj.w_label, (v, v), "w_label")
        _check_finite(obj.w_spatial, "w_spatial")
        _check_finite(obj.w_label, "w_label")
    elif isinstance(obj, DecodeSchedule):
        if obj.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")
        if not 1 <= obj.cut_step <= obj.total_steps:
            raise ValidationError(f"cut_step {obj.cut_step} outside [1, {obj.total_steps}]")
        if len(obj.commits_per_step) != obj.total_steps:
            raise ValidationError(
                f"dimension mismatch: {len(obj.commits_per_step)} commit counts for {obj.total_steps} steps"
            )
        if any(c < 0 for c in obj.commits_per_step):
            raise ValidationError("negative commit count")
    else:
        raise TypeError(f"no validation rule for {type(obj).__name__}")


def check_compatible(geometry: GridGeometry, vocab: VocabSpec, *objs) -> None:
    for obj in objs:
        if obj.geometry != geometry or obj.vocab != vocab:
            raise ValidationError(
                f"dimension mismatch: {type(obj).__name__} is {obj.geometry.height}x{obj.geometry.width}/V={obj.vocab.size_v}, "
                f"expected {geometry.height}x{geometry.width}/V={vocab.size_v}"
            )
