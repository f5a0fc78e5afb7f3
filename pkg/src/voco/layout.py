"""Sequence layouts (vision / VoCo / text spans) and the attention masks over them.

Position ids are carried by the layout. For a single image they equal the
sequence index. In a video layout the VoCo spans hold permanent, strictly
increasing positions while each frame's vision tokens sit on transient
positions directly before their own VoCo span.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from voco.errors import ShapeError, UsageError


class Kind(enum.IntEnum):
    VISION = 0
    VOCO = 1
    TEXT = 2


@dataclass(frozen=True)
class Segment:
    kind: Kind
    start: int
    length: int
    pos_start: int
    group: int = -1  # frame index for VISION/VOCO spans

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SequenceLayout:
    segments: tuple[Segment, ...]
    independent_groups: bool = False
    partial: bool = False  # a slice of a larger layout; structural rules not enforced

    @property
    def total_len(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def __len__(self) -> int:
        return self.total_len

    @cached_property
    def kinds(self) -> np.ndarray:
        out = np.empty(self.total_len, dtype=np.int8)
        for s in self.segments:
            out[s.start:s.stop] = s.kind
        return out

    @cached_property
    def groups(self) -> np.ndarray:
        out = np.full(self.total_len, -1, dtype=np.int64)
        for s in self.segments:
            out[s.start:s.stop] = s.group
        return out

    @cached_property
    def position_ids(self) -> np.ndarray:
        out = np.empty(self.total_len, dtype=np.int64)
        for s in self.segments:
            out[s.start:s.stop] = np.arange(s.pos_start, s.pos_start + s.length)
        return out

    def spans(self, kind: Kind) -> list[Segment]:
        return [s for s in self.segments if s.kind == kind]

    def indices(self, kind: Kind) -> np.ndarray:
        return np.flatnonzero(self.kinds == kind)

    def count(self, kind: Kind) -> int:
        return sum(s.length for s in self.segments if s.kind == kind)

    def slice(self, start: int, stop: int) -> SequenceLayout:
        """Sub-layout covering sequence indices ``[start, stop)``, re-based to index 0."""
        if not 0 <= start <= stop <= self.total_len:
            raise UsageError(f"slice [{start}, {stop}) outside layout of length {self.total_len}")
        segs = []
        for s in self.segments:
            lo, hi = max(s.start, start), min(s.stop, stop)
            if lo < hi:
                segs.append(Segment(s.kind, lo - start, hi - lo, s.pos_start + lo - s.start, s.group))
        return SequenceLayout(tuple(segs), self.independent_groups, partial=True)

    def shifted(self, delta: int) -> SequenceLayout:
        """Same spans with every position id moved by ``delta``."""
        segs = tuple(Segment(s.kind, s.start, s.length, s.pos_start + delta, s.group) for s in self.segments)
        return SequenceLayout(segs, self.independent_groups, self.partial)

    def check(self) -> None:
        """Raise UsageError unless the layout satisfies the span invariants."""
        pos = 0
        for s in self.segments:
            if s.start != pos or s.length <= 0:
                raise UsageError(f"segments not contiguous at index {pos}")
            pos = s.stop
        if self.partial:
            return
        pending_vision: int | None = None
        for s in self.segments:
            if s.kind == Kind.VISION:
                if pending_vision is not None:
                    raise UsageError("vision span not followed by a VoCo span")
                pending_vision = s.group
            elif s.kind == Kind.VOCO:
                if pending_vision is not None and pending_vision != s.group:
                    raise UsageError("VoCo span does not belong to the preceding vision span")
                pending_vision = None
            elif pending_vision is not None:
                raise UsageError("text span between a vision span and its VoCo span")
        if pending_vision is not None:
            raise UsageError("trailing vision span without VoCo span")


def _segments(spec: Sequence[tuple[Kind, int, int, int]]) -> tuple[Segment, ...]:
    out, idx = [], 0
    for kind, length, pos, group in spec:
        if length > 0:
            out.append(Segment(kind, idx, length, pos, group))
            idx += length
    return tuple(out)


def build_layout(num_vision: int, num_voco: int, num_text: int) -> SequenceLayout:
    """Image layout: ``num_vision`` vision tokens, ``num_voco`` VoCo tokens, then text."""
    if num_voco < 1:
        raise UsageError("num_voco must be >= 1; compression into zero tokens is undefined")
    if num_vision < 0 or num_text < 0:
        raise UsageError("token counts must be non-negative")
    n, v = num_vision, num_voco
    return SequenceLayout(_segments([
        (Kind.VISION, n, 0, 0),
        (Kind.VOCO, v, n, 0),
        (Kind.TEXT, num_text, n + v, -1),
    ]))


def build_video_layout(frames: Sequence[tuple[int, int]], num_text: int,
                       independent: bool = False) -> SequenceLayout:
    """Layout ``V1, VoCo1, ..., Vk, VoCok, TEXT`` for per-frame (num_vision, num_voco) pairs.

    With ``independent`` set, a VoCo span does not see earlier VoCo spans.
    """
    if not frames:
        raise UsageError("video layout needs at least one frame")
    if any(v < 1 for _, v in frames):
        raise UsageError("every frame needs num_voco >= 1")
    widest = max(n for n, _ in frames)
    spec, voco_base = [], 0
    for t, (n, v) in enumerate(frames):
        anchor = widest + voco_base
        spec.append((Kind.VISION, n, anchor - n, t))
        spec.append((Kind.VOCO, v, anchor, t))
        voco_base += v
    spec.append((Kind.TEXT, num_text, widest + voco_base, -1))
    return SequenceLayout(_segments(spec), independent_groups=independent)


def text_layout(num_text: int, pos_start: int) -> SequenceLayout:
    """Text-only span starting at global position ``pos_start`` (second pass of two-stage inference)."""
    return SequenceLayout(_segments([(Kind.TEXT, num_text, pos_start, -1)]), partial=True)


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class AttentionMask:
    """``bits[i, j]`` is True when position i may attend to position j."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ShapeError(f"mask must be 2-d, got shape {b.shape}")
        object.__setattr__(self, "bits", b)

    @property
    def size(self) -> int:
        return self.bits.shape[0]

    def rows(self, start: int, stop: int) -> np.ndarray:
        return self.bits[start:stop, :stop]

    def to_ascii(self) -> str:
        return "\n".join("".join("1" if x else "0" for x in row) for row in self.bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


def build_causal_mask(length: int) -> AttentionMask:
    if length < 1:
        raise UsageError("mask length must be >= 1")
    return AttentionMask(np.tril(np.ones((length, length), dtype=bool)))


def build_voco_mask(layout: SequenceLayout) -> AttentionMask:
    """Isolation mask: text never sees vision, and sees VoCo tokens instead.

    VoCo tokens see their own frame's vision tokens, their own span causally
    and, unless the layout is marked independent, earlier VoCo spans. Vision
    tokens see only their own frame.
    """
    layout.check()
    k, g = layout.kinds, layout.groups
    ki, kj = k[:, None], k[None, :]
    same = g[:, None] == g[None, :]
    causal = np.tril(np.ones((len(k), len(k)), dtype=bool))
    vis_j, voco_j = kj == Kind.VISION, kj == Kind.VOCO
    from_text = (ki == Kind.TEXT) & ~vis_j
    earlier_voco = voco_j if not layout.independent_groups else voco_j & same
    from_voco = (ki == Kind.VOCO) & ((vis_j & same) | (voco_j & same) | earlier_voco)
    from_vision = (ki == Kind.VISION) & vis_j & same
    return AttentionMask(causal & (from_text | from_voco | from_vision))


def build_mask(layout: SequenceLayout, mode: str) -> AttentionMask:
    """``mode`` is ``"voco"`` (isolation) or ``"causal"`` (plain lower triangle)."""
    if mode == "voco":
        return build_voco_mask(layout)
    if mode == "causal":
        layout.check()
        return build_causal_mask(layout.total_len)
    raise UsageError(f"unknown mask mode {mode!r}")


def _block_allowed(a: Segment, b: Segment, independent: bool) -> bool:
    """Whether rows of span ``a`` may look at columns of span ``b`` (before the causal cut)."""
    if a.kind == Kind.TEXT:
        return b.kind != Kind.VISION
    if a.kind == Kind.VISION:
        return b.kind == Kind.VISION and b.group == a.group
    if b.kind == Kind.VISION:
        return b.group == a.group
    if b.kind == Kind.VOCO:
        return b.group == a.group or not independent
    return False


def _rule_mask(layout: SequenceLayout) -> np.ndarray:
    """Span-by-span construction of the isolation mask, kept separate from build_voco_mask."""
    n = layout.total_len
    out = np.zeros((n, n), dtype=bool)
    for a in layout.segments:
        for b in layout.segments:
            if b.start > a.stop - 1 or not _block_allowed(a, b, layout.independent_groups):
                continue
            rows = np.arange(a.start, a.stop)[:, None]
            cols = np.arange(b.start, b.stop)[None, :]
            out[a.start:a.stop, b.start:b.stop] = cols <= rows
    return out


class Violation(NamedTuple):
    i: int
    j: int
    expected: bool
    found: bool


def validate_mask(mask: AttentionMask, layout: SequenceLayout) -> list[Violation]:
    """Every (i, j) where ``mask`` departs from the rule-built mask for ``layout``."""
    if mask.size != layout.total_len or mask.bits.shape[1] != layout.total_len:
        raise ShapeError(f"mask {mask.bits.shape} does not match layout length {layout.total_len}")
    expected = _rule_mask(layout)
    bad = np.argwhere(expected != mask.bits)
    return [Violation(int(i), int(j), bool(expected[i, j]), bool(mask.bits[i, j])) for i, j in bad]
