"""Video: per-frame VoCo caches concatenated into one ordered cache sequence.

Frame t's vision tokens take transient positions just before its VoCo span;
only the VoCo positions are permanent, so k frames of n tokens cost k*v
context slots at query time instead of k*n.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from voco import tensor as T
from voco.errors import CapacityError, FormatError, StalenessError, UsageError
from voco.layout import build_video_layout, build_voco_mask
from voco.model import ModelParams, forward
from voco.runtime import VoCoCache, compress, deserialize_cache, infer_with_cache, serialize_cache

BUNDLE_MAGIC = b"VCVB"
BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<4sHHI")
_BUNDLE_ENTRY = struct.Struct("<QQ")


@dataclass(frozen=True)
class VideoCacheSequence:
    frames: tuple[VoCoCache, ...]
    independent: bool = False

    def __post_init__(self):
        if not self.frames:
            raise UsageError("a video cache sequence needs at least one frame")
        if len({c.model_fingerprint for c in self.frames}) != 1:
            raise StalenessError("frames were compressed by different models")
        last = -1
        for lo, hi in self.frame_positions:
            if lo <= last:
                raise UsageError("frame position ranges must be strictly increasing and disjoint")
            last = hi

    @property
    def frame_positions(self) -> list[tuple[int, int]]:
        """Inclusive (first, last) VoCo position per frame."""
        return [(c.position_ids[0], c.position_ids[-1]) for c in self.frames]

    @property
    def total_voco(self) -> int:
        return sum(c.num_voco for c in self.frames)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.frames)

    def context_tokens(self, num_text: int) -> int:
        """Positions attended to at query time: cached VoCo entries plus the text."""
        return self.total_voco + num_text


def compress_video(params: ModelParams, frames: Sequence, num_voco: int, text_budget: int = 0,
                   independent: bool = False, dtype: str | None = None) -> VideoCacheSequence:
    """Compress frames in order; frame t's VoCo tokens see earlier frames' caches unless ``independent``.

    ``text_budget`` reserves positions for the question that will follow.
    """
    vids = [np.asarray(f, dtype=np.int64).reshape(-1) for f in frames]
    if not vids:
        raise UsageError("need at least one frame")
    if num_voco < 1:
        raise UsageError("num_voco must be >= 1")
    widest = max(len(f) for f in vids)
    needed = widest + num_voco * len(vids) + text_budget
    if needed > params.config.max_positions:
        raise CapacityError(f"{len(vids)} frames x {num_voco} VoCo + {text_budget} text after {widest} "
                            f"vision positions needs {needed} > max_positions={params.config.max_positions}")
    caches: list[VoCoCache] = []
    for t, vision in enumerate(vids):
        offset = widest + t * num_voco - len(vision)
        prior = () if independent else tuple(caches)
        caches.append(compress(params, vision, num_voco, position_offset=offset, prior=prior, dtype=dtype))
    return VideoCacheSequence(tuple(caches), independent)


def infer_video(params: ModelParams, seq: VideoCacheSequence, text_token_ids) -> np.ndarray:
    """Text logits given the whole cache sequence."""
    return infer_with_cache(params, seq.frames, text_token_ids)


def single_pass_video_reference(params: ModelParams, frames: Sequence, num_voco: int, text_token_ids,
                                independent: bool = False) -> np.ndarray:
    """Text logits from one forward pass over the full video layout."""
    vids = [np.asarray(f, dtype=np.int64).reshape(-1) for f in frames]
    text = np.asarray(text_token_ids, dtype=np.int64).reshape(-1)
    layout = build_video_layout([(len(f), num_voco) for f in vids], len(text), independent)
    parts = []
    for f in vids:
        parts += [f, np.zeros(num_voco, dtype=np.int64)]
    ids = np.concatenate(parts + [text])
    with T.no_grad():
        out = forward(params, layout, ids, build_voco_mask(layout))
    return out.logits.data[layout.total_len - len(text):]


# ---------------------------------------------------------------- bundle file
#
# "VCVB", u16 version, u16 flags (bit 0: independent), u32 frame count,
# then per frame u64 offset and u64 length of its cache file, then the files.


def serialize_video(seq: VideoCacheSequence) -> bytes:
    blobs = [serialize_cache(c) for c in seq.frames]
    offset = _BUNDLE_HEADER.size + _BUNDLE_ENTRY.size * len(blobs)
    index = []
    for b in blobs:
        index.append(_BUNDLE_ENTRY.pack(offset, len(b)))
        offset += len(b)
    header = _BUNDLE_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, int(seq.independent), len(blobs))
    return header + b"".join(index) + b"".join(blobs)


def deserialize_video(buf: bytes) -> VideoCacheSequence:
    if len(buf) < _BUNDLE_HEADER.size:
        raise FormatError("bundle truncated inside header", len(buf))
    magic, version, flags, count = _BUNDLE_HEADER.unpack_from(buf, 0)
    if magic != BUNDLE_MAGIC:
        raise FormatError(f"bad bundle magic {magic!r}", 0)
    if version != BUNDLE_VERSION:
        raise FormatError(f"unsupported bundle version {version}", 4)
    pos = _BUNDLE_HEADER.size
    if count == 0 or pos + _BUNDLE_ENTRY.size * count > len(buf):
        raise FormatError("bundle index truncated or empty", len(buf))
    caches, expected = [], pos + _BUNDLE_ENTRY.size * count
    for i in range(count):
        offset, length = _BUNDLE_ENTRY.unpack_from(buf, pos + i * _BUNDLE_ENTRY.size)
        if offset != expected or offset + length > len(buf):
            raise FormatError(f"frame {i} entry points outside the bundle", pos + i * _BUNDLE_ENTRY.size)
        try:
            caches.append(deserialize_cache(buf[offset:offset + length]))
        except FormatError as exc:
            raise FormatError(f"frame {i}: {exc}", offset + (exc.offset or 0)) from exc
        expected = offset + length
    if expected != len(buf):
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    return VideoCacheSequence(tuple(caches), bool(flags & 1))


def save_video(seq: VideoCacheSequence, path: str | Path) -> None:
    Path(path).write_bytes(serialize_video(seq))


def load_video(path: str | Path) -> VideoCacheSequence:
    return deserialize_video(Path(path).read_bytes())
