"""Two-stage inference with reusable VoCo caches.

Pass one runs ``[vision, VoCo]`` under the isolation mask and keeps only the
keys/values at the VoCo positions. Pass two runs the text alone, attending
to those cached entries. Text position ids continue from the last cached
VoCo position, so the two passes reproduce the single masked forward pass.
"""

from __future__ import annotations

import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from voco import tensor as T
from voco.errors import CapacityError, FormatError, ShapeError, StalenessError, UsageError
from voco.layout import build_layout, build_voco_mask, text_layout
from voco.model import DTYPE_CODES, DTYPE_NAMES, ForwardOutput, LayerKV, ModelParams, forward, stable_hash

CACHE_MAGIC = b"VCCH"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHHIIIIQQI")
_BYTES_PER_ELEMENT = {"float64": 8, "float32": 4}


@dataclass(frozen=True, eq=False)
class VoCoCache:
    """Per-layer K/V at the VoCo positions of one compressed image.

    ``kv`` has shape ``[2, n_layers, n_heads, num_voco, d_head]`` (keys, then values).
    """

    kv: np.ndarray = field(repr=False)
    position_ids: tuple[int, ...]
    model_fingerprint: int
    source_fingerprint: int
    created_at: float = 0.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.kv.ndim != 5 or self.kv.shape[0] != 2:
            raise ShapeError(f"cache array must be [2, layers, heads, voco, d_head], got {self.kv.shape}")
        if self.kv.shape[3] != len(self.position_ids):
            raise ShapeError("position_ids length does not match cached VoCo count")
        if any(b <= a for a, b in zip(self.position_ids, self.position_ids[1:])):
            raise UsageError("cache position ids must be strictly increasing")
        self.kv.setflags(write=False)

    @property
    def num_voco(self) -> int:
        return self.kv.shape[3]

    @property
    def n_layers(self) -> int:
        return self.kv.shape[1]

    @property
    def layers(self) -> list[LayerKV]:
        return [LayerKV(self.kv[0, i].astype(np.float64), self.kv[1, i].astype(np.float64))
                for i in range(self.n_layers)]

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.model_fingerprint, self.source_fingerprint, self.num_voco)

    @property
    def nbytes(self) -> int:
        return header_size(self.num_voco) + self.kv.size * _BYTES_PER_ELEMENT[self.dtype]

    def digest(self) -> int:
        return stable_hash(serialize_cache(self))

    def __eq__(self, other) -> bool:
        return (isinstance(other, VoCoCache) and self.dtype == other.dtype
                and self.position_ids == other.position_ids
                and self.model_fingerprint == other.model_fingerprint
                and self.source_fingerprint == other.source_fingerprint
                and self.kv.shape == other.kv.shape
                and self.kv.tobytes() == other.kv.tobytes())

    def __hash__(self):
        return hash(self.key)


def header_size(num_voco: int) -> int:
    return _HEADER.size + 4 * num_voco


# ---------------------------------------------------------------- batched core


def compress_frames(params: ModelParams, frames: Sequence[np.ndarray], num_voco: int,
                    independent: bool = False) -> tuple[list[LayerKV], np.ndarray]:
    """Compress frames ``[B, n_t]`` one after another into a batched VoCo K/V sequence.

    Frame t's VoCo tokens see their own vision tokens and, unless
    ``independent``, the VoCo entries of frames before t. Returns per-layer
    K/V of shape ``[B, H, k*num_voco, d_head]`` (graph-connected when grad is
    enabled) and their global position ids.
    """
    if num_voco < 1:
        raise UsageError("num_voco must be >= 1")
    if not len(frames):
        raise UsageError("need at least one frame")
    widest = max(f.shape[1] for f in frames)
    cfg = params.config
    past: list[LayerKV] | None = None
    positions: list[np.ndarray] = []
    base = 0
    for vision in frames:
        n = vision.shape[1]
        layout = build_layout(n, num_voco, 0).shifted(widest - n + base)
        if layout.position_ids.max() >= cfg.max_positions:
            raise CapacityError(f"frame needs position {int(layout.position_ids.max())}, "
                                f"max_positions={cfg.max_positions}")
        own = build_voco_mask(layout).bits
        prior = past[0].length if past else 0
        mask = np.zeros((n + num_voco, prior + n + num_voco), dtype=bool)
        mask[:, prior:] = own
        mask[n:, :prior] = not independent
        ids = np.concatenate([vision, np.zeros((vision.shape[0], num_voco), dtype=np.int64)], axis=1)
        out = forward(params, layout, ids, mask, past)
        fresh = [LayerKV(kv.keys[:, :, n:], kv.values[:, :, n:]) for kv in out.present]
        past = fresh if past is None else [
            LayerKV(T.concat([p.keys, f.keys], axis=2), T.concat([p.values, f.values], axis=2))
            for p, f in zip(past, fresh)]
        positions.append(layout.position_ids[n:])
        base += num_voco
    return past, np.concatenate(positions)


def query(params: ModelParams, past: Sequence[LayerKV], past_positions: np.ndarray, text_ids: np.ndarray,
          return_attn: bool = False) -> ForwardOutput:
    """Second pass: text ``[B, m]`` attending to every cached entry and causally to itself."""
    m = text_ids.shape[1]
    p = past[0].length if past else 0
    start = int(past_positions[-1]) + 1 if len(past_positions) else 0
    mask = np.ones((m, p + m), dtype=bool)
    mask[:, p:] = np.tril(np.ones((m, m), dtype=bool))
    return forward(params, text_layout(m, start), text_ids, mask, past, return_attn)


# ---------------------------------------------------------------- single-example API


def _source_fingerprint(vision_ids: np.ndarray, offset: int, prior: Sequence[VoCoCache]) -> int:
    payload = np.ascontiguousarray(vision_ids, dtype="<i4").tobytes()
    if offset or prior:
        payload += struct.pack("<q", offset) + b"".join(struct.pack("<Q", c.source_fingerprint) for c in prior)
    return stable_hash(payload)


def _check_caches(params: ModelParams, caches: Sequence[VoCoCache]) -> tuple[list[LayerKV], np.ndarray]:
    fp = params.fingerprint()
    for c in caches:
        if c.model_fingerprint != fp:
            raise StalenessError(f"cache built by model {c.model_fingerprint:016x}, current model is {fp:016x}")
        if c.n_layers != params.config.n_layers:
            raise ShapeError("cache layer count does not match model")
    positions = np.array([p for c in caches for p in c.position_ids], dtype=np.int64)
    if np.any(np.diff(positions) <= 0):
        raise UsageError("caches overlap or are out of order: position ids must strictly increase")
    if not caches:
        return [], positions
    kv = np.concatenate([c.kv.astype(np.float64) for c in caches], axis=3)
    return [LayerKV(kv[0, i][None], kv[1, i][None]) for i in range(params.config.n_layers)], positions


def compress(params: ModelParams, vision_ids, num_voco: int, position_offset: int = 0,
             prior: Sequence[VoCoCache] = (), dtype: str | None = None) -> VoCoCache:
    """First pass: turn one image's vision token ids into a VoCo cache.

    ``prior`` caches are visible to the new VoCo tokens (video compression);
    ``position_offset`` shifts the whole [vision, VoCo] span.
    """
    vision = np.asarray(vision_ids, dtype=np.int64).reshape(1, -1)
    dtype = dtype or params.config.cache_dtype
    if dtype not in DTYPE_CODES:
        raise UsageError(f"unknown cache dtype {dtype!r}")
    if num_voco < 1:
        raise UsageError("num_voco must be >= 1")
    past, _ = _check_caches(params, prior)
    n = vision.shape[1]
    layout = build_layout(n, num_voco, 0).shifted(position_offset)
    if prior and layout.position_ids[n] <= prior[-1].position_ids[-1]:
        raise UsageError("new VoCo positions must follow the prior caches")
    if layout.position_ids.max(initial=0) >= params.config.max_positions or position_offset < 0:
        raise CapacityError(f"[vision, VoCo] span does not fit max_positions={params.config.max_positions}")
    p = past[0].length if past else 0
    mask = np.zeros((n + num_voco, p + n + num_voco), dtype=bool)
    mask[:, p:] = build_voco_mask(layout).bits
    mask[n:, :p] = True
    ids = np.concatenate([vision, np.zeros((1, num_voco), dtype=np.int64)], axis=1)
    with T.no_grad():
        out = forward(params, layout, ids, mask, past or None)
    kv = np.stack([np.stack([l.keys.data[0, :, n:], l.values.data[0, :, n:]]) for l in out.present], axis=1)
    return VoCoCache(
        kv=np.ascontiguousarray(kv.astype(dtype)),
        position_ids=tuple(int(x) for x in layout.position_ids[n:]),
        model_fingerprint=params.fingerprint(),
        source_fingerprint=_source_fingerprint(vision, position_offset, prior),
        created_at=time.time(),
        dtype=dtype,
    )


def infer_with_cache(params: ModelParams, caches: Sequence[VoCoCache], text_token_ids) -> np.ndarray:
    """Logits ``[m, text_vocab]`` for the text tokens, given ordered caches."""
    text = np.asarray(text_token_ids, dtype=np.int64).reshape(1, -1)
    past, positions = _check_caches(params, caches)
    if text.shape[1] == 0:
        return np.zeros((0, params.config.text_vocab))
    with T.no_grad():
        return query(params, past, positions, text).logits.data[0]


def single_pass_reference(params: ModelParams, vision_ids, num_voco: int, text_token_ids) -> np.ndarray:
    """Text logits from one forward pass over ``[vision, VoCo, text]`` under the isolation mask."""
    vision = np.asarray(vision_ids, dtype=np.int64).reshape(-1)
    text = np.asarray(text_token_ids, dtype=np.int64).reshape(-1)
    layout = build_layout(len(vision), num_voco, len(text))
    ids = np.concatenate([vision, np.zeros(num_voco, dtype=np.int64), text])
    with T.no_grad():
        out = forward(params, layout, ids, build_voco_mask(layout))
    return out.logits.data[len(vision) + num_voco:]


# ---------------------------------------------------------------- cache file


def serialize_cache(cache: VoCoCache) -> bytes:
    _, L, H, v, dh = cache.kv.shape
    header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, DTYPE_CODES[cache.dtype], L, H, dh, v,
                          cache.model_fingerprint, cache.source_fingerprint, v)
    ids = struct.pack(f"<{v}I", *cache.position_ids)
    le = "<f8" if cache.dtype == "float64" else "<f4"
    # per layer: K block then V block
    body = np.ascontiguousarray(cache.kv.transpose(1, 0, 2, 3, 4), dtype=le).tobytes()
    return header + ids + body


def deserialize_cache(buf: bytes) -> VoCoCache:
    if len(buf) < _HEADER.size:
        raise FormatError("cache truncated inside header", len(buf))
    magic, version, dtype_code, L, H, dh, v, model_fp, source_fp, count = _HEADER.unpack_from(buf, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad cache magic {magic!r}", 0)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}", 4)
    if dtype_code not in DTYPE_NAMES:
        raise FormatError(f"unknown dtype code {dtype_code}", 6)
    if count != v:
        raise FormatError(f"position id count {count} != num_voco {v}", _HEADER.size - 4)
    offset = _HEADER.size
    if offset + 4 * count > len(buf):
        raise FormatError("cache truncated inside position ids", len(buf))
    positions = struct.unpack_from(f"<{count}I", buf, offset)
    offset += 4 * count
    dtype = DTYPE_NAMES[dtype_code]
    bpe = _BYTES_PER_ELEMENT[dtype]
    nbytes = 2 * L * H * v * dh * bpe
    if offset + nbytes > len(buf):
        raise FormatError(f"cache truncated: need {nbytes} payload bytes, have {len(buf) - offset}", len(buf))
    if offset + nbytes < len(buf):
        raise FormatError(f"{len(buf) - offset - nbytes} trailing bytes", offset + nbytes)
    le = "<f8" if dtype == "float64" else "<f4"
    arr = np.frombuffer(buf, dtype=le, count=nbytes // bpe, offset=offset).reshape(L, 2, H, v, dh)
    try:
        return VoCoCache(np.ascontiguousarray(arr.transpose(1, 0, 2, 3, 4), dtype=dtype), tuple(positions),
                         model_fp, source_fp, 0.0, dtype)
    except UsageError as exc:
        raise FormatError(f"invalid cache contents: {exc}", _HEADER.size) from exc


# ---------------------------------------------------------------- store


class CacheStore:
    """LRU store of VoCo caches bounded by total serialized bytes.

    Keys are ``(model_fingerprint, source_fingerprint, num_voco)``. A lock
    serializes mutation; ``get`` also mutates (recency), so it takes the lock.
    """

    def __init__(self, capacity_bytes: int):
        if capacity_bytes <= 0:
            raise UsageError("capacity must be positive")
        self.capacity = capacity_bytes
        self._entries: OrderedDict[tuple[int, int, int], VoCoCache] = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    @property
    def total_bytes(self) -> int:
        return self._bytes

    def keys(self) -> list[tuple[int, int, int]]:
        return list(self._entries)

    def put(self, cache: VoCoCache) -> list[tuple[int, int, int]]:
        """Insert ``cache``; returns the keys evicted to make room."""
        size = cache.nbytes
        if size > self.capacity:
            raise CapacityError(f"cache of {size} bytes exceeds store capacity {self.capacity}")
        evicted = []
        with self._lock:
            old = self._entries.pop(cache.key, None)
            if old is not None:
                self._bytes -= old.nbytes
            while self._bytes + size > self.capacity:
                key, victim = self._entries.popitem(last=False)
                self._bytes -= victim.nbytes
                evicted.append(key)
            self._entries[cache.key] = cache
            self._bytes += size
        return evicted

    def get(self, key: tuple[int, int, int]) -> VoCoCache | None:
        with self._lock:
            cache = self._entries.get(key)
            if cache is not None:
                self._entries.move_to_end(key)
            return cache

    def evict(self, key: tuple[int, int, int]) -> bool:
        with self._lock:
            cache = self._entries.pop(key, None)
            if cache is None:
                return False
            self._bytes -= cache.nbytes
            return True
