"""Toy decoder-only transformer with separate vision-patch and text vocabularies.

Blocks are pre-layernorm: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``.
Positions use a learned absolute table indexed by the global position ids
carried in the layout, so a forward pass continued from a past K/V cache is
numerically the same computation as the uninterrupted pass.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from voco import tensor as T
from voco.errors import CapacityError, ConfigError, FormatError, ShapeError, UsageError
from voco.layout import AttentionMask, Kind, SequenceLayout, text_layout
from voco.tensor import Tensor

DTYPE_CODES = {"float64": 1, "float32": 2}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    text_vocab: int = 64
    patch_vocab: int = 16
    max_positions: int = 128
    mlp_ratio: int = 4
    cache_dtype: str = "float64"

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_layers < 0 or self.text_vocab < 1 or self.patch_vocab < 1 or self.max_positions < 1:
            raise ConfigError("n_layers, vocab sizes and max_positions must be positive")
        if self.cache_dtype not in DTYPE_CODES:
            raise ConfigError(f"cache_dtype must be one of {sorted(DTYPE_CODES)}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = OrderedDict([
        ("text_emb", (cfg.text_vocab, d)),
        ("patch_emb", (cfg.patch_vocab, d)),
        ("voco_emb", (1, d)),
        ("pos_emb", (cfg.max_positions, d)),
    ])
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update([
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "qkv.w", (d, 3 * d)), (p + "qkv.b", (3 * d,)),
            (p + "out.w", (d, d)), (p + "out.b", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "fc1.w", (d, h)), (p + "fc1.b", (h,)),
            (p + "fc2.w", (h, d)), (p + "fc2.b", (d,)),
        ])
    shapes.update([("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, cfg.text_vocab)), ("head.b", (cfg.text_vocab,))])
    return shapes


class ModelParams:
    """Named parameter tensors in declaration order plus the config and seed they came from."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]", seed: int = 0):
        self.config = config
        self.tensors = tensors
        self.seed = seed
        self._fingerprint: int | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def touch(self) -> None:
        """Invalidate the memoized fingerprint after an in-place update."""
        self._fingerprint = None

    def fingerprint(self) -> int:
        if self._fingerprint is None:
            self._fingerprint = stable_hash(checkpoint_bytes(self))
        return self._fingerprint

    def copy(self) -> ModelParams:
        tensors = OrderedDict((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.tensors.items())
        return ModelParams(self.config, tensors, self.seed)


def stable_hash(payload: bytes) -> int:
    """64-bit content hash used for model and source fingerprints."""
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fan-in scaled weights; embeddings at 1/sqrt(d); residual outputs shrunk by 1/sqrt(2L).

    The VoCo embedding starts near the mean patch embedding.
    """
    rng = np.random.default_rng(seed)
    d = config.d_model
    resid_scale = 1.0 / np.sqrt(2 * max(config.n_layers, 1))
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        elif name == "voco_emb":
            # placeholder; set from the patch table below
            data = np.zeros(shape)
        elif name.endswith("_emb"):
            data = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape)
        else:
            std = 1.0 / np.sqrt(shape[0])
            if name.endswith(("out.w", "fc2.w")):
                std *= resid_scale
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    patch = tensors["patch_emb"].data
    tensors["voco_emb"].data[...] = patch.mean(axis=0, keepdims=True) + rng.normal(0.0, 0.1 / np.sqrt(d), size=(1, d))
    return ModelParams(config, tensors, seed)


# ---------------------------------------------------------------- forward


@dataclass
class LayerKV:
    """Keys and values of one layer, shaped ``[batch?, n_heads, L, d_head]``."""

    keys: Tensor
    values: Tensor

    def __post_init__(self):
        self.keys, self.values = T.as_tensor(self.keys), T.as_tensor(self.values)
        if self.keys.shape != self.values.shape:
            raise ShapeError(f"keys {self.keys.shape} and values {self.values.shape} differ")

    @property
    def length(self) -> int:
        return self.keys.shape[-2]


@dataclass
class ForwardOutput:
    logits: Tensor
    present: list[LayerKV]
    attn_probs: list[np.ndarray] | None = None


def embed(params: ModelParams, layout: SequenceLayout, token_ids: np.ndarray) -> Tensor:
    """Token embeddings for a batch ``[B, L]`` of ids laid out per ``layout`` (no positions)."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape[-1] != layout.total_len:
        raise ShapeError(f"token ids length {ids.shape[-1]} != layout length {layout.total_len}")
    parts = []
    for seg in layout.segments:
        chunk = ids[:, seg.start:seg.stop]
        if seg.kind == Kind.VISION:
            parts.append(T.embedding(params["patch_emb"], chunk))
        elif seg.kind == Kind.TEXT:
            parts.append(T.embedding(params["text_emb"], chunk))
        else:
            parts.append(T.embedding(params["voco_emb"], np.zeros_like(chunk)))
    return T.concat(parts, axis=1)


def _as_past(past: Sequence[LayerKV] | None, batch: int, n_layers: int) -> list[tuple[Tensor, Tensor]] | None:
    if not past:
        return None
    if len(past) != n_layers:
        raise UsageError(f"past has {len(past)} layers, model has {n_layers}")
    out = []
    for kv in past:
        k, v = kv.keys, kv.values
        if k.ndim == 3:
            k, v = k.reshape((1,) + k.shape), v.reshape((1,) + v.shape)
        if k.shape[0] != batch:
            if k.shape[0] != 1 or k.requires_grad:
                raise ShapeError(f"past batch {k.shape[0]} != input batch {batch}")
            k = Tensor(np.broadcast_to(k.data, (batch,) + k.shape[1:]))
            v = Tensor(np.broadcast_to(v.data, (batch,) + v.shape[1:]))
        out.append((k, v))
    return out


def forward_embeds(params: ModelParams, x: Tensor, position_ids: np.ndarray, mask,
                   past: Sequence[LayerKV] | None = None, return_attn: bool = False) -> ForwardOutput:
    """Run the decoder on input embeddings ``x`` of shape ``[B, L, d_model]``."""
    cfg = params.config
    B, L, d = x.shape
    H, dh = cfg.n_heads, cfg.d_head
    pos = np.asarray(position_ids, dtype=np.int64)
    if pos.shape != (L,):
        raise ShapeError(f"position ids shape {pos.shape} != ({L},)")
    if L and (pos.min() < 0 or pos.max() >= cfg.max_positions):
        raise CapacityError(f"position {int(pos.max())} exceeds max_positions={cfg.max_positions}")
    kv_past = _as_past(past, B, cfg.n_layers)
    past_len = kv_past[0][0].shape[2] if kv_past else 0
    bits = mask.bits if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    if bits.shape[-2:] != (L, past_len + L):
        raise UsageError(f"mask shape {bits.shape} does not cover {L} rows x {past_len + L} columns")
    bits = bits[None, None] if bits.ndim == 2 else bits[:, None]

    h = x + T.embedding(params["pos_emb"], pos)
    scale = 1.0 / np.sqrt(dh)
    present, probs_out = [], [] if return_attn else None
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        a = T.layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = (a @ params[p + "qkv.w"] + params[p + "qkv.b"]).reshape(B, L, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        present.append(LayerKV(k, v))
        if kv_past:
            k = T.concat([kv_past[i][0], k], axis=2)
            v = T.concat([kv_past[i][1], v], axis=2)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        probs = T.masked_softmax(scores, bits)
        if return_attn:
            probs_out.append(probs.data)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        h = h + (ctx @ params[p + "out.w"] + params[p + "out.b"])
        m = T.layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        m = T.gelu(m @ params[p + "fc1.w"] + params[p + "fc1.b"])
        h = h + (m @ params[p + "fc2.w"] + params[p + "fc2.b"])
    h = T.layernorm(h, params["ln_f.g"], params["ln_f.b"])
    logits = h @ params["head.w"] + params["head.b"]
    return ForwardOutput(logits, present, probs_out)


def forward(params: ModelParams, layout: SequenceLayout, token_ids, mask,
            past: Sequence[LayerKV] | None = None, return_attn: bool = False) -> ForwardOutput:
    """Forward over ``layout``; 1-d ``token_ids`` give unbatched outputs.

    ``mask`` has one row per layout position and ``past_len + L`` columns.
    Entries of ``token_ids`` at VoCo positions are ignored.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    out = forward_embeds(params, embed(params, layout, ids), layout.position_ids, mask, past, return_attn)
    if single:
        out.logits = out.logits[0]
        out.present = [LayerKV(kv.keys[0], kv.values[0]) for kv in out.present]
        if return_attn:
            out.attn_probs = [a[0] for a in out.attn_probs]
    return out


@dataclass
class DecodeState:
    """Everything greedy decoding needs to continue a sequence."""

    past: list[LayerKV]
    next_position: int
    last_logits: np.ndarray


def greedy_decode(params: ModelParams, state: DecodeState, max_new: int) -> list[int]:
    """Argmax decoding; ties go to the lowest token id."""
    past = [LayerKV(kv.keys.data if isinstance(kv.keys, Tensor) else kv.keys,
                    kv.values.data if isinstance(kv.values, Tensor) else kv.values) for kv in state.past]
    logits, pos, out = np.asarray(state.last_logits), state.next_position, []

    with T.no_grad():
        for step in range(max_new):
            tok = int(np.argmax(logits))
            out.append(tok)
            if step == max_new - 1:
                break
            past_len = past[0].length if past else 0
            res = forward(params, text_layout(1, pos), np.array([tok]), np.ones((1, past_len + 1), dtype=bool), past)
            past = [LayerKV(T.concat([p.keys, r.keys], axis=1), T.concat([p.values, r.values], axis=1))
                    for p, r in zip(past, res.present)] if past else res.present
            logits, pos = res.logits.data[-1], pos + 1
    return out


# ---------------------------------------------------------------- checkpoint file

CKPT_MAGIC = b"VOCO"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHH7IQI")


def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = params.config
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, DTYPE_CODES[cfg.cache_dtype],
        cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.text_vocab, cfg.patch_vocab, cfg.max_positions, cfg.mlp_ratio,
        params.seed, len(params.tensors),
    )
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors.values())
    return header + body


def params_from_bytes(buf: bytes) -> ModelParams:
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("checkpoint truncated inside header", len(buf))
    magic, version, dtype_code, *dims, seed, count = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if dtype_code not in DTYPE_NAMES:
        raise FormatError(f"unknown dtype code {dtype_code}", 6)
    names = ("d_model", "n_layers", "n_heads", "text_vocab", "patch_vocab", "max_positions", "mlp_ratio")
    try:
        cfg = ModelConfig(**dict(zip(names, dims)), cache_dtype=DTYPE_NAMES[dtype_code])
    except ConfigError as exc:
        raise FormatError(f"invalid config in header: {exc}", 8) from exc
    shapes = param_shapes(cfg)
    if count != len(shapes):
        raise FormatError(f"header declares {count} tensors, config implies {len(shapes)}", _CKPT_HEADER.size - 4)
    offset = _CKPT_HEADER.size
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in shapes.items():
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(buf):
            raise FormatError(f"checkpoint truncated in tensor {name}", len(buf))
        data = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True)
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last tensor", offset)
    return ModelParams(cfg, tensors, seed)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_field_names() -> list[str]:
    return [f.name for f in fields(ModelConfig)]
