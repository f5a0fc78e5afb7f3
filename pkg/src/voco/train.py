"""Training and evaluation protocol for the compression experiments.

Three models share one recipe and differ only in masks:

* upper bound: trained and evaluated with a plain causal mask, VoCo tokens present;
* lower bound: the upper-bound weights evaluated with text isolated from vision;
* VoCo model: trained with the isolation mask, evaluated by two-stage inference.

Retention is ``(candidate - lower) / (upper - lower)``.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from voco import tensor as T
from voco.data import QUESTION_KINDS, Batch, Dataset, GridTask, gen_dataset
from voco.errors import ConfigError, ShapeError, TrainingError, UsageError
from voco.layout import build_causal_mask, build_mask, build_video_layout
from voco.model import ModelConfig, ModelParams, forward, forward_embeds, init_params
from voco.runtime import compress_frames, query
from voco.tensor import Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("sft", "kl")
MASK_MODES = ("voco", "causal")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    min_lr_ratio: float = 0.1
    seed: int = 7
    objective: str = "sft"
    num_voco: int = 1
    mask_mode: str = "voco"
    grad_clip: float = 1.0
    eval_count: int = 512
    eval_every: int = 0
    cache_grad: str = "full"  # video: backprop through frame compression ("full") or treat caches as inputs ("frozen")
    independent_frames: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.num_voco < 1:
            raise ConfigError("num_voco must be >= 1")
        if self.cache_grad not in ("full", "frozen"):
            raise ConfigError("cache_grad must be 'full' or 'frozen'")

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**asdict(self), **changes})


# ---------------------------------------------------------------- optimizer


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr``."""
    if cfg.warmup and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(cfg.steps - cfg.warmup, 1)
    progress = min((step - cfg.warmup) / span, 1.0)
    floor = cfg.lr * cfg.min_lr_ratio
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


class Adam:
    BETAS = (0.9, 0.98)
    EPS = 1e-9

    def __init__(self, params: list[Tensor]):
        self.params = params
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def clip(self, max_norm: float) -> float:
        norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None))
        if max_norm and norm > max_norm:
            for p in self.params:
                if p.grad is not None:
                    p.grad *= max_norm / norm
        return norm

    def step(self, lr: float) -> None:
        b1, b2 = self.BETAS
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.EPS)


# ---------------------------------------------------------------- sequences


def video_layout(batch: Batch, num_voco: int, independent: bool = False):
    k, n = batch.vision.shape[1:]
    return build_video_layout([(n, num_voco)] * k, batch.text.shape[1], independent)


def sequence_ids(batch: Batch, num_voco: int) -> np.ndarray:
    B, k, _ = batch.vision.shape
    pad = np.zeros((B, num_voco), dtype=np.int64)
    parts = []
    for t in range(k):
        parts += [batch.vision[:, t], pad]
    return np.concatenate(parts + [batch.text], axis=1)


def answer_logits(params: ModelParams, batch: Batch, num_voco: int, mask_mode: str,
                  independent: bool = False) -> Tensor:
    """Single-pass logits ``[B, q, V]`` at the answer-predicting text positions."""
    layout = video_layout(batch, num_voco, independent)
    out = forward(params, layout, sequence_ids(batch, num_voco), build_mask(layout, mask_mode))
    text_start = layout.total_len - batch.text.shape[1]
    return out.logits[:, text_start + batch.answer_slots]


def two_stage_answer_logits(params: ModelParams, batch: Batch, num_voco: int, independent: bool = False,
                            cache_grad: str = "full") -> Tensor:
    """Logits at answer positions via compress-then-query."""
    frames = [batch.vision[:, t] for t in range(batch.vision.shape[1])]
    if cache_grad == "frozen" or not T.grad_enabled():
        with T.no_grad():
            past, positions = compress_frames(params, frames, num_voco, independent)
        past = [type(kv)(kv.keys.detach(), kv.values.detach()) for kv in past]
    else:
        past, positions = compress_frames(params, frames, num_voco, independent)
    return query(params, past, positions, batch.text).logits[:, batch.answer_slots]


def distill_kl_loss(teacher_logits, student_logits, positions=None) -> Tensor:
    """Mean per-position KL(teacher || student) over the selected positions.

    ``positions`` is a boolean mask over the leading axes (all positions if None).
    """
    teacher_logits, student_logits = T.as_tensor(teacher_logits), T.as_tensor(student_logits)
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"teacher {teacher_logits.shape} and student {student_logits.shape} differ")
    kl = T.kl_divergence(teacher_logits, student_logits)
    sel = np.ones(kl.shape, dtype=bool) if positions is None else np.asarray(positions, dtype=bool)
    if sel.shape != kl.shape:
        raise ShapeError(f"positions mask {sel.shape} does not match {kl.shape}")
    count = int(sel.sum())
    if count == 0:
        raise UsageError("no positions selected for distillation")
    return T.tsum(T.mul(kl, sel / count))


# ---------------------------------------------------------------- evaluation


def accuracy(logits: np.ndarray, batch: Batch) -> dict[str, float]:
    """Per-kind argmax accuracy (ties to the lowest id) plus ``all``."""
    pred = np.argmax(logits, axis=-1)
    hit = pred == batch.answers
    out = {}
    for k, name in enumerate(QUESTION_KINDS):
        sel = batch.kinds == k
        if sel.any():
            out[name] = float(hit[sel].mean())
    out["all"] = float(hit.mean())
    return out


def evaluate(params: ModelParams, batch: Batch, num_voco: int, mask_mode: str,
             independent: bool = False, chunk: int = 128) -> dict[str, float]:
    """Accuracy under ``mask_mode``; ``voco`` runs the two-stage cache path."""
    logits = []
    with T.no_grad():
        for i in range(0, len(batch), chunk):
            part = batch[i:i + chunk]
            if mask_mode == "voco":
                logits.append(two_stage_answer_logits(params, part, num_voco, independent).data)
            else:
                logits.append(answer_logits(params, part, num_voco, mask_mode, independent).data)
    return accuracy(np.concatenate(logits), batch)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    params: ModelParams
    config: TrainConfig
    losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    curve: list[tuple[int, float]] = field(default_factory=list)
    compressor: "Compressor | None" = None


def _batches(data: Batch, cfg: TrainConfig):
    n = len(data)
    rng = np.random.default_rng([cfg.seed, 3])
    order = np.arange(n)
    pos = 0
    for _ in range(cfg.steps):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        yield data[order[pos:pos + cfg.batch_size]]
        pos += cfg.batch_size


def fit(params: ModelParams, loss_fn: Callable[[Batch], Tensor], data: Batch, cfg: TrainConfig,
        extra: list[Tensor] | None = None, probe: Callable[[], float] | None = None) -> TrainResult:
    """Adam over ``params`` (and ``extra`` tensors) for ``cfg.steps`` steps."""
    tensors = params.parameters() + list(extra or [])
    opt = Adam(tensors)
    result = TrainResult(params, cfg)
    if probe is not None:
        result.curve.append((0, probe()))
    for step, batch in enumerate(_batches(data, cfg)):
        opt.zero_grad()
        loss = loss_fn(batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("loss is not finite", step)
        T.backward(loss)
        opt.clip(cfg.grad_clip)
        opt.step(lr_at(step, cfg))
        params.touch()
        result.losses.append(value)
        if cfg.eval_every and probe is not None and (step + 1) % cfg.eval_every == 0:
            result.curve.append((step + 1, probe()))
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, value)
    opt.zero_grad()
    return result


def make_dataset(task: GridTask, cfg: TrainConfig) -> Dataset:
    return gen_dataset(task, max(cfg.steps * cfg.batch_size, cfg.batch_size), cfg.seed, cfg.eval_count)


def _check_vocab(model_cfg: ModelConfig, task: GridTask) -> None:
    if model_cfg.text_vocab < len(task.vocab):
        raise ConfigError(f"text_vocab={model_cfg.text_vocab} < task vocabulary {len(task.vocab)}")
    if model_cfg.patch_vocab < task.patch_vocab:
        raise ConfigError(f"patch_vocab={model_cfg.patch_vocab} < task symbols {task.patch_vocab}")


def _primary(task: GridTask) -> str:
    return task.kinds[0]


def train_lm(model_cfg: ModelConfig, cfg: TrainConfig, data: Dataset, init: ModelParams | None = None,
             teacher: ModelParams | None = None) -> TrainResult:
    """Train a VoCo-token model under ``cfg.mask_mode`` with the chosen objective."""
    _check_vocab(model_cfg, data.task)
    params = init.copy() if init is not None else init_params(model_cfg, cfg.seed)
    v, mode, indep = cfg.num_voco, cfg.mask_mode, cfg.independent_frames
    if cfg.objective == "kl" and teacher is None:
        raise UsageError("kl objective needs a teacher model")

    def student(batch: Batch) -> Tensor:
        if mode == "voco" and batch.vision.shape[1] > 1 and cfg.cache_grad == "frozen":
            return two_stage_answer_logits(params, batch, v, indep, "frozen")
        return answer_logits(params, batch, v, mode, indep)

    def loss_fn(batch: Batch) -> Tensor:
        logits = student(batch)
        if cfg.objective == "sft":
            return T.cross_entropy(logits, batch.answers)
        with T.no_grad():
            target = answer_logits(teacher, batch, v, "causal").data
        return distill_kl_loss(target, logits)

    probe = None
    if cfg.objective == "kl" and cfg.eval_every:
        probe_batch = data.eval[:256]
        with T.no_grad():
            probe_target = answer_logits(teacher, probe_batch, v, "causal").data

        def probe() -> float:
            with T.no_grad():
                return distill_kl_loss(probe_target, answer_logits(params, probe_batch, v, mode)).item()

    result = fit(params, loss_fn, data.train, cfg, probe=probe)
    result.metrics = evaluate(params, data.eval, v, mode, indep)
    return result


def train_upper_bound(model_cfg: ModelConfig, cfg: TrainConfig, data: Dataset) -> TrainResult:
    """VoCo tokens in the sequence, plain causal mask for training and evaluation."""
    if cfg.mask_mode != "causal":
        raise ConfigError("upper bound is trained with mask_mode=causal")
    return train_lm(model_cfg, cfg, data)


def eval_lower_bound(params: ModelParams, data: Dataset, num_voco: int = 1) -> dict[str, float]:
    """Upper-bound weights evaluated with text isolated from vision (two-stage path)."""
    return evaluate(params, data.eval, num_voco, "voco")


def train_voco(model_cfg: ModelConfig, cfg: TrainConfig, data: Dataset,
               teacher: ModelParams | None = None) -> TrainResult:
    if cfg.mask_mode != "voco":
        raise ConfigError("VoCo model is trained with mask_mode=voco")
    return train_lm(model_cfg, cfg, data, teacher=teacher)


def continue_train_video(params: ModelParams, cfg: TrainConfig, task: GridTask) -> TrainResult:
    """Continue training an image-compression model on multi-frame questions."""
    data = make_dataset(task, cfg)
    return train_lm(params.config, cfg.replace(mask_mode="voco"), data, init=params)


# ---------------------------------------------------------------- baseline compressors


class Compressor:
    """External module mapping vision tokens to one pseudo-token placed where the VoCo token would be."""

    kind = "base"

    def __init__(self, tensors: OrderedDict[str, Tensor]):
        self.tensors = tensors

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def features(self, params: ModelParams, vision: np.ndarray) -> Tensor:
        n = vision.shape[1]
        return T.embedding(params["patch_emb"], vision) + T.embedding(params["pos_emb"], np.arange(n))

    def __call__(self, params: ModelParams, vision: np.ndarray) -> Tensor:
        raise NotImplementedError


class AvgPoolCompressor(Compressor):
    """Mean of vision features followed by a learned linear map."""

    kind = "avgpool"

    @classmethod
    def init(cls, d_model: int, seed: int) -> AvgPoolCompressor:
        rng = np.random.default_rng([seed, 11])
        return cls(OrderedDict([
            ("proj.w", Tensor(np.eye(d_model) + rng.normal(0, 0.02, (d_model, d_model)), requires_grad=True)),
            ("proj.b", Tensor(np.zeros(d_model), requires_grad=True)),
        ]))

    def __call__(self, params: ModelParams, vision: np.ndarray) -> Tensor:
        pooled = self.features(params, vision).mean(axis=1, keepdims=True)
        return pooled @ self.tensors["proj.w"] + self.tensors["proj.b"]


class QueryFormerCompressor(Compressor):
    """One learned query cross-attending to vision features, then an MLP block and a projector."""

    kind = "qformer"

    @classmethod
    def init(cls, d_model: int, n_heads: int, seed: int) -> QueryFormerCompressor:
        rng = np.random.default_rng([seed, 12])
        d, h = d_model, 4 * d_model

        def w(*shape):
            return Tensor(rng.normal(0, 0.02, shape), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

        tensors = OrderedDict([
            ("query", w(1, d)),
            ("q.w", w(d, d)), ("k.w", w(d, d)), ("v.w", w(d, d)), ("o.w", w(d, d)),
            ("ln1.g", const(1.0, d)), ("ln1.b", const(0.0, d)),
            ("fc1.w", w(d, h)), ("fc1.b", const(0.0, h)), ("fc2.w", w(h, d)), ("fc2.b", const(0.0, d)),
            ("ln2.g", const(1.0, d)), ("ln2.b", const(0.0, d)),
            ("proj.w", Tensor(np.eye(d), requires_grad=True)), ("proj.b", const(0.0, d)),
        ])
        out = cls(tensors)
        out.n_heads = n_heads
        return out

    n_heads = 1

    def __call__(self, params: ModelParams, vision: np.ndarray) -> Tensor:
        p = self.tensors
        B, n = vision.shape
        d = p["query"].shape[1]
        H = self.n_heads
        dh = d // H
        feats = self.features(params, vision)
        q = (p["query"] @ p["q.w"]).reshape(1, 1, H, dh).transpose(0, 2, 1, 3)
        k = (feats @ p["k.w"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        v = (feats @ p["v.w"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        att = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, 1, d)
        x = T.layernorm(p["query"] + ctx @ p["o.w"], p["ln1.g"], p["ln1.b"])
        x = T.layernorm(x + T.gelu(x @ p["fc1.w"] + p["fc1.b"]) @ p["fc2.w"] + p["fc2.b"], p["ln2.g"], p["ln2.b"])
        return x @ p["proj.w"] + p["proj.b"]


def baseline_answer_logits(params: ModelParams, comp: Compressor, batch: Batch) -> Tensor:
    """``[pseudo-token, text]`` under a causal mask; the pseudo-token takes the VoCo slot position."""
    vision = batch.vision[:, 0]
    n, m = vision.shape[1], batch.text.shape[1]
    x = T.concat([comp(params, vision), T.embedding(params["text_emb"], batch.text)], axis=1)
    out = forward_embeds(params, x, np.arange(n, n + 1 + m), build_causal_mask(1 + m))
    return out.logits[:, 1 + batch.answer_slots]


def train_baseline(kind: str, model_cfg: ModelConfig, cfg: TrainConfig, data: Dataset) -> TrainResult:
    """Train LM and an external compressor (``avgpool`` or ``qformer``) end to end."""
    _check_vocab(model_cfg, data.task)
    params = init_params(model_cfg, cfg.seed)
    if kind == "avgpool":
        comp: Compressor = AvgPoolCompressor.init(model_cfg.d_model, cfg.seed)
    elif kind == "qformer":
        comp = QueryFormerCompressor.init(model_cfg.d_model, model_cfg.n_heads, cfg.seed)
    else:
        raise UsageError(f"unknown baseline {kind!r}")

    def loss_fn(batch: Batch) -> Tensor:
        return T.cross_entropy(baseline_answer_logits(params, comp, batch), batch.answers)

    result = fit(params, loss_fn, data.train, cfg, extra=comp.parameters())
    result.compressor = comp
    with T.no_grad():
        logits = np.concatenate([baseline_answer_logits(params, comp, data.eval[i:i + 128]).data
                                 for i in range(0, len(data.eval), 128)])
    result.metrics = accuracy(logits, data.eval)
    return result


# ---------------------------------------------------------------- retention


def compute_retention(upper: float, lower: float, candidate: float) -> float | None:
    """Retention in percent; ``None`` (undefined) when upper == lower."""
    if upper == lower:
        return None
    return 100.0 * (candidate - lower) / (upper - lower)


@dataclass
class RetentionReport:
    upper: dict[str, float]
    lower: dict[str, float]
    candidates: dict[str, dict[str, float]]
    meta: dict = field(default_factory=dict)

    def retention(self, name: str, task: str = "cell") -> float | None:
        u, l = self.upper[task], self.lower[task]
        if not u > l:
            return None
        return compute_retention(u, l, self.candidates[name][task])

    def rows(self, task: str = "cell") -> list[dict]:
        out = []
        for name, scores in self.candidates.items():
            out.append({"model": name, "score": scores[task], "retention": self.retention(name, task)})
        return out

    def to_dict(self, task: str = "cell") -> dict:
        return {"upper": self.upper, "lower": self.lower, "candidates": self.candidates,
                "rows": self.rows(task), "meta": self.meta}


def retention_experiment(model_cfg: ModelConfig, cfg: TrainConfig, task: GridTask,
                         voco_counts=(1, 8), baselines: tuple[str, ...] = ()) -> tuple[RetentionReport, dict]:
    """Upper/lower bounds plus one VoCo model per count (and optional baselines) on shared data and seed."""
    data = make_dataset(task, cfg)
    primary = _primary(task)
    upper = train_upper_bound(model_cfg, cfg.replace(mask_mode="causal", num_voco=1), data)
    lower = eval_lower_bound(upper.params, data, 1)
    report = RetentionReport(upper.metrics, lower, {}, {"seed": cfg.seed, "task": primary,
                                                        "eval_hash": data.eval_hash})
    models = {"upper": upper}
    for v in voco_counts:
        res = train_voco(model_cfg, cfg.replace(mask_mode="voco", num_voco=v), data)
        report.candidates[f"voco_v{v}"] = res.metrics
        models[f"voco_v{v}"] = res
    for kind in baselines:
        res = train_baseline(kind, model_cfg, cfg.replace(mask_mode="causal", num_voco=1), data)
        report.candidates[kind] = res.metrics
        models[kind] = res
    return report, models
