"""Storage, FLOPs and wall-clock accounting for the three serving strategies.

* ``baseline-no-cache``: every query re-encodes vision and text together.
* ``full-cache``: vision K/V is cached once; a query runs only the text.
* ``voco-cache``: only the VoCo K/V is cached; a query runs only the text.

FLOPs count one multiply-add as 2 FLOPs and leave out layernorm and softmax.
Storage is reported in decimal megabytes.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from voco import tensor as T
from voco.errors import UsageError
from voco.layout import build_causal_mask
from voco.model import LayerKV, ModelConfig, ModelParams, forward_embeds, init_params
from voco.runtime import compress, infer_with_cache, query

STRATEGIES = ("baseline-no-cache", "full-cache", "voco-cache")

# 7B-class decoder constants: 32 layers, hidden 4096, 16-bit activations.
VICUNA_LAYERS = 32
VICUNA_D_MODEL = 4096
VICUNA_BYTES = 2
PUBLISHED_STORAGE_MB = {576: 302.4, 1: 0.525}


def cache_bytes(n_layers: int, d_model: int, n_tokens: int, bytes_per_element: int) -> int:
    """Bytes to hold keys and values of ``n_tokens`` positions in every layer."""
    if min(n_layers, d_model, bytes_per_element) <= 0 or n_tokens < 0:
        raise UsageError("cache_bytes arguments must be positive")
    return 2 * n_layers * d_model * n_tokens * bytes_per_element


def megabytes(n_bytes: int) -> float:
    return n_bytes / 1e6


@dataclass(frozen=True)
class FlopsConfig:
    n_layers: int
    d_model: int
    mlp_ratio: float = 4

    @classmethod
    def of(cls, cfg: ModelConfig) -> FlopsConfig:
        return cls(cfg.n_layers, cfg.d_model, cfg.mlp_ratio)


VICUNA = FlopsConfig(VICUNA_LAYERS, VICUNA_D_MODEL)


def attention_flops(cfg: FlopsConfig | ModelConfig, context_len: int, new_tokens: int) -> float:
    """Forward FLOPs for ``new_tokens`` positions attending to ``context_len`` cached ones plus themselves."""
    if context_len < 0 or new_tokens < 0:
        raise UsageError("lengths must be non-negative")
    if isinstance(cfg, ModelConfig):
        cfg = FlopsConfig.of(cfg)
    d, new = cfg.d_model, new_tokens
    proj = 8 * d * d * new                       # q, k, v, out
    attn = 4 * d * new * (context_len + new)     # scores and weighted sum
    mlp = 2 * cfg.mlp_ratio * 2 * d * d * new    # up and down projections
    return cfg.n_layers * (proj + attn + mlp)


@dataclass(frozen=True)
class Scenario:
    num_vision: int = 576
    num_voco: int = 1
    num_text: int = 32

    def __post_init__(self):
        if self.num_vision < 1 or self.num_voco < 1 or self.num_text < 1:
            raise UsageError("scenario token counts must be positive")

    @property
    def name(self) -> str:
        return f"{self.num_vision}->{self.num_voco}"


def strategy_costs(cfg: FlopsConfig, sc: Scenario, bytes_per_element: int) -> dict[str, dict]:
    """Cached bytes, query-time prefill FLOPs and the FLOPs of one decoded token, per strategy."""
    n, v, m = sc.num_vision, sc.num_voco, sc.num_text
    L, d = cfg.n_layers, cfg.d_model
    cached = {"baseline-no-cache": 0, "full-cache": n, "voco-cache": v}
    prefill = {
        "baseline-no-cache": attention_flops(cfg, 0, n + m),
        "full-cache": attention_flops(cfg, n, m),
        "voco-cache": attention_flops(cfg, v, m),
    }
    decode = {
        "baseline-no-cache": attention_flops(cfg, n + m, 1),
        "full-cache": attention_flops(cfg, n + m, 1),
        "voco-cache": attention_flops(cfg, v + m, 1),
    }
    return {s: {"cached_tokens": cached[s], "cache_bytes": cache_bytes(L, d, cached[s], bytes_per_element),
                "prefill_flops": prefill[s], "decode_flops": decode[s]} for s in STRATEGIES}


# ---------------------------------------------------------------- timing


@dataclass
class TimingStats:
    samples: list[float]

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def spread_defined(self) -> bool:
        return len(self.samples) > 1

    @property
    def spread(self) -> float | None:
        """Interquartile range; undefined for a single sample."""
        if not self.spread_defined:
            return None
        q1, q3 = np.percentile(self.samples, [25, 75])
        return float(q3 - q1)


class _Runner:
    """Prepared inputs and caches for timing one scenario on one model."""

    def __init__(self, params: ModelParams, sc: Scenario, seed: int = 0):
        cfg = params.config
        need = sc.num_vision + sc.num_voco + sc.num_text
        if need > cfg.max_positions:
            raise UsageError(f"scenario needs {need} positions, model has {cfg.max_positions}")
        rng = np.random.default_rng(seed)
        self.params, self.sc = params, sc
        self.vision = rng.integers(0, cfg.patch_vocab, size=sc.num_vision)
        self.text = rng.integers(0, cfg.text_vocab, size=sc.num_text)
        n, m = sc.num_vision, sc.num_text
        with T.no_grad():
            pe = params["patch_emb"].data[self.vision]
            te = params["text_emb"].data[self.text]
            self.joint = T.Tensor(np.concatenate([pe, te])[None])
            self.joint_mask = build_causal_mask(n + m).bits
            vis = forward_embeds(params, T.Tensor(pe[None]), np.arange(n), build_causal_mask(n).bits)
            self.vision_kv = [LayerKV(kv.keys.data, kv.values.data) for kv in vis.present]
            self.cache = compress(params, self.vision, sc.num_voco)

    def baseline(self) -> np.ndarray:
        n, m = self.sc.num_vision, self.sc.num_text
        with T.no_grad():
            return forward_embeds(self.params, self.joint, np.arange(n + m), self.joint_mask).logits.data

    def full_cache(self) -> np.ndarray:
        with T.no_grad():
            return query(self.params, self.vision_kv, np.arange(self.sc.num_vision), self.text[None]).logits.data

    def voco_cache(self) -> np.ndarray:
        return infer_with_cache(self.params, [self.cache], self.text)

    def fn(self, strategy: str):
        return {"baseline-no-cache": self.baseline, "full-cache": self.full_cache,
                "voco-cache": self.voco_cache}[strategy]


def run_timing(params: ModelParams, sc: Scenario, repetitions: int = 30, warmup: int = 3,
               seed: int = 0) -> dict[str, TimingStats]:
    """Wall-clock seconds per query for each strategy; warm-up calls are not recorded.

    Strategies are interleaved within each repetition so drift affects all alike.
    """
    if repetitions < 1:
        raise UsageError("repetitions must be >= 1")
    runner = _Runner(params, sc, seed)
    fns = {s: runner.fn(s) for s in STRATEGIES}
    for _ in range(warmup):
        for f in fns.values():
            f()
    samples: dict[str, list[float]] = {s: [] for s in STRATEGIES}
    for _ in range(repetitions):
        for s, f in fns.items():
            t0 = time.perf_counter()
            f()
            samples[s].append(time.perf_counter() - t0)
    return {s: TimingStats(v) for s, v in samples.items()}


def timing_model(seed: int = 0, sc: Scenario = Scenario()) -> ModelParams:
    """Reference-width toy model with enough positions for ``sc``."""
    need = sc.num_vision + sc.num_voco + sc.num_text
    return init_params(ModelConfig(max_positions=max(128, need)), seed)


# ---------------------------------------------------------------- report


def _delta(value: float, ref: float) -> float | None:
    return None if ref == 0 else 1.0 - value / ref


@dataclass
class EfficiencyReport:
    scenario: Scenario
    model: dict
    rows: list[dict]
    reference: dict = field(default_factory=dict)

    def row(self, strategy: str) -> dict:
        return next(r for r in self.rows if r["strategy"] == strategy)

    def to_dict(self) -> dict:
        return {
            "scenario": {"num_vision": self.scenario.num_vision, "num_voco": self.scenario.num_voco,
                         "num_text": self.scenario.num_text},
            "model": self.model,
            "rows": self.rows,
            "reference": self.reference,
        }


def efficiency_report(sc: Scenario, flops_cfg: FlopsConfig, bytes_per_element: int,
                      timing: dict[str, TimingStats] | None = None, model: dict | None = None) -> EfficiencyReport:
    """One row per strategy.

    Storage deltas are relative to ``full-cache`` (the baseline caches
    nothing); FLOPs and time deltas are relative to ``baseline-no-cache``.
    """
    costs = strategy_costs(flops_cfg, sc, bytes_per_element)
    base, full = costs["baseline-no-cache"], costs["full-cache"]
    rows = []
    for s in STRATEGIES:
        c = costs[s]
        row = {
            "strategy": s,
            "cached_tokens": c["cached_tokens"],
            "cache_bytes": c["cache_bytes"],
            "cache_mb": megabytes(c["cache_bytes"]),
            "prefill_flops": c["prefill_flops"],
            "decode_flops": c["decode_flops"],
            "delta_storage": _delta(c["cache_bytes"], full["cache_bytes"]) if s != "baseline-no-cache" else None,
            "delta_prefill_flops": _delta(c["prefill_flops"], base["prefill_flops"]),
        }
        if timing is not None:
            t, tb = timing[s], timing["baseline-no-cache"]
            row.update({"time_median_ms": 1e3 * t.median,
                        "time_spread_ms": None if t.spread is None else 1e3 * t.spread,
                        "spread_defined": t.spread_defined,
                        "repetitions": len(t.samples),
                        "delta_time": _delta(t.median, tb.median)})
        rows.append(row)
    model = model or {"n_layers": flops_cfg.n_layers, "d_model": flops_cfg.d_model,
                      "mlp_ratio": flops_cfg.mlp_ratio, "bytes_per_element": bytes_per_element}
    return EfficiencyReport(sc, model, rows)


def vicuna_report(sc: Scenario = Scenario()) -> EfficiencyReport:
    """Analytic rows at 7B-class constants, with the published storage figures alongside."""
    report = efficiency_report(sc, VICUNA, VICUNA_BYTES)
    report.reference = {
        "published_storage_mb": {str(k): v for k, v in PUBLISHED_STORAGE_MB.items()},
        "formula_storage_mb": {str(k): megabytes(cache_bytes(VICUNA_LAYERS, VICUNA_D_MODEL, k, VICUNA_BYTES))
                               for k in PUBLISHED_STORAGE_MB},
        "published_storage_reduction_pct": 99.8,
        "published_prefill_reduction_pct": 94.8,
    }
    return report


def bench(params: ModelParams | None = None, sc: Scenario = Scenario(), repetitions: int = 30,
          seed: int = 0) -> EfficiencyReport:
    """Measured rows for a toy model on ``sc`` (analytic columns use the same model's shape)."""
    params = params or timing_model(seed, sc)
    cfg = params.config
    timing = run_timing(params, sc, repetitions, seed=seed)
    bpe = 8 if cfg.cache_dtype == "float64" else 4
    return efficiency_report(sc, FlopsConfig.of(cfg), bpe, timing,
                             {"n_layers": cfg.n_layers, "d_model": cfg.d_model, "n_heads": cfg.n_heads,
                              "mlp_ratio": cfg.mlp_ratio, "bytes_per_element": bpe})
