"""Analytic FLOPs accounting for decoding and prefill-time compression.

Conventions, used everywhere: a multiply-accumulate is 2 FLOPs; softmax
costs 3 ops per score entry and the group/row aggregation 1 op per entry;
each top-k comparison is 1 op; a gathered element move is 1 op.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

from .cache_model import PromptLayout, SegmentKind, build_layout
from .numerics import budget_count

SCHEMA = "guikv.flops/1"


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    d_model: int
    query_heads: int
    kv_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    tokens_per_screenshot: int
    text_token_count: int
    # Multiplier from the analytic count to the reported unit; absorbs
    # counting conventions of an external profiler.
    flops_scale: float = 1.0

    def __post_init__(self):
        for name in ("layers", "d_model", "query_heads", "kv_heads", "head_dim", "ffn_dim",
                     "vocab_size", "tokens_per_screenshot", "text_token_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.query_heads % self.kv_heads:
            raise ValueError("query_heads must be divisible by kv_heads")
        if not self.flops_scale > 0:
            raise ValueError("flops_scale must be positive")

    def prompt_tokens(self, screenshots: int) -> int:
        return screenshots * self.tokens_per_screenshot + self.text_token_count

    def to_dict(self) -> dict:
        return asdict(self)


# Qwen2.5-7B language-model dimensions with screenshot/text token counts and
# a reporting scale fitted to the reference decode costs (3/5/10 screenshots:
# 213.2 / 290.4 / 471.5 MFLOPs full cache, plus the 20%/40% rows).
# Regenerate with ``calibrate(...)``.
CFG_STAR = ModelConfig(
    layers=28, d_model=3584, query_heads=28, kv_heads=4, head_dim=128,
    ffn_dim=18944, vocab_size=152064,
    tokens_per_screenshot=13060, text_token_count=1050,
    flops_scale=7.080366e-3,
)

REFERENCE_DECODE = {
    # (screenshots, gamma): MFLOPs per decoded token
    (3, 1.0): 213.2, (3, 0.2): 123.6, (3, 0.4): 145.3,
    (5, 1.0): 290.4, (5, 0.2): 139.5, (5, 0.4): 177.4,
    (10, 1.0): 471.5, (10, 0.2): 175.3, (10, 0.4): 249.9,
}


def _dense_per_token(cfg: ModelConfig) -> float:
    d = cfg.d_model
    proj = 2 * d * (d + 2 * cfg.kv_heads * cfg.head_dim) + 2 * d * d
    mlp = 3 * 2 * d * cfg.ffn_dim
    return proj + mlp


def _lm_head(cfg: ModelConfig) -> float:
    return 2 * cfg.d_model * cfg.vocab_size


def decode_flops_per_token(cfg: ModelConfig, kept_per_layer: Sequence[int]) -> float:
    """MFLOPs to decode one token against ``kept_per_layer`` cached tokens."""
    if len(kept_per_layer) != cfg.layers:
        raise ValueError(f"need {cfg.layers} per-layer cache sizes, got {len(kept_per_layer)}")
    attn_unit = 4 * cfg.query_heads * cfg.head_dim
    total = sum(_dense_per_token(cfg) + attn_unit * k for k in kept_per_layer) + _lm_head(cfg)
    return total * cfg.flops_scale / 1e6


def prefill_flops(cfg: ModelConfig, n: int) -> float:
    """FLOPs to pre-fill an ``n``-token prompt with dense causal attention."""
    if n < 1:
        raise ValueError("n must be >= 1")
    per_layer = n * _dense_per_token(cfg) + 4 * cfg.query_heads * cfg.head_dim * n * n
    return (cfg.layers * per_layer + _lm_head(cfg)) * cfg.flops_scale


def screenshot_layout(cfg: ModelConfig, screenshots: int, omega: int = 8) -> PromptLayout:
    """Instruction text, ``screenshots`` frames (oldest first), then ``omega`` text tokens."""
    if screenshots < 1:
        raise ValueError("need at least one screenshot")
    prefix = cfg.text_token_count - omega
    if prefix < 0:
        raise ValueError("text_token_count smaller than the observation window")
    segs = []
    pos = 0
    if prefix:
        segs.append((0, prefix, SegmentKind.TEXT, 0))
        pos = prefix
    for step in range(screenshots - 1, -1, -1):
        segs.append((pos, pos + cfg.tokens_per_screenshot, SegmentKind.FRAME, step))
        pos += cfg.tokens_per_screenshot
    segs.append((pos, pos + omega, SegmentKind.TEXT, 0))
    return build_layout(segs, omega)


def compression_overhead(cfg: ModelConfig, layout: PromptLayout, gamma: float,
                         rank_r: int = 32) -> dict[str, float]:
    """Prefill-time cost of scoring and compressing, in GFLOPs per component."""
    n, omega = layout.n, layout.omega
    cur = layout.current_frame
    n_t = len(cur) if cur is not None else 0
    r_eff = min(rank_r, cfg.head_dim, n_t)
    L, kv, qh, dh = cfg.layers, cfg.kv_heads, cfg.query_heads, cfg.head_dim
    kept = budget_count(gamma, n)
    comps = {
        "attention_scoring": L * qh * omega * n * (2 * dh + 4),
        "qr": 2 * dh ** 2 * r_eff * kv * L,
        "projection": 4 * dh * r_eff * max(n - omega - n_t, 0) * kv * L,
        "topk": n * math.log2(n) * kv * L if n > 1 else 0.0,
        "gather": kept * dh * 2 * kv * L,
    }
    return {k: v * cfg.flops_scale / 1e9 for k, v in comps.items()}


@dataclass(frozen=True)
class FlopsReport:
    screenshots: int
    gamma: float
    n: int
    full_decode_mflops: float
    decode_mflops_per_token: float
    reduction_pct: float
    prefill_gflops: float
    overhead_gflops: dict
    overhead_pct_of_scoring: dict
    overhead_pct_of_prefill: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = SCHEMA
        return d


def flops_report(cfg: ModelConfig, screenshots: int, gamma: float, rank_r: int = 32,
                 omega: int = 8) -> FlopsReport:
    layout = screenshot_layout(cfg, screenshots, omega)
    n = layout.n
    kept = budget_count(gamma, n)
    full = decode_flops_per_token(cfg, [n] * cfg.layers)
    comp = decode_flops_per_token(cfg, [kept] * cfg.layers)
    prefill = prefill_flops(cfg, n) / 1e9
    over = compression_overhead(cfg, layout, gamma, rank_r)
    scoring = over["attention_scoring"]
    pct = {k: 100.0 * v / scoring for k, v in over.items() if k != "attention_scoring"}
    return FlopsReport(
        screenshots=screenshots, gamma=gamma, n=n,
        full_decode_mflops=full, decode_mflops_per_token=comp,
        reduction_pct=100.0 * (1.0 - comp / full),
        prefill_gflops=prefill, overhead_gflops=over, overhead_pct_of_scoring=pct,
        overhead_pct_of_prefill=100.0 * sum(over.values()) / prefill,
    )


def calibrate(base: ModelConfig, reference: dict = REFERENCE_DECODE,
              tokens_range=range(11000, 15001, 20), text_range=range(0, 6001, 50)) -> ModelConfig:
    """Grid-fit screenshot/text token counts and the reporting scale.

    Minimizes the worse of (max relative error on full-cache rows / 1%)
    and (max reduction error / 1.5 points).
    """
    full_rows = {s: v for (s, g), v in reference.items() if g == 1.0}
    red_rows = {(s, g): 100.0 * (1 - v / full_rows[s])
                for (s, g), v in reference.items() if g != 1.0}
    unit = replace(base, flops_scale=1.0)
    best = None
    for T in tokens_range:
        for t in text_range:
            cfg = replace(unit, tokens_per_screenshot=T, text_token_count=max(t, 1))
            raw = {s: decode_flops_per_token(cfg, [cfg.prompt_tokens(s)] * cfg.layers)
                   for s in full_rows}
            ratios = [full_rows[s] / raw[s] for s in full_rows]
            scale = math.sqrt(min(ratios) * max(ratios))
            full_err = max(abs(scale * raw[s] / full_rows[s] - 1) for s in full_rows)
            red_err = 0.0
            for (s, g), target in red_rows.items():
                n = cfg.prompt_tokens(s)
                comp = decode_flops_per_token(cfg, [budget_count(g, n)] * cfg.layers)
                red_err = max(red_err, abs(100 * (1 - comp / raw[s]) - target))
            score = max(full_err / 0.01, red_err / 1.5)
            if best is None or score < best[0]:
                best = (score, T, max(t, 1), scale)
    _, T, t, scale = best
    return replace(base, tokens_per_screenshot=T, text_token_count=t, flops_scale=scale)
