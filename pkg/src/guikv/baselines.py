"""Reference eviction policies and per-layer budget schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache_model import CompressionConfig, KeepSet, LayerTrace, PromptLayout
from .numerics import budget_count, robust_ceil, top_k_indices
from .scoring import Method, compress_prompt, score_head, _map_ordered


@dataclass(frozen=True)
class LayerBudgetPlan:
    budgets: tuple[int, ...]
    strategy: str
    fallback: bool = False

    @property
    def total(self) -> int:
        return sum(self.budgets)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "budgets": list(self.budgets),
                "total": self.total, "fallback": self.fallback}


def _rebalance(budgets: list[int], total: int, lo: int, hi: int) -> list[int]:
    """Clamp to ``[lo, hi]`` and restore ``total`` one token at a time.

    Missing tokens go round-robin from the first layer; surplus tokens are
    taken from the currently largest layer (earliest on ties).
    """
    b = [min(max(x, lo), hi) for x in budgets]
    if not len(b) * lo <= total <= len(b) * hi:
        raise ValueError(f"plan total {total} infeasible for {len(b)} layers in [{lo}, {hi}]")
    while sum(b) < total:
        for i in range(len(b)):
            if sum(b) == total:
                break
            if b[i] < hi:
                b[i] += 1
    while sum(b) > total:
        candidates = [i for i in range(len(b)) if b[i] > lo]
        i = max(candidates, key=lambda j: (b[j], -j))
        b[i] -= 1
    return b


def uniform_budgets(layers: int, n: int, gamma: float) -> LayerBudgetPlan:
    return LayerBudgetPlan((budget_count(gamma, n),) * layers, "uniform")


def pyramidkv_budgets(layers: int, n: int, gamma: float, beta: float = 20.0,
                      omega: int = 8) -> LayerBudgetPlan:
    """Linearly decreasing per-layer budgets with the same total as uniform."""
    if layers < 2:
        raise ValueError("pyramid schedule needs at least 2 layers")
    if not beta > 1:
        raise ValueError("beta must be > 1")
    base = budget_count(gamma, n)
    if base < omega:
        raise ValueError("budget below observation window")
    last = max(omega, robust_ceil(base / beta))
    first = 2 * base - last
    steps = np.arange(layers) / (layers - 1)
    exact = first - (first - last) * steps
    floored = [int(math.floor(x + 1e-9)) for x in exact]
    total = layers * base
    return LayerBudgetPlan(tuple(_rebalance(floored, total, omega, n)), "pyramidkv")


def vlcache_budgets(sparsity, layers: int, n: int, gamma: float, omega: int = 8) -> LayerBudgetPlan:
    """Per-layer budgets proportional to attention density ``1 - sparsity``."""
    s = np.asarray(sparsity, dtype=np.float64)
    if s.shape != (layers,):
        raise ValueError(f"expected {layers} sparsity values, got {s.shape}")
    if np.any((s < 0) | (s > 1)):
        raise ValueError("sparsity values must lie in [0, 1]")
    base = budget_count(gamma, n)
    if base < omega:
        raise ValueError("budget below observation window")
    total = layers * base
    density = 1.0 - s
    if density.sum() <= 0:
        return LayerBudgetPlan((base,) * layers, "vl-cache", fallback=True)
    raw = total * density / density.sum()
    rounded = [int(math.floor(x + 0.5 + 1e-9)) for x in raw]
    return LayerBudgetPlan(tuple(_rebalance(rounded, total, omega, n)), "vl-cache")


def snapkv_select(traces: Sequence[LayerTrace], layout: PromptLayout, gamma: float,
                  pool_kernel: int | None = 7, workers: int | None = None) -> KeepSet:
    """Attention-only selection with one budget for every layer."""
    config = CompressionConfig(gamma=gamma, omega=layout.omega, pool_kernel=pool_kernel)
    keep, _ = compress_prompt(traces, layout, config, Method.ATTENTION_ONLY, workers=workers)
    return keep


def plan_select(traces: Sequence[LayerTrace], layout: PromptLayout, plan: LayerBudgetPlan,
                gamma: float, pool_kernel: int | None = 7, workers: int | None = None) -> KeepSet:
    """Attention-only selection with a per-layer budget from ``plan``."""
    if len(plan.budgets) != len(traces):
        raise ValueError("plan length does not match layer count")
    config = CompressionConfig(gamma=gamma, omega=layout.omega, pool_kernel=pool_kernel)
    jobs = [(li, t, h) for li, t in enumerate(traces) for h in range(t.kv_heads)]

    def run(job):
        li, t, h = job
        sheet = score_head(t, layout, h, config, Method.ATTENTION_ONLY)
        return top_k_indices(sheet.final, plan.budgets[li])

    flat = iter(_map_ordered(run, jobs, workers))
    kept = tuple(tuple(next(flat) for _ in range(t.kv_heads)) for t in traces)
    return KeepSet(n=layout.n, gamma=gamma, kept=kept, budgets=plan.budgets)


def recency_select(layout: PromptLayout, gamma: float, sink_count: int = 4,
                   layers: int = 1, kv_heads: int = 1) -> KeepSet:
    """Keep the first ``sink_count`` tokens plus the most recent remainder.

    Sinks yield to the observation window: when the budget can hold the window,
    at most ``k - omega`` sinks are kept.
    """
    if sink_count < 0:
        raise ValueError("sink_count must be >= 0")
    n = layout.n
    k = budget_count(gamma, n)
    sinks = sink_count if k < layout.omega else min(sink_count, k - layout.omega)
    if k <= sinks:
        idx = np.arange(k)
    else:
        idx = np.concatenate([np.arange(sinks), np.arange(n - (k - sinks), n)])
    idx = np.unique(idx)
    kept = tuple(tuple(idx.copy() for _ in range(kv_heads)) for _ in range(layers))
    return KeepSet(n=n, gamma=gamma, kept=kept, budgets=(k,) * layers)
