"""Spatio-temporal token scoring and per-head KV selection.

Visual tokens are scored by observation attention plus a saliency term
derived from their residual-stream norms. Tokens from earlier screenshots
are additionally gated by how much of their key lies outside the subspace
spanned by the current screenshot's keys.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .cache_model import (
    CompressionConfig,
    KeepSet,
    LayerTrace,
    PromptLayout,
    aggregate_attention,
    observation_attention,
)
from .numerics import (
    IN_SPAN_RTOL,
    budget_count,
    nearest_rank_percentile,
    project_residual_norms,
    softmax_temp,
    standardize,
    thin_qr,
    top_k_indices,
)


class Method(str, enum.Enum):
    GUI_KV = "gui-kv"
    SPATIAL_ONLY = "spatial-only"
    TEMPORAL_ONLY = "temporal-only"
    ATTENTION_ONLY = "attention-only"

    @property
    def uses_saliency(self) -> bool:
        return self in (Method.GUI_KV, Method.SPATIAL_ONLY)

    @property
    def uses_temporal(self) -> bool:
        return self in (Method.GUI_KV, Method.TEMPORAL_ONLY)


@dataclass(frozen=True, eq=False)
class ScoreSheet:
    """Score components for one (layer, KV head)."""

    layer: int
    head: int
    attention: np.ndarray
    saliency: np.ndarray          # alpha * S_i, zero on text tokens
    previous_indices: np.ndarray
    redundancy: np.ndarray        # aligned with previous_indices
    threshold: float | None
    basis_cols: int
    final: np.ndarray


def spatial_saliency(hidden_norms, visual_indices, tau: float, epsilon: float = 1e-8) -> np.ndarray:
    """Softmax of standardized norms over ``visual_indices``."""
    visual_indices = np.asarray(visual_indices, dtype=np.int64)
    if visual_indices.size == 0:
        return np.zeros(0)
    r = np.asarray(hidden_norms, dtype=np.float64)[visual_indices]
    return softmax_temp(standardize(r, epsilon), tau)


def frame_saliency(hidden_norms, layout: PromptLayout, tau: float, epsilon: float = 1e-8,
                   frame_signals: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
    """Length-``n`` saliency with each screenshot normalized on its own.

    ``frame_signals`` optionally replaces the norms of the frame with the
    given step by another raw per-token saliency signal.
    """
    out = np.zeros(layout.n)
    norms = np.asarray(hidden_norms, dtype=np.float64)
    for seg in layout.visual_segments:
        if frame_signals and seg.step in frame_signals:
            signal = np.asarray(frame_signals[seg.step], dtype=np.float64)
            if signal.shape != (len(seg),):
                raise ValueError(
                    f"saliency signal for frame step {seg.step} has {signal.size} "
                    f"entries, frame has {len(seg)} tokens")
            out[seg.start:seg.end] = softmax_temp(standardize(signal, epsilon), tau)
        else:
            out[seg.start:seg.end] = spatial_saliency(norms, seg.indices(), tau, epsilon)
    return out


def combined_spatial_score(attention, saliency, alpha: float, layout: PromptLayout) -> np.ndarray:
    """``A + alpha * S`` on the current screenshot, ``A`` elsewhere.

    ``saliency`` is either length ``n`` or exactly the current frame's length.
    """
    psi = np.array(attention, dtype=np.float64, copy=True)
    cur = layout.current_frame
    if cur is None:
        return psi
    s = np.asarray(saliency, dtype=np.float64)
    if s.shape == (layout.n,):
        s = s[cur.start:cur.end]
    psi[cur.start:cur.end] += alpha * s
    return psi


def temporal_redundancy(trace: LayerTrace, layout: PromptLayout, kv_head: int,
                        rank_r: int) -> tuple[np.ndarray, int]:
    """Residual norms of earlier-frame keys against the current frame's key basis.

    Returns ``(rho, basis_cols)`` where ``rho`` follows
    ``layout.previous_indices()``. Residuals within ``IN_SPAN_RTOL`` of the
    key norm are reported as exactly zero.
    """
    cur = layout.current_frame
    if cur is None:
        raise ValueError("temporal scoring requires a current frame")
    keys = trace.keys[kv_head]
    q = thin_qr(keys[cur.start:cur.end].T, rank_r)
    prev = layout.previous_indices()
    if prev.size == 0:
        return np.zeros(0), q.shape[1]
    rho = project_residual_norms(keys[prev], q)
    # round-off residuals of in-span keys would otherwise decide the gating
    rho[rho <= IN_SPAN_RTOL * np.linalg.norm(keys[prev], axis=1)] = 0.0
    return rho, q.shape[1]


def redundancy_threshold(rho, gamma: float) -> float | None:
    """Per-head gating threshold; ``None`` means skip temporal gating."""
    rho = np.asarray(rho)
    if rho.size == 0:
        return None
    return nearest_rank_percentile(rho, 1.0 - gamma)


def window_sentinel(scores: np.ndarray, omega: int) -> np.ndarray:
    """Lift the last ``omega`` positions above every other score.

    Window position ``j`` gets ``max + 1 + j`` so that, when the budget is
    smaller than the window, the most recent tokens win.
    """
    out = scores.copy()
    n = out.size
    top = float(np.max(out)) if n else 0.0
    out[n - omega:] = top + 1.0 + np.arange(omega)
    return out


def final_scores(attention, saliency, rho, threshold: float | None, alpha: float,
                 layout: PromptLayout) -> np.ndarray:
    """Compose the gated spatio-temporal score vector (window sentinel applied).

    ``saliency`` is the length-``n`` per-frame S (zero on text).
    """
    psi = np.array(attention, dtype=np.float64, copy=True)
    vis = layout.visual_mask()
    psi[vis] += alpha * np.asarray(saliency, dtype=np.float64)[vis]
    prev = layout.previous_indices()
    if threshold is not None and prev.size:
        keep = np.asarray(rho) >= threshold
        psi[prev] = psi[prev] * keep
    return window_sentinel(psi, layout.omega)


def select_per_head(final, gamma: float) -> np.ndarray:
    final = np.asarray(final)
    return top_k_indices(final, budget_count(gamma, final.size))


def score_head(trace: LayerTrace, layout: PromptLayout, kv_head: int, config: CompressionConfig,
               method: Method = Method.GUI_KV,
               frame_signals: Mapping[int, np.ndarray] | None = None) -> ScoreSheet:
    method = Method(method)
    attn = aggregate_attention(observation_attention(trace, layout, kv_head),
                               config.pool_kernel, layout)
    alpha = config.alpha if method.uses_saliency else 0.0
    if alpha > 0:
        s = frame_saliency(trace.hidden_norms, layout, config.tau, config.epsilon, frame_signals)
    else:
        s = np.zeros(layout.n)
    prev = layout.previous_indices()
    rho, basis_cols, threshold = np.zeros(0), 0, None
    if method.uses_temporal and layout.current_frame is not None:
        rho, basis_cols = temporal_redundancy(trace, layout, kv_head, config.rank_r)
        threshold = redundancy_threshold(rho, config.gamma)
    final = final_scores(attn, s, rho, threshold, alpha, layout)
    return ScoreSheet(
        layer=trace.layer, head=kv_head, attention=attn, saliency=alpha * s,
        previous_indices=prev if threshold is not None else np.zeros(0, dtype=np.int64),
        redundancy=rho, threshold=threshold, basis_cols=basis_cols, final=final)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GUIKV_THREADS", "1")))
    except ValueError:
        return 1


def _map_ordered(fn, items, workers: int | None):
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def compress_prompt(traces: LayerTrace | Sequence[LayerTrace], layout: PromptLayout,
                    config: CompressionConfig, method: Method | str = Method.GUI_KV,
                    frame_signals: Mapping[int, np.ndarray] | None = None,
                    workers: int | None = None) -> tuple[KeepSet, list[list[ScoreSheet]]]:
    """Run selection for every layer and KV head.

    Heads are independent, so they may be scored concurrently; the result
    does not depend on ``workers``.
    """
    if isinstance(traces, LayerTrace):
        traces = [traces]
    method = Method(method)
    for t in traces:
        t.check_layout(layout)
    jobs = [(t, h) for t in traces for h in range(t.kv_heads)]
    sheets_flat = _map_ordered(
        lambda job: score_head(job[0], layout, job[1], config, method, frame_signals),
        jobs, workers)
    sheets: list[list[ScoreSheet]] = []
    it = iter(sheets_flat)
    for t in traces:
        sheets.append([next(it) for _ in range(t.kv_heads)])
    kept = tuple(tuple(select_per_head(s.final, config.gamma) for s in layer) for layer in sheets)
    k = budget_count(config.gamma, layout.n)
    keep = KeepSet(n=layout.n, gamma=config.gamma, kept=kept, budgets=(k,) * len(traces))
    return keep, sheets
