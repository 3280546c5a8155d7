"""Prompt layouts, per-layer KV traces, and selection results."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    """A prompt layout violates one of its structural invariants."""


class SegmentKind(enum.IntEnum):
    TEXT = 0
    FRAME = 1


@dataclass(frozen=True)
class Segment:
    start: int
    end: int
    kind: SegmentKind
    step: int = 0

    @property
    def is_visual(self) -> bool:
        return self.kind == SegmentKind.FRAME

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.end)

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PromptLayout:
    """Token sequence split into text runs and screenshot runs.

    Visual segments carry their frame age: step 0 is the current screenshot,
    step 1 the one before it, and so on. The last ``omega`` tokens form the
    observation window.
    """

    n: int
    segments: tuple[Segment, ...]
    omega: int

    @property
    def visual_segments(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.is_visual)

    @property
    def current_frame(self) -> Segment | None:
        for s in self.segments:
            if s.is_visual and s.step == 0:
                return s
        return None

    @property
    def previous_frames(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.is_visual and s.step > 0)

    def previous_indices(self) -> np.ndarray:
        frames = self.previous_frames
        if not frames:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s.indices() for s in frames])

    def window_indices(self) -> np.ndarray:
        return np.arange(self.n - self.omega, self.n)

    def visual_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        for s in self.visual_segments:
            mask[s.start:s.end] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "omega": self.omega,
            "segments": [
                {"start": s.start, "end": s.end,
                 "kind": "frame" if s.is_visual else "text", "step": s.step}
                for s in self.segments
            ],
        }


def _coerce_segment(raw) -> Segment:
    if isinstance(raw, Segment):
        return raw
    start, end, kind, *rest = raw
    if isinstance(kind, str):
        kind = {"text": SegmentKind.TEXT, "frame": SegmentKind.FRAME}[kind.lower()]
    step = int(rest[0]) if rest else 0
    return Segment(int(start), int(end), SegmentKind(kind), step)


def build_layout(segments, omega: int) -> PromptLayout:
    """Validate raw segments and return a :class:`PromptLayout`.

    ``segments`` holds ``Segment`` objects or ``(start, end, kind[, step])``
    tuples where ``kind`` is ``"text"``/``"frame"`` or a :class:`SegmentKind`.
    """
    segs = tuple(_coerce_segment(s) for s in segments)
    if not segs:
        raise LayoutError("layout has no segments")
    pos = 0
    for s in segs:
        if s.start > pos:
            raise LayoutError(f"gap at {pos}")
        if s.start < pos:
            raise LayoutError(f"overlap at {s.start}")
        if s.end <= s.start:
            raise LayoutError(f"empty segment at {s.start}")
        if s.step < 0:
            raise LayoutError(f"negative step at {s.start}")
        pos = s.end
    n = pos
    steps = [s.step for s in segs if s.is_visual]
    if steps.count(0) > 1:
        raise LayoutError("duplicate current frame")
    if len(set(steps)) != len(steps):
        raise LayoutError("duplicate frame step")
    if steps and 0 not in steps:
        raise LayoutError("missing current frame")
    if not 1 <= omega <= n:
        raise LayoutError(f"omega out of range: {omega} not in [1, {n}]")
    return PromptLayout(n=n, segments=segs, omega=int(omega))


def causal_valid_mask(n: int, omega: int) -> np.ndarray:
    """``omega x n`` mask of entries observation row ``i`` may attend to.

    Row ``i`` is the query at absolute position ``n - omega + i`` and sees
    keys ``j <= n - omega + i``.
    """
    rows = np.arange(omega)[:, None]
    cols = np.arange(n)[None, :]
    return cols <= rows + (n - omega)


def _readonly(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LayerTrace:
    """Per-layer tensors needed for scoring.

    ``keys`` is ``(kv_heads, n, head_dim)``; ``obs_queries`` is
    ``(kv_heads * group, omega, head_dim)`` with query head ``q`` belonging
    to KV head ``q // group``; ``hidden_norms`` holds the L2 norm of each
    token's pre-attention residual stream. ``values`` is optional and only
    used for reconstruction-error evaluation.
    """

    layer: int
    keys: np.ndarray
    obs_queries: np.ndarray
    hidden_norms: np.ndarray
    group: int = 1
    values: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "keys", _readonly(self.keys))
        object.__setattr__(self, "obs_queries", _readonly(self.obs_queries))
        object.__setattr__(self, "hidden_norms", _readonly(self.hidden_norms))
        if self.values is not None:
            object.__setattr__(self, "values", _readonly(self.values))
        if self.keys.ndim != 3:
            raise ValueError("keys must be (kv_heads, n, head_dim)")
        h, n, d = self.keys.shape
        if self.group < 1:
            raise ValueError("group must be >= 1")
        if self.obs_queries.ndim != 3 or self.obs_queries.shape[0] != h * self.group \
                or self.obs_queries.shape[2] != d:
            raise ValueError(
                f"obs_queries shape {self.obs_queries.shape} inconsistent with "
                f"{h} kv heads x group {self.group}, head_dim {d}")
        if self.hidden_norms.shape != (n,):
            raise ValueError("hidden_norms must have length n")
        if self.values is not None and self.values.shape != self.keys.shape:
            raise ValueError("values must match keys shape")
        for name in ("keys", "obs_queries", "hidden_norms", "values"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(self.hidden_norms < 0):
            raise ValueError("hidden_norms must be non-negative")

    @property
    def kv_heads(self) -> int:
        return self.keys.shape[0]

    @property
    def n(self) -> int:
        return self.keys.shape[1]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[2]

    @property
    def omega(self) -> int:
        return self.obs_queries.shape[1]

    def check_layout(self, layout: PromptLayout) -> None:
        if self.n != layout.n or self.omega != layout.omega:
            raise ValueError(
                f"trace (n={self.n}, omega={self.omega}) does not match layout "
                f"(n={layout.n}, omega={layout.omega})")

    def __eq__(self, other):
        if not isinstance(other, LayerTrace):
            return NotImplemented
        if (self.layer, self.group) != (other.layer, other.group):
            return False
        if (self.values is None) != (other.values is None):
            return False
        pairs = [(self.keys, other.keys), (self.obs_queries, other.obs_queries),
                 (self.hidden_norms, other.hidden_norms)]
        if self.values is not None:
            pairs.append((self.values, other.values))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


@dataclass(frozen=True)
class CompressionConfig:
    gamma: float
    alpha: float = 2.0
    tau: float = 3.5
    rank_r: int = 32
    omega: int = 8
    pool_kernel: int | None = 7
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("budget must be in (0,1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.rank_r < 1:
            raise ValueError("rank must be >= 1")
        if self.omega < 1:
            raise ValueError("omega must be >= 1")
        if self.pool_kernel is not None and (self.pool_kernel < 1 or self.pool_kernel % 2 == 0):
            raise ValueError("pool kernel must be a positive odd integer")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True, eq=False)
class KeepSet:
    """Retained token indices per layer and KV head.

    ``kept[layer][head]`` is an ascending index array. ``budgets[layer]``
    is the per-head token count that layer was allowed.
    """

    n: int
    gamma: float
    kept: tuple[tuple[np.ndarray, ...], ...]
    budgets: tuple[int, ...] = field(default=())

    @property
    def layers(self) -> int:
        return len(self.kept)

    def kept_counts(self) -> np.ndarray:
        return np.array([[len(h) for h in layer] for layer in self.kept], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, KeepSet):
            return NotImplemented
        if self.n != other.n or len(self.kept) != len(other.kept):
            return False
        for a, b in zip(self.kept, other.kept):
            if len(a) != len(b) or not all(np.array_equal(x, y) for x, y in zip(a, b)):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "gamma": self.gamma,
            "budgets": list(self.budgets),
            "layers": [[[int(i) for i in head] for head in layer] for layer in self.kept],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeepSet":
        kept = tuple(tuple(np.asarray(h, dtype=np.int64) for h in layer) for layer in d["layers"])
        return cls(n=d["n"], gamma=d["gamma"], kept=kept, budgets=tuple(d.get("budgets", ())))


def observation_attention(trace: LayerTrace, layout: PromptLayout, kv_head: int) -> np.ndarray:
    """Causal attention of the observation window onto all ``n`` keys.

    Returns the ``omega x n`` sum over the query heads of ``kv_head``'s group.
    Masked (future) cells are exactly zero.
    """
    trace.check_layout(layout)
    n, omega, d = layout.n, layout.omega, trace.head_dim
    keys = trace.keys[kv_head]
    mask = causal_valid_mask(n, omega)
    total = np.zeros((omega, n))
    g = trace.group
    for q in range(kv_head * g, (kv_head + 1) * g):
        logits = trace.obs_queries[q] @ keys.T / math.sqrt(d)
        logits = np.where(mask, logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        total += p
    return total


def _segment_max_pool(a: np.ndarray, start: int, end: int, kernel: int) -> np.ndarray:
    half = kernel // 2
    seg = a[start:end]
    m = seg.size
    padded = np.full(m + 2 * half, -np.inf)
    padded[half:half + m] = seg
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return windows.max(axis=1)


def aggregate_attention(attn: np.ndarray, pool_kernel: int | None = None,
                        layout: PromptLayout | None = None) -> np.ndarray:
    """Mean over observation rows, then optional max-pool inside visual runs."""
    scores = np.asarray(attn, dtype=np.float64).mean(axis=0)
    if pool_kernel is None or pool_kernel <= 1:
        return scores
    if layout is None:
        raise ValueError("pooling needs the layout to find visual segments")
    pooled = scores.copy()
    for s in layout.visual_segments:
        pooled[s.start:s.end] = _segment_max_pool(scores, s.start, s.end, pool_kernel)
    return pooled
