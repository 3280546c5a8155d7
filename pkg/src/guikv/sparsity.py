"""Relative-threshold attention sparsity, per layer and head."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache_model import LayerTrace, PromptLayout, causal_valid_mask, observation_attention

SCHEMA = "guikv.sparsity/1"


@dataclass(frozen=True, eq=False)
class SparsityProfile:
    values: np.ndarray   # (layers, kv_heads)
    p: float
    omega: int
    n: int

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("p must be in (0, 1)")

    @property
    def layer_mean(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def layer_min(self) -> np.ndarray:
        return self.values.min(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "sparsity"])
        for layer, row in enumerate(self.values):
            for head, v in enumerate(row):
                w.writerow([layer, head, repr(float(v))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "schema": SCHEMA,
            "p": self.p,
            "omega": self.omega,
            "n": self.n,
            "layers": [
                {"layer": i, "mean": float(m), "min": float(lo)}
                for i, (m, lo) in enumerate(zip(self.layer_mean, self.layer_min))
            ],
        }


def threshold_filter(attn, p: float) -> np.ndarray:
    """Zero entries below ``p`` times their row maximum."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    a = np.asarray(attn, dtype=np.float64)
    row_max = a.max(axis=1, keepdims=True)
    return np.where(a >= p * row_max, a, 0.0)


def attention_sparsity(filtered, valid_mask) -> float:
    """Fraction of zero entries among the causally valid ones."""
    filtered = np.asarray(filtered)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    count = int(valid_mask.sum())
    if count == 0:
        raise ValueError("empty causal mask")
    return float(np.count_nonzero((filtered == 0) & valid_mask)) / count


def layer_sparsity_profile(traces: Sequence[LayerTrace], layout: PromptLayout,
                           p: float = 0.01) -> SparsityProfile:
    mask = causal_valid_mask(layout.n, layout.omega)
    values = np.array([
        [attention_sparsity(threshold_filter(observation_attention(t, layout, h), p), mask)
         for h in range(t.kv_heads)]
        for t in traces
    ])
    return SparsityProfile(values=values, p=p, omega=layout.omega, n=layout.n)


def merge_profiles(profiles: Sequence[SparsityProfile]) -> SparsityProfile:
    """Average several traces' profiles with equal weight per trace."""
    if not profiles:
        raise ValueError("no profiles to merge")
    shapes = {pr.values.shape for pr in profiles}
    if len(shapes) != 1:
        raise ValueError("profiles disagree on layer/head counts")
    first = profiles[0]
    values = np.mean([pr.values for pr in profiles], axis=0)
    return SparsityProfile(values=values, p=first.p, omega=first.omega, n=first.n)
