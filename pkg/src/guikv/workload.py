"""Synthetic GUI trajectories and compressed-vs-full reconstruction error.

A trajectory is an instruction prefix, ``frames`` screenshots (oldest
first) and a text suffix whose last ``omega`` tokens form the observation
window. Each new screenshot keeps most of the previous one: an
``overlap_eta`` fraction of its tokens are noisy copies of the tokens at the
same positions one frame earlier, and the rest is a contiguous "changed
panel" whose keys lie in a fresh low-rank subspace.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .cache_model import (
    KeepSet,
    LayerTrace,
    PromptLayout,
    SegmentKind,
    aggregate_attention,
    build_layout,
    observation_attention,
)


@dataclass(frozen=True)
class TrajectoryParams:
    frames: int = 5
    tokens_per_frame: int = 32
    text_prefix: int = 16
    text_suffix: int = 16
    omega: int = 8
    layers: int = 2
    kv_heads: int = 2
    group: int = 2
    head_dim: int = 64
    overlap_eta: float = 0.7
    noise_sigma: float = 0.05
    frame_rank: int = 4
    orthogonal_frames: bool = False
    register_fraction: float = 0.1
    register_norm_scale: float = 4.0
    concentration: float = 0.01
    query_gain: float = 40.0
    target_boost: float = 3.0
    probes: int = 16
    with_values: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("frames", "tokens_per_frame", "omega", "layers", "kv_heads", "group",
                     "head_dim", "frame_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("text_prefix", "probes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("overlap_eta", "register_fraction", "concentration"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.text_suffix < self.omega:
            raise ValueError("text_suffix must be at least omega")
        if self.noise_sigma < 0 or self.register_norm_scale <= 0 or self.target_boost <= 0:
            raise ValueError("noise_sigma, register_norm_scale and target_boost must be positive")
        if self.frame_rank > self.head_dim:
            raise ValueError("frame_rank cannot exceed head_dim")
        if self.orthogonal_frames and self.frames * self.frame_rank > self.head_dim:
            raise ValueError("orthogonal frames need frames * frame_rank <= head_dim")

    @property
    def n(self) -> int:
        return self.text_prefix + self.frames * self.tokens_per_frame + self.text_suffix

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Trajectory:
    params: TrajectoryParams
    layout: PromptLayout
    traces: list[LayerTrace]
    probes: list[np.ndarray]     # per layer, (kv_heads * group, probes, head_dim)
    duplicated: np.ndarray       # bool (n,), token copied from the previous frame
    registers: np.ndarray        # bool (n,)


def _layout(p: TrajectoryParams) -> PromptLayout:
    segs = []
    pos = 0
    if p.text_prefix:
        segs.append((0, p.text_prefix, SegmentKind.TEXT, 0))
        pos = p.text_prefix
    for f in range(p.frames):
        segs.append((pos, pos + p.tokens_per_frame, SegmentKind.FRAME, p.frames - 1 - f))
        pos += p.tokens_per_frame
    segs.append((pos, pos + p.text_suffix, SegmentKind.TEXT, 0))
    return build_layout(segs, p.omega)


def _orthonormal(rng, d: int, k: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return q


def _f32(a: np.ndarray) -> np.ndarray:
    # generated tensors are exactly representable in the float32 trace format
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _screen_structure(p: TrajectoryParams, rng):
    """Which tokens are copies of the previous frame, and which are registers."""
    T = p.tokens_per_frame
    fresh_count = T - int(np.floor(p.overlap_eta * T + 0.5))
    dup = np.zeros((p.frames, T), dtype=bool)
    reg = np.zeros((p.frames, T), dtype=bool)
    reg[0] = rng.random(T) < p.register_fraction
    for f in range(1, p.frames):
        offset = int(rng.integers(T))
        changed = (offset + np.arange(fresh_count)) % T
        dup[f] = True
        dup[f, changed] = False
        reg[f] = reg[f - 1]
        reg[f, changed] = rng.random(fresh_count) < p.register_fraction
    return dup, reg


def _head_tensors(p: TrajectoryParams, dup, rng, bases):
    """Keys and values for one (layer, kv head), frames laid out in prompt order."""
    T, d, q = p.tokens_per_frame, p.head_dim, p.frame_rank
    keys = np.empty((p.n, d))
    values = np.empty((p.n, d))
    keys[:p.text_prefix] = rng.standard_normal((p.text_prefix, d))
    values[:p.text_prefix] = rng.standard_normal((p.text_prefix, d))
    scale = np.sqrt(d / q)
    for f in range(p.frames):
        lo = p.text_prefix + f * T
        basis = bases[f] if bases is not None else _orthonormal(rng, d, q)
        fresh_k = scale * rng.standard_normal((T, q)) @ basis.T
        fresh_v = rng.standard_normal((T, d))
        if f == 0:
            keys[lo:lo + T] = fresh_k
            values[lo:lo + T] = fresh_v
            continue
        noise_k = p.noise_sigma * rng.standard_normal((T, d))
        noise_v = p.noise_sigma * rng.standard_normal((T, d))
        copied_k = keys[lo - T:lo] + noise_k
        copied_v = values[lo - T:lo] + noise_v
        keys[lo:lo + T] = np.where(dup[f][:, None], copied_k, fresh_k)
        values[lo:lo + T] = np.where(dup[f][:, None], copied_v, fresh_v)
    tail = p.n - p.text_suffix
    keys[tail:] = rng.standard_normal((p.text_suffix, d))
    values[tail:] = rng.standard_normal((p.text_suffix, d))
    return keys, values


def _queries_for(targets, keys, rows: int, gain: float, rng, d: int, noise: float = 0.05):
    """Queries whose logit against ``keys[target]`` is ``gain`` and small elsewhere."""
    out = np.zeros((rows, d))
    for i in range(rows):
        k = keys[targets[i % len(targets)]]
        out[i] = gain * np.sqrt(d) * k / (k @ k) + noise * rng.standard_normal(d)
    return out


def generate(params: TrajectoryParams) -> Trajectory:
    """Build a trajectory; fully determined by ``params`` (including the seed)."""
    p = params
    layout = _layout(p)
    n, d, omega = p.n, p.head_dim, p.omega
    root = np.random.SeedSequence(p.seed)
    struct_ss, *layer_ss = root.spawn(1 + p.layers)
    srng = np.random.default_rng(struct_ss)
    dup, reg = _screen_structure(p, srng)
    frame_lo = p.text_prefix
    frame_hi = frame_lo + p.frames * p.tokens_per_frame
    duplicated = np.zeros(n, dtype=bool)
    registers = np.zeros(n, dtype=bool)
    duplicated[frame_lo:frame_hi] = dup.ravel()
    registers[frame_lo:frame_hi] = reg.ravel()
    bases = None
    if p.orthogonal_frames:
        full = _orthonormal(srng, d, p.frames * p.frame_rank)
        bases = [full[:, f * p.frame_rank:(f + 1) * p.frame_rank] for f in range(p.frames)]
    candidates = np.arange(n - omega)
    n_targets = int(np.floor(p.concentration * len(candidates) + 0.5))

    traces, probes = [], []
    for li, ss in enumerate(layer_ss):
        rng = np.random.default_rng(ss)
        norms = rng.lognormal(mean=0.0, sigma=0.2, size=n)
        norms[frame_lo:frame_hi] = _inherit_norms(norms[frame_lo:frame_hi], dup, p, rng)
        norms = np.where(registers, norms * p.register_norm_scale, norms)
        all_keys = np.empty((p.kv_heads, n, d))
        all_values = np.empty((p.kv_heads, n, d))
        queries = np.zeros((p.kv_heads * p.group, omega, d))
        for h in range(p.kv_heads):
            keys, values = _head_tensors(p, dup, rng, bases)
            targets = np.sort(rng.choice(candidates, size=n_targets, replace=False)) \
                if n_targets else np.array([], dtype=int)
            if n_targets:
                # heavy hitters: scaled past every other key so the window's
                # attention is near one-hot on them
                top = np.linalg.norm(keys, axis=1).max()
                keys[targets] *= p.target_boost * top / np.linalg.norm(keys[targets], axis=1)[:, None]
                order = rng.permutation(targets)
            all_keys[h], all_values[h] = keys, values
            for g in range(p.group):
                if n_targets:
                    queries[h * p.group + g] = _queries_for(order, keys, omega, p.query_gain, rng, d)
        trace = LayerTrace(
            layer=li, keys=_f32(all_keys), obs_queries=_f32(queries), hidden_norms=_f32(norms),
            group=p.group, values=_f32(all_values) if p.with_values else None)
        traces.append(trace)
        probes.append(derive_probes(trace, layout, p.probes, p.seed, p.query_gain))
    return Trajectory(p, layout, traces, probes, duplicated, registers)


def _inherit_norms(frame_norms, dup, p: TrajectoryParams, rng):
    T = p.tokens_per_frame
    out = frame_norms.reshape(p.frames, T).copy()
    jitter = np.exp(0.02 * rng.standard_normal((p.frames, T)))
    for f in range(1, p.frames):
        out[f] = np.where(dup[f], out[f - 1] * jitter[f], out[f])
    return out.ravel()


def derive_probes(trace: LayerTrace, layout: PromptLayout, count: int = 16, seed: int = 0,
                  gain: float = 40.0, salient_fraction: float = 0.1) -> np.ndarray:
    """Future-decode probe queries aimed at tokens a later step is likely to need.

    Targets are drawn from the prompt tokens the observation window attends
    to most (at least half the top score) together with the visual tokens
    of largest hidden-state norm (the top ``salient_fraction``). Each probe's
    logit against its target is ``gain``. Uses only the trace, so probes can
    be rebuilt from a trace file.
    """
    d = trace.head_dim
    out = np.zeros((trace.kv_heads * trace.group, count, d))
    if count == 0:
        return out
    prompt = np.arange(layout.n - layout.omega)
    visual = np.flatnonzero(layout.visual_mask())
    n_sal = int(np.ceil(salient_fraction * visual.size)) if visual.size else 0
    salient = visual[np.argsort(-trace.hidden_norms[visual], kind="stable")[:n_sal]]
    for h in range(trace.kv_heads):
        a = aggregate_attention(observation_attention(trace, layout, h), None, layout)[prompt]
        attended = prompt[a >= 0.5 * a.max()] if prompt.size else prompt
        pool = np.union1d(attended, salient).astype(int)
        if pool.size == 0:
            pool = np.arange(layout.n)
        rng = np.random.default_rng([seed, trace.layer, h])
        for g in range(trace.group):
            picks = rng.choice(pool, size=count)
            out[h * trace.group + g] = _queries_for(picks, trace.keys[h], count, gain, rng, d)
    return _f32(out)


def gen_trajectory(params: TrajectoryParams) -> tuple[PromptLayout, list[LayerTrace]]:
    t = generate(params)
    return t.layout, t.traces


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reconstruction_error(traces: LayerTrace | Sequence[LayerTrace], layout: PromptLayout,
                         keep: KeepSet, probe_queries) -> dict[str, np.ndarray]:
    """Relative L2 error of attention outputs with the compressed cache.

    ``probe_queries`` holds one ``(kv_heads * group, P, head_dim)`` array per
    layer. Returns ``{"mean": (L, H_kv), "max": (L, H_kv)}`` over the probes
    of each KV head's query group.
    """
    if isinstance(traces, LayerTrace):
        traces = [traces]
        if np.ndim(probe_queries) == 3:
            probe_queries = [probe_queries]
    if len(probe_queries) != len(traces) or keep.layers != len(traces):
        raise ValueError("probe queries, keep set and traces disagree on layer count")
    mean = np.zeros((len(traces), traces[0].kv_heads))
    worst = np.zeros_like(mean)
    for li, t in enumerate(traces):
        t.check_layout(layout)
        if t.values is None:
            raise ValueError("trace lacks values")
        pq = np.asarray(probe_queries[li], dtype=np.float64)
        if pq.ndim != 3 or pq.shape[0] != t.kv_heads * t.group or pq.shape[2] != t.head_dim:
            raise ValueError(f"probe queries shape {pq.shape} does not match trace")
        scale = 1.0 / np.sqrt(t.head_dim)
        for h in range(t.kv_heads):
            q = pq[h * t.group:(h + 1) * t.group].reshape(-1, t.head_dim)
            k, v = t.keys[h], t.values[h]
            idx = np.asarray(keep.kept[li][h], dtype=int)
            full = _softmax_rows(q @ k.T * scale) @ v
            comp = _softmax_rows(q @ k[idx].T * scale) @ v[idx]
            denom = np.linalg.norm(full, axis=1)
            err = np.linalg.norm(full - comp, axis=1) / np.where(denom > 0, denom, 1.0)
            mean[li, h] = err.mean() if err.size else 0.0
            worst[li, h] = err.max() if err.size else 0.0
    return {"mean": mean, "max": worst}
