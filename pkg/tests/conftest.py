import sys
from pathlib import Path

import numpy as np
import pytest

TESTS = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS))

from guikv.cache_model import LayerTrace, SegmentKind, build_layout  # noqa: E402

DATA = TESTS / "data"
FIXTURE = DATA / "fixture.gkvt"
GOLDEN = DATA / "golden_keepset_guikv_0.2.json"
GAMMA_GRID = (0.01, 0.03, 0.05, 0.1, 0.15, 0.2, 0.4, 0.8, 1.0)


def random_instance(rng, n_max=64, layers_max=4, heads_max=4, group_max=2, d_max=8,
                    omega_max=4, with_values=False):
    """Random layout (text / frames / text) and matching traces."""
    omega = int(rng.integers(1, omega_max + 1))
    d = int(rng.integers(2, d_max + 1))
    heads = int(rng.integers(1, heads_max + 1))
    group = int(rng.integers(1, group_max + 1))
    layers = int(rng.integers(1, layers_max + 1))
    frames = int(rng.integers(0, 4))
    segs, pos = [], 0
    prefix = int(rng.integers(0, 6))
    if prefix:
        segs.append((0, prefix, SegmentKind.TEXT, 0))
        pos = prefix
    budget_left = n_max - pos - omega
    for f in range(frames):
        size = int(rng.integers(1, max(2, budget_left // max(frames, 1)) + 1))
        size = min(size, budget_left - (frames - f - 1))
        if size < 1:
            break
        segs.append((pos, pos + size, SegmentKind.FRAME, frames - 1 - f))
        pos += size
        budget_left -= size
    if len(segs) and segs[-1][2] == SegmentKind.FRAME:
        # renumber steps so the last frame present is the current one
        fr = [i for i, s in enumerate(segs) if s[2] == SegmentKind.FRAME]
        for k, i in enumerate(fr):
            s = segs[i]
            segs[i] = (s[0], s[1], s[2], len(fr) - 1 - k)
    segs.append((pos, pos + omega, SegmentKind.TEXT, 0))
    layout = build_layout(segs, omega)
    n = layout.n
    traces = [
        LayerTrace(
            layer=li,
            keys=rng.standard_normal((heads, n, d)),
            obs_queries=rng.standard_normal((heads * group, omega, d)) * 1.5,
            hidden_norms=rng.lognormal(0.0, 0.5, n),
            group=group,
            values=rng.standard_normal((heads, n, d)) if with_values else None,
        )
        for li in range(layers)
    ]
    return layout, traces


@pytest.fixture(scope="session")
def fixture_trace():
    from guikv.traceio import read_trace
    return read_trace(FIXTURE)
