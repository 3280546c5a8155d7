import numpy as np
import pytest

from conftest import random_instance
from guikv.baselines import (
    _rebalance,
    plan_select,
    pyramidkv_budgets,
    recency_select,
    snapkv_select,
    uniform_budgets,
    vlcache_budgets,
)
from guikv.cache_model import SegmentKind, build_layout


def test_uniform():
    plan = uniform_budgets(4, 100, 0.2)
    assert plan.budgets == (20, 20, 20, 20)


def test_pyramid_shape_and_total():
    plan = pyramidkv_budgets(5, 1000, 0.2, beta=20, omega=8)
    b = plan.budgets
    assert sum(b) == 5 * 200
    assert list(b) == sorted(b, reverse=True)
    assert min(b) >= 8
    # last = max(omega, ceil(200 / 20)) = 10, first = 390, linear in between
    assert b == (390, 295, 200, 105, 10)


def test_pyramid_rejects_small_budget():
    with pytest.raises(ValueError, match="budget below observation window"):
        pyramidkv_budgets(4, 100, 0.05, omega=8)


def test_vlcache_proportional_to_density():
    plan = vlcache_budgets([0.5, 0.75, 0.75, 1.0], 4, 1000, 0.2, omega=8)
    assert sum(plan.budgets) == 800
    # densities .5 .25 .25 0 -> 400 200 200 0, the last clamped up to omega
    assert plan.budgets[3] == 8
    assert plan.budgets[0] > plan.budgets[1] == plan.budgets[2]


def test_vlcache_flat_profile_is_uniform():
    plan = vlcache_budgets(np.full(7, 0.993), 7, 301, 0.2)
    base = uniform_budgets(7, 301, 0.2).budgets
    assert all(abs(a - b) <= 1 for a, b in zip(plan.budgets, base))


def test_vlcache_all_sparse_falls_back():
    plan = vlcache_budgets(np.ones(3), 3, 100, 0.5)
    assert plan.fallback and plan.budgets == (50, 50, 50)


def test_rebalance_infeasible():
    with pytest.raises(ValueError, match="infeasible"):
        _rebalance([1, 1], 100, 1, 10)


def test_recency_keeps_sinks_and_tail():
    lay = build_layout([(0, 20, SegmentKind.FRAME, 0), (20, 30, SegmentKind.TEXT, 0)], 4)
    keep = recency_select(lay, 0.3, sink_count=4)
    assert keep.kept[0][0].tolist() == [0, 1, 2, 3, 25, 26, 27, 28, 29]


def test_plan_select_uses_layer_budgets():
    rng = np.random.default_rng(2)
    lay, traces = random_instance(rng, n_max=64, layers_max=4)
    while len(traces) < 2 or lay.n < 20:
        lay, traces = random_instance(rng, n_max=64, layers_max=4)
    plan = uniform_budgets(len(traces), lay.n, 0.5)
    assert plan_select(traces, lay, plan, 0.5) == snapkv_select(traces, lay, 0.5)


def test_recency_sinks_yield_to_window():
    lay = build_layout([(0, 92, SegmentKind.FRAME, 0), (92, 100, SegmentKind.TEXT, 0)], 8)
    assert recency_select(lay, 0.12, sink_count=4).kept[0][0].tolist() == \
        [0, 1, 2, 3] + list(range(92, 100))
    assert recency_select(lay, 0.1, sink_count=4).kept[0][0].tolist() == \
        [0, 1] + list(range(92, 100))
    assert recency_select(lay, 0.03, sink_count=4).kept[0][0].tolist() == [0, 1, 2]
