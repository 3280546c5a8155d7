import numpy as np
import pytest

from guikv.cache_model import LayerTrace, SegmentKind, build_layout, causal_valid_mask
from guikv.sparsity import (
    attention_sparsity,
    layer_sparsity_profile,
    merge_profiles,
    threshold_filter,
)


def test_threshold_filter_relative_to_row_max():
    a = np.array([[1.0, 0.009, 0.01, 0.5]])
    assert threshold_filter(a, 0.01).tolist() == [[1.0, 0.0, 0.01, 0.5]]


def test_sparsity_counts_only_valid_entries():
    f = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 1.0]])
    mask = causal_valid_mask(3, 2)
    assert attention_sparsity(f, mask) == pytest.approx(2 / 5)
    with pytest.raises(ValueError, match="empty causal mask"):
        attention_sparsity(f, np.zeros_like(mask))


def test_uniform_attention_is_dense():
    lay = build_layout([(0, 10, SegmentKind.FRAME, 0), (10, 14, SegmentKind.TEXT, 0)], 4)
    tr = LayerTrace(0, np.random.default_rng(0).standard_normal((2, 14, 4)),
                    np.zeros((2, 4, 4)), np.ones(14))
    prof = layer_sparsity_profile([tr, tr], lay)
    assert prof.values.shape == (2, 2) and np.all(prof.values == 0)


def test_monotone_in_p(fixture_trace):
    lay, traces = fixture_trace
    lo = layer_sparsity_profile(traces, lay, 0.01).values
    hi = layer_sparsity_profile(traces, lay, 0.5).values
    assert np.all(hi >= lo)


def test_csv_and_merge(fixture_trace):
    lay, traces = fixture_trace
    prof = layer_sparsity_profile(traces, lay)
    text = prof.to_csv()
    assert text.startswith("# schema: guikv.sparsity/1\nlayer,head,sparsity\n")
    merged = merge_profiles([prof, prof])
    np.testing.assert_array_equal(merged.values, prof.values)
    assert prof.summary()["schema"] == "guikv.sparsity/1"
