import math
from dataclasses import replace

import pytest

from guikv.cache_model import SegmentKind, build_layout
from guikv.flops import (
    CFG_STAR,
    REFERENCE_DECODE,
    ModelConfig,
    calibrate,
    compression_overhead,
    decode_flops_per_token,
    flops_report,
    prefill_flops,
    screenshot_layout,
)

SMALL = ModelConfig(layers=2, d_model=16, query_heads=4, kv_heads=2, head_dim=4, ffn_dim=32,
                    vocab_size=100, tokens_per_screenshot=10, text_token_count=12)


def test_decode_formula_by_hand():
    d, kv, dh, qh, ffn, V = 16, 2, 4, 4, 32, 100
    dense = 2 * d * (d + 2 * kv * dh) + 2 * d * d + 6 * d * ffn
    expected = 2 * dense + 4 * qh * dh * (3 + 5) + 2 * d * V
    assert decode_flops_per_token(SMALL, [3, 5]) * 1e6 == pytest.approx(expected, rel=1e-15)


def test_decode_zero_cache_and_linearity():
    base = decode_flops_per_token(SMALL, [0, 0])
    one = decode_flops_per_token(SMALL, [7, 9]) - base
    two = decode_flops_per_token(SMALL, [14, 18]) - base
    assert two == pytest.approx(2 * one, rel=1e-12)
    assert decode_flops_per_token(SMALL, [1, 0]) > base
    with pytest.raises(ValueError):
        decode_flops_per_token(SMALL, [1])


def test_prefill_single_token_and_quadratic():
    assert prefill_flops(SMALL, 1) == pytest.approx(decode_flops_per_token(SMALL, [1, 1]) * 1e6)
    attn = lambda n: prefill_flops(SMALL, n) - n * (prefill_flops(SMALL, 1) - 2 * 16 * 100
                                                      - 2 * 4 * 4 * 4) - 2 * 16 * 100
    assert attn(20) == pytest.approx(4 * attn(10), rel=1e-12)


def test_cfg_star_full_cache_rows():
    for (s, g), ref in REFERENCE_DECODE.items():
        if g == 1.0:
            got = flops_report(CFG_STAR, s, 1.0).full_decode_mflops
            assert abs(got / ref - 1) < 0.01


def test_reduction_orderings():
    for g in (0.2, 0.4):
        red = [flops_report(CFG_STAR, s, g).reduction_pct for s in (3, 5, 10)]
        assert red == sorted(red) and len(set(red)) == 3
    for s in (3, 5, 10):
        red = [flops_report(CFG_STAR, s, g).reduction_pct for g in (0.1, 0.2, 0.4, 0.8)]
        assert red == sorted(red, reverse=True)
    assert flops_report(CFG_STAR, 5, 1.0).reduction_pct == 0.0


def test_overhead_rank_zero_and_components():
    lay = screenshot_layout(CFG_STAR, 5)
    zero = compression_overhead(CFG_STAR, lay, 0.4, rank_r=0)
    assert zero["qr"] == 0 and zero["projection"] == 0
    comps = compression_overhead(CFG_STAR, lay, 0.4)
    assert all(v >= 0 for v in comps.values())


def test_overhead_scoring_formula():
    lay = build_layout([(0, 4, SegmentKind.TEXT, 0), (4, 20, SegmentKind.FRAME, 0),
                        (20, 24, SegmentKind.TEXT, 0)], 4)
    c = compression_overhead(SMALL, lay, 0.5, rank_r=2)
    n, L = 24, 2
    assert c["attention_scoring"] * 1e9 == pytest.approx(L * 4 * 4 * n * (2 * 4 + 4))
    assert c["qr"] * 1e9 == pytest.approx(2 * 16 * 2 * 2 * L)
    assert c["projection"] * 1e9 == pytest.approx(4 * 4 * 2 * (n - 4 - 16) * 2 * L)
    assert c["topk"] * 1e9 == pytest.approx(n * math.log2(n) * 2 * L)
    assert c["gather"] * 1e9 == pytest.approx(12 * 4 * 2 * 2 * L)


def test_screenshot_layout_shape():
    lay = screenshot_layout(SMALL, 3, omega=4)
    assert lay.n == SMALL.prompt_tokens(3)
    assert [s.step for s in lay.visual_segments] == [2, 1, 0]


def test_calibration_reproduces_fixture():
    got = calibrate(replace(CFG_STAR, flops_scale=1.0), tokens_range=range(12900, 13201, 20),
                    text_range=range(900, 1201, 50))
    assert got.tokens_per_screenshot == CFG_STAR.tokens_per_screenshot
    assert got.text_token_count == CFG_STAR.text_token_count
    assert got.flops_scale == pytest.approx(CFG_STAR.flops_scale, rel=1e-6)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        replace(SMALL, query_heads=5)
