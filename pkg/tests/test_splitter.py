from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from weavesim.errors import ContractError
from weavesim.presets import model_preset
from weavesim.splitter import (
    Mode,
    SplitPlan,
    SplitPolicy,
    equal_split,
    place_sequence_boundaries,
    plan_split,
    select_mode,
    smart_offset_analytic,
    smart_offset_sweep,
    split_waves,
)
from weavesim.verify import check_split_no_regression, worked_example_profile
from weavesim.wavemodel import builtin_profile, cta_count, ffn_time, wave_count

H100 = builtin_profile("h100")
LLAMA = model_preset("llama-70b")
DENSE, MOE = SplitPolicy(1024), SplitPolicy(4096)


@pytest.mark.parametrize(
    "t, policy, mode",
    [(1024, DENSE, Mode.OVERLAP), (512, DENSE, Mode.FUSED_ONLY), (4096, MOE, Mode.OVERLAP), (2048, MOE, Mode.FUSED_ONLY)],
)
def test_select_mode_examples(t, policy, mode):
    assert select_mode(t, policy) is mode


@given(st.integers(1, 70000), st.integers(1, 70000), st.integers(1, 8192))
def test_select_mode_monotone(a, b, threshold):
    lo, hi = sorted((a, b))
    pol = SplitPolicy(threshold)
    if select_mode(lo, pol) is Mode.OVERLAP:
        assert select_mode(hi, pol) is Mode.OVERLAP


@pytest.mark.parametrize("kwargs", [{"threshold_tokens": 0}, {"offset_grid": (0, -64)}, {"offset_grid": (128, 64)}])
def test_policy_validation(kwargs):
    with pytest.raises(ContractError):
        SplitPolicy(**kwargs)


def test_worked_example_300_ctas():
    prof = worked_example_profile()
    t = 6400
    assert cta_count(t, prof) == 300
    unsplit = wave_count(300, prof.num_sms)
    assert split_waves(*equal_split(t), prof) == 4
    half, _ = equal_split(t)
    prefix = half + smart_offset_analytic(t, prof)
    assert cta_count(prefix, prof) == 132
    assert cta_count(t - prefix, prof) == 168
    assert split_waves(prefix, t - prefix, prof) == unsplit == 3


def test_single_wave_batch_disables_split():
    t = 256
    assert wave_count(cta_count(t, H100), H100.num_sms) == 1
    half, _ = equal_split(t)
    assert half + smart_offset_analytic(t, H100) == t
    plan = plan_split(t, SplitPolicy(128), H100)
    assert plan.mode is Mode.FUSED_ONLY
    assert (plan.prefix_tokens, plan.suffix_tokens) == (t, 0)


@pytest.mark.parametrize("profile", [H100, builtin_profile("b200"), worked_example_profile()])
def test_wave_no_regression_full_range(profile):
    assert check_split_no_regression(profile).passed


@settings(max_examples=200)
@given(st.integers(2, 2048), st.integers(1, 8), st.integers(16, 200))
def test_wave_no_regression_random_profiles(rows, cols, sms):
    prof = replace(H100, cta_columns=cols, num_sms=sms, collective_sms=min(8, sms - 1) or 1)
    t = rows * prof.tile_tokens // 4 + 2 * prof.tile_tokens
    half, _ = equal_split(t)
    prefix = half + smart_offset_analytic(t, prof)
    assert 0 < prefix <= t
    assert split_waves(prefix, t - prefix, prof) <= split_waves(*equal_split(t), prof)
    # an exact full-wave prefix reaches the unsplit wave count
    unsplit = wave_count(cta_count(t, prof), sms)
    exists = any(
        cta_count(p, prof) % sms == 0 and split_waves(p, t - p, prof) == unsplit
        for p in range(prof.tile_tokens, t, prof.tile_tokens)
    )
    if exists and prefix < t:
        assert split_waves(prefix, t - prefix, prof) == unsplit


def test_plan_invariants():
    for t in (1, 500, 1024, 3000, 8192, 32768):
        plan = plan_split(t, DENSE, H100, LLAMA)
        assert plan.prefix_tokens + plan.suffix_tokens == t
        if plan.mode is Mode.OVERLAP:
            assert t >= DENSE.threshold_tokens
            assert plan.is_split
    with pytest.raises(ContractError):
        SplitPlan(10, 6, 5, 1, Mode.OVERLAP)


def test_sweep_all_infeasible_returns_zero():
    calls = []
    assert smart_offset_sweep(100, SplitPolicy(1, (64, 128)), lambda a, b: calls.append((a, b)) or 1.0) == 0
    assert calls == []


def test_sweep_ties_prefer_smaller_offset():
    assert smart_offset_sweep(4096, SplitPolicy(), lambda a, b: 1.0) == 0
    assert smart_offset_sweep(4096, SplitPolicy(), lambda a, b: abs(a - 2048 - 128) // 64) == 128


def ffn_pair(a, b):
    return ffn_time(a, LLAMA, H100.num_sms, H100).duration + ffn_time(b, LLAMA, H100.num_sms, H100).duration


def test_sweep_agrees_with_analytic_on_grid():
    grid = SplitPolicy().offset_grid
    compared = 0
    for t in range(1024, 32769, 128):
        offset = smart_offset_analytic(t, H100, LLAMA)
        if offset not in grid or offset >= t // 2:
            continue
        compared += 1
        half = t // 2
        swept = smart_offset_sweep(t, SplitPolicy(), ffn_pair)
        assert ffn_pair(half + swept, t - half - swept) == pytest.approx(ffn_pair(half + offset, t - half - offset), rel=1e-12)
    assert compared >= 20


@pytest.mark.parametrize("t", [256, 320, 384, 448, 500, 512])
def test_grid_sweep_close_to_exhaustive_split(t):
    best = min(ffn_pair(a, t - a) for a in range(1, t))
    half = t // 2
    swept = smart_offset_sweep(t, SplitPolicy(), ffn_pair)
    whole = ffn_time(t, LLAMA, H100.num_sms, H100)
    one_wave = whole.duration / whole.waves
    assert ffn_pair(half + swept, t - half - swept) - best <= one_wave


def test_place_sequence_boundaries_examples():
    plan = SplitPlan(10, 5, 5, 0, Mode.OVERLAP)
    placed = place_sequence_boundaries([3, 4, 3], plan)
    assert placed.partial_sequence_boundaries == (3, 2, 0)
    assert placed.straddler == 1
    exact = place_sequence_boundaries([5, 5], plan)
    assert exact.straddler is None
    one = plan_split(1024, DENSE, H100, sequence_lengths=[1024])
    assert one.straddler == 0
    assert one.partial_sequence_boundaries == (one.prefix_tokens,)


def test_place_sequence_boundaries_contract():
    plan = SplitPlan(10, 5, 5, 0, Mode.OVERLAP)
    with pytest.raises(ContractError):
        place_sequence_boundaries([3, 3], plan)
    with pytest.raises(ContractError):
        place_sequence_boundaries([12, -2], plan)


@given(st.lists(st.integers(0, 300), min_size=1, max_size=20), st.floats(0, 1))
def test_place_sequence_boundaries_properties(lengths, frac):
    t = sum(lengths)
    a = int(frac * t)
    placed = place_sequence_boundaries(lengths, SplitPlan(t, a, t - a, 0, Mode.OVERLAP))
    pre = placed.partial_sequence_boundaries
    assert sum(pre) == a
    assert all(0 <= p <= n for p, n in zip(pre, lengths))
    # prefix tokens are a contiguous leading block of the flattened stream
    full = [p == n for p, n in zip(pre, lengths)]
    first_partial = next((i for i, f in enumerate(full) if not f), len(lengths))
    assert all(p == 0 for p in pre[first_partial + 1:])
    assert sum(1 for p, n in zip(pre, lengths) if 0 < p < n) <= 1
