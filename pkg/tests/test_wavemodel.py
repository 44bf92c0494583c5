import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import waves_bruteforce
from weavesim.errors import CalibrationError, ContractError
from weavesim.presets import model_preset
from weavesim.wavemodel import (
    CalibrationTable,
    HardwareProfile,
    attention_time,
    builtin_profile,
    calibrate,
    collective_time,
    cta_count,
    ffn_time,
    fit_affine,
    fit_residuals,
    gemm_time,
    load_table,
    resolve_profile,
    rmsnorm_time,
    wave_count,
)

H100 = builtin_profile("h100")
US = 1e-6


def us(cost):
    return cost.duration / US


def test_cta_count_examples():
    prof = replace(H100, cta_columns=4)
    assert cta_count(1024, prof) == 8 * 4
    assert cta_count(1, prof) == 4
    assert cta_count(0, prof) == 0
    assert cta_count(6400, replace(H100, cta_columns=6)) == 300


@pytest.mark.parametrize("ctas, sms, waves", [(300, 132, 3), (10, 4, 3), (0, 132, 0), (132, 132, 1)])
def test_wave_count_examples(ctas, sms, waves):
    assert wave_count(ctas, sms) == waves


def test_wave_count_needs_an_sm():
    with pytest.raises(ContractError):
        wave_count(5, 0)


@settings(max_examples=200)
@given(st.integers(0, 5000), st.integers(1, 300))
def test_wave_count_matches_bruteforce_and_is_monotone(ctas, sms):
    w = wave_count(ctas, sms)
    assert w == waves_bruteforce(ctas, sms)
    assert wave_count(ctas + 1, sms) >= w
    assert wave_count(ctas, sms + 1) <= w


def test_gemm_wave_halving_and_plateau():
    prof = replace(H100, tile_tokens=128, tile_cols=128)
    # 132 CTAs: one row tile, 132 column tiles
    k = 4096
    a = gemm_time(128, 132 * 128, k, 66, prof)
    b = gemm_time(128, 132 * 128, k, 132, prof)
    assert (a.waves, b.waves) == (2, 1)
    assert a.duration == pytest.approx(2 * b.duration)
    c150 = gemm_time(128, 150 * 128, k, 132, prof)
    c168 = gemm_time(128, 168 * 128, k, 132, prof)
    assert c150.waves == c168.waves == 2
    assert c150.duration == c168.duration


@settings(max_examples=100)
@given(st.integers(1, 64), st.integers(1, 64))
def test_gemm_plateau_within_wave_bucket(rows_a, rows_b):
    prof = replace(H100, cta_columns=1)
    ta, tb = rows_a * prof.tile_tokens, rows_b * prof.tile_tokens
    # tile_cols columns -> one CTA per row tile
    a = gemm_time(ta, prof.tile_cols, 1024, 16, prof)
    b = gemm_time(tb, prof.tile_cols, 1024, 16, prof)
    if a.waves == b.waves:
        assert a.duration == b.duration


def test_rmsnorm_fit_points():
    assert us(rmsnorm_time(1024, 8192, H100)) == pytest.approx(29.8, rel=0.05)
    full = rmsnorm_time(4096, 8192, H100)
    shard = rmsnorm_time(4096, 8192, H100, sharded=True, world_size=8)
    assert full.bytes_moved == pytest.approx(8 * shard.bytes_moved)
    assert max(abs(e) for e in fit_residuals(load_table("h100"), H100)["rmsnorm"]) <= 0.15


def test_allreduce_fit_points():
    assert us(collective_time("allreduce", 1024, 8192, 8, H100)) == pytest.approx(74.9, rel=0.02)
    assert us(collective_time("allreduce", 16384, 8192, 8, H100)) == pytest.approx(986.0, rel=0.02)
    assert max(abs(e) for e in fit_residuals(load_table("h100"), H100)["allreduce"]) <= 0.10


def test_allreduce_fit_matches_independent_polyfit():
    tok, meas = load_table("h100").points("allreduce")
    slope, intercept = np.polyfit(tok, meas, 1)
    assert H100.collective_per_token_time / US == pytest.approx(slope, rel=1e-9)
    assert H100.collective_base_latency / US == pytest.approx(intercept, rel=1e-9)
    assert slope == pytest.approx(0.059, abs=0.001)


def test_fused_within_three_percent_of_allreduce():
    for t in (64, 1024, 32768):
        ar = collective_time("allreduce", t, 8192, 8, H100).duration
        fu = collective_time("fused", t, 8192, 8, H100).duration
        assert 1.0 <= fu / ar <= 1.03 + 1e-12


def test_unknown_collective_kind():
    with pytest.raises(ContractError):
        collective_time("broadcast", 10, 8192, 8, H100)
    with pytest.raises(ContractError):
        collective_time("allreduce", 10, 8192, 0, H100)


def test_saturation_curve_flat_beyond_knee():
    base = collective_time("fused", 4096, 8192, 8, H100).duration
    assert collective_time("fused", 4096, 8192, 16, H100).duration == base
    assert collective_time("fused", 4096, 8192, 2, H100).duration > collective_time("fused", 4096, 8192, 4, H100).duration > base


def test_split_collective_costs_more_at_small_t():
    for t in (64, 256, 1024):
        ar = collective_time("allreduce", t, 8192, 8, H100).duration
        rs = collective_time("reduce_scatter", t, 8192, 8, H100).duration
        ag = collective_time("all_gather", t, 8192, 8, H100).duration
        assert rs + ag > ar


@settings(max_examples=100)
@given(st.integers(64, 32768), st.sampled_from([4096, 8192]))
def test_modeled_fusion_speedup_bracket(t, hidden):
    seq = collective_time("allreduce", t, hidden, 8, H100).duration + rmsnorm_time(t, hidden, H100).duration
    fused = collective_time("fused", t, hidden, 8, H100).duration
    assert 1.25 <= seq / fused <= 1.45


LLAMA = model_preset("llama-70b")


def test_attention_monotone_in_tokens_and_context():
    prev = 0.0
    for t in (1, 64, 256, 1024, 4096):
        d = attention_time(t, 0, LLAMA, 132, H100).duration
        assert d >= prev
        prev = d
    assert attention_time(512, 512, LLAMA, 132, H100).duration >= attention_time(512, 0, LLAMA, 132, H100).duration


def test_decode_attention_is_memory_dominated():
    chunks = [(1, 8192)] * 64
    with_kv = attention_time(0, 0, LLAMA, 132, H100, chunks)
    no_kv = attention_time(0, 0, LLAMA, 132, H100, [(1, 0)] * 64)
    kv_time = (with_kv.bytes_moved - no_kv.bytes_moved) / H100.hbm_bandwidth_effective
    compute_time = with_kv.duration - kv_time - no_kv.duration
    assert kv_time > 10 * compute_time


def test_moe_ffn_reads_active_expert_weights():
    mix = model_preset("mixtral-8x22b")
    small = ffn_time(1, mix, 132, H100)
    big = ffn_time(4096, mix, 132, H100)
    # one token touches top_k experts, a large batch touches all of them
    per_expert = 3 * mix.hidden * mix.intermediate_per_rank * H100.bytes_per_element
    assert small.bytes_moved == pytest.approx(mix.top_k * per_expert)
    assert big.bytes_moved == pytest.approx(mix.experts * per_expert)
    assert big.duration > small.duration


def test_calibrate_two_points_interpolates_exactly():
    table = CalibrationTable.from_dict({
        "name": "tiny", "hidden": 8192,
        "series": {
            "allreduce": [{"tokens": 100, "microseconds": 20.0}, {"tokens": 300, "microseconds": 40.0}],
            "rmsnorm": [{"tokens": 100, "microseconds": 5.0}, {"tokens": 300, "microseconds": 9.0}],
        },
    })
    prof = calibrate(table)
    for errs in fit_residuals(table, prof).values():
        assert max(abs(e) for e in errs) < 1e-12


@pytest.mark.parametrize(
    "series",
    [
        {"allreduce": [{"tokens": 64, "microseconds": 10.0}]},
        {"allreduce": [{"tokens": 64, "microseconds": 10.0}, {"tokens": 64, "microseconds": 11.0}]},
        {"allreduce": [{"tokens": 64, "microseconds": 30.0}, {"tokens": 128, "microseconds": 20.0}]},
        {"rmsnorm": [{"tokens": 64, "microseconds": 3.0}, {"tokens": 128, "microseconds": 4.0}]},
    ],
)
def test_degenerate_tables_raise(series):
    with pytest.raises(CalibrationError):
        calibrate(CalibrationTable.from_dict({"name": "bad", "hidden": 8192, "series": series}))


def test_fit_affine_weightings_agree_on_exact_lines():
    x = np.array([1.0, 2.0, 5.0])
    y = 3.0 + 2.0 * x
    for w in ("absolute", "relative"):
        a, b = fit_affine(x, y, w)
        assert (a, b) == pytest.approx((3.0, 2.0))
    with pytest.raises(CalibrationError):
        fit_affine(x, y, "huber")


def test_b200_profile_is_distinct():
    b200 = builtin_profile("b200")
    assert b200.num_sms == 148
    assert b200.collective_base_latency > H100.collective_base_latency


def test_profile_json_round_trip(tmp_path):
    path = tmp_path / "p.json"
    H100.save(path)
    assert HardwareProfile.load(path) == H100
    assert resolve_profile(str(path)) == H100
    data = json.loads(path.read_text())
    data["bogus"] = 1
    path.write_text(json.dumps(data))
    with pytest.raises(ContractError):
        HardwareProfile.load(path)


def test_profile_validation():
    with pytest.raises(ContractError):
        HardwareProfile(collective_sms=132)
    with pytest.raises(ContractError):
        resolve_profile("no-such-gpu")
