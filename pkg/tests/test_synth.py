import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surroforge.errors import InvalidParameter, InvalidSignal
from surroforge.rng import CounterRNG
from surroforge.signal_core import count_breathing_cycles, pearson_r, quarter_bounds
from surroforge.synth import (
    CSV_HEADER,
    AcquisitionRecord,
    BreathingParams,
    NoiseModel,
    ar1_noise,
    generate_cohort,
    generate_com_heads,
    generate_emt,
    is_difficult,
    params_from_dict,
    params_to_dict,
    read_cohort,
    write_cohort,
)

STEADY = BreathingParams(rate_mean=15.0, rate_jitter=0.0, drift_sigma=0.0)


def test_steady_rate_cycle_count():
    # 15 breaths/min over 640 s
    assert abs(count_breathing_cycles(generate_emt(STEADY, 1)) - 160) <= 1


def test_emt_same_seed_bit_identical():
    p = BreathingParams()
    assert generate_emt(p, 42).tobytes() == generate_emt(p, 42).tobytes()
    assert generate_emt(p, 42).tobytes() != generate_emt(p, 43).tobytes()


def test_emt_peak_to_peak_without_amp_jitter():
    e = generate_emt(replace(STEADY, amp_jitter=0.0), 3)
    assert abs(np.ptp(e) - 2 * STEADY.amp_mean) <= 0.05 * 2 * STEADY.amp_mean


def test_emt_is_zero_mean():
    assert abs(generate_emt(BreathingParams(), 9).mean()) < 1e-9


@pytest.mark.parametrize("kw", [
    {"rate_mean": 5.0}, {"rate_mean": 41.0}, {"amp_mean": 0.0}, {"rate_jitter": -1.0},
    {"drift_sigma": -0.1}, {"duration_samples": 2},
])
def test_breathing_params_rejected(kw):
    with pytest.raises(InvalidParameter):
        generate_emt(BreathingParams(**kw), 0)


@pytest.mark.parametrize("kw", [
    {"sigma_base": -1.0}, {"ar_rho": 1.0}, {"ar_rho": -0.1},
    {"head_quarter_mult": ((1, 1, 1, 0), (1, 1, 1, 1))}, {"head_quarter_mult": ((1, 1), (1, 1))},
])
def test_noise_model_rejected(kw):
    with pytest.raises(InvalidParameter):
        generate_com_heads(np.zeros(8), NoiseModel(**kw), 0)


def test_com_heads_length_not_divisible_by_four():
    with pytest.raises(InvalidParameter):
        generate_com_heads(np.zeros(10), NoiseModel(), 0)


def test_noiseless_heads_equal_emt():
    e = generate_emt(BreathingParams(), 4)
    h1, h2 = generate_com_heads(e, NoiseModel(sigma_base=0.0), 4)
    np.testing.assert_array_equal(h1, e - e.mean())
    np.testing.assert_array_equal(h2, e - e.mean())


def test_head_noise_streams_uncorrelated():
    e = np.zeros(6400)
    flat = NoiseModel(sigma_base=1.0, head_quarter_mult=((1,) * 4, (1,) * 4))
    for seed in range(10):
        h1, h2 = generate_com_heads(e, flat, seed)
        assert abs(pearson_r(h1, h2)) <= 0.1


def test_head_noise_follows_quarter_schedule():
    e = np.zeros(6400)
    h1, h2 = generate_com_heads(e, NoiseModel(sigma_base=1.0, ar_rho=0.0), 11)
    for h, sig in enumerate((h1, h2)):
        for q, (lo, hi) in enumerate(quarter_bounds(6400)):
            expected = NoiseModel().head_quarter_mult[h][q]
            assert abs(sig[lo:hi].std() / expected - 1) < 0.08


def test_ar1_statistics():
    eps = ar1_noise(CounterRNG(5), 200_000, 0.5)
    assert abs(eps.std() - 1.0) < 0.02
    assert abs(np.corrcoef(eps[:-1], eps[1:])[0, 1] - 0.5) < 0.02


def test_quarter_pattern_per_head():
    cohort = generate_cohort(20, master_seed=21)
    per_head = []
    for rec in cohort:
        for head in (rec.com_head1, rec.com_head2):
            per_head.append([pearson_r(head[lo:hi], rec.emt[lo:hi]) for lo, hi in quarter_bounds(6400)])
    q = np.mean(per_head, axis=0)
    assert min(q[1], q[2]) > max(q[0], q[3])


# -- records and cohorts ----------------------------------------------------------

def test_record_invariants(cohort10):
    for rec in cohort10:
        n = rec.emt.size
        assert rec.com_combined.size == rec.com_head1.size == rec.com_head2.size == n
        assert rec.com_combined.tobytes() == ((rec.com_head1 + rec.com_head2) / 2).tobytes()
        assert rec.baseline_r == pearson_r(rec.com_combined, rec.emt)
        assert rec.breathing_cycles == count_breathing_cycles(rec.emt)
        assert rec.difficult == ((rec.breathing_cycles > 175) or (rec.baseline_r < 0.35))


@pytest.mark.parametrize("cycles, r, expected", [
    (175, 0.35, False), (176, 0.9, True), (100, 0.3499, True), (100, 0.36, False),
])
def test_difficulty_rule_boundaries(cycles, r, expected):
    assert is_difficult(cycles, r) is expected


def test_record_rejects_mismatched_lengths():
    with pytest.raises(InvalidSignal):
        AcquisitionRecord.from_signals("X", np.zeros(8), np.zeros(8), np.zeros(4))


def test_cohort_determinism():
    a = generate_cohort(5, master_seed=7)
    b = generate_cohort(5, master_seed=7)
    for x, y in zip(a, b):
        assert x.patient_id == y.patient_id and x.seed == y.seed
        for f in ("emt", "com_combined", "com_head1", "com_head2"):
            assert getattr(x, f).tobytes() == getattr(y, f).tobytes()


def test_cohort_prefix_stable():
    # patient i depends only on (master_seed, i)
    small = generate_cohort(3, master_seed=7)
    big = generate_cohort(5, master_seed=7)
    for x, y in zip(small, big):
        assert x.emt.tobytes() == y.emt.tobytes()


def test_cohort_200_unique_ids():
    p = BreathingParams(duration_samples=64)
    recs = generate_cohort(200, p=p, master_seed=1)
    assert len(recs) == 200
    assert len({r.patient_id for r in recs}) == 200


@pytest.mark.parametrize("kw", [{"n_patients": 0}, {"n_patients": 2, "difficult_frac": 1.5},
                                {"n_patients": 2, "difficult_frac": -0.1}])
def test_cohort_preconditions(kw):
    with pytest.raises(InvalidParameter):
        generate_cohort(**kw)


def test_default_cohort_calibration(cohort40):
    median = float(np.median([r.baseline_r for r in cohort40]))
    assert 0.4 <= median <= 0.6


def test_default_difficult_fraction_below_twenty_percent():
    recs = generate_cohort(100, master_seed=0)
    assert sum(r.difficult for r in recs) / len(recs) < 0.2


def test_hard_draws_raise_difficulty():
    easy = generate_cohort(20, master_seed=5, difficult_frac=0.0)
    hard = generate_cohort(20, master_seed=5, difficult_frac=1.0)
    assert sum(r.difficult for r in hard) > sum(r.difficult for r in easy)
    assert all(r.meta["hard_draw"] for r in hard)


def test_baseline_r_decreases_with_noise():
    means = []
    for mult in (0.5, 1.0, 2.0):
        noise = NoiseModel(sigma_base=9.0 * mult)
        means.append(np.mean([r.baseline_r for r in generate_cohort(20, noise=noise, master_seed=13)]))
    assert means[0] > means[1] > means[2]


def test_bimodal_rate_means_cycle():
    recs = generate_cohort(4, p=BreathingParams(patient_rate_sd=0.0), master_seed=2, rate_means=(12, 24))
    assert [r.meta["rate_mean"] for r in recs] == [12.0, 24.0, 12.0, 24.0]
    assert recs[1].breathing_cycles > recs[0].breathing_cycles


# -- on-disk format ----------------------------------------------------------------

def test_write_read_roundtrip(tmp_path, cohort10):
    write_cohort(cohort10, tmp_path, master_seed=3, difficult_frac=0.0)
    back = read_cohort(tmp_path)
    for a, b in zip(cohort10, back):
        assert a.patient_id == b.patient_id and a.seed == b.seed
        for f in ("emt", "com_combined", "com_head1", "com_head2"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert (a.baseline_r, a.breathing_cycles, a.difficult) == (b.baseline_r, b.breathing_cycles, b.difficult)


def test_csv_layout(tmp_path, cohort10):
    write_cohort(cohort10[:1], tmp_path)
    lines = (tmp_path / f"{cohort10[0].patient_id}.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 6401
    first = lines[1].split(",")
    assert first[0] == "0"
    assert all(len(v.lstrip("-").replace(".", "").split("e")[0].lstrip("0")) <= 9 for v in first[1:])


def test_manifest_contents(tmp_path, cohort10):
    write_cohort(cohort10, tmp_path, master_seed=3, difficult_frac=0.0)
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["format_version"] == 1
    assert m["master_seed"] == 3
    entry = m["patients"][0]
    assert set(entry) >= {"patient_id", "file", "seed", "breathing_cycles", "baseline_r", "difficult"}
    p, noise = params_from_dict(m["params"])
    assert (p, noise) == (BreathingParams(), NoiseModel())


def test_manifest_version_checked(tmp_path, cohort10):
    write_cohort(cohort10[:1], tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(InvalidSignal):
        read_cohort(tmp_path)


@settings(max_examples=25, deadline=None)
@given(st.floats(6, 40), st.floats(0.1, 20), st.floats(0, 0.99), st.floats(0, 30))
def test_params_dict_roundtrip(rate, amp, rho, sigma):
    p = BreathingParams(rate_mean=rate, amp_mean=amp)
    n = NoiseModel(sigma_base=sigma, ar_rho=rho)
    assert params_from_dict(json.loads(json.dumps(params_to_dict(p, n)))) == (p, n)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_generated_signals_finite(seed):
    p = BreathingParams(duration_samples=400)
    rec = generate_cohort(1, p=p, master_seed=seed)[0]
    assert np.all(np.isfinite(rec.com_combined)) and not math.isnan(rec.baseline_r)
