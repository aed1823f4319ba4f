import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from ildvit.dsp import (DegenerateSegment, Label, RawRecording, Stage, apply_filter,
                        butterworth_hpf_magnitude, design_butterworth_hpf, preprocess_recording,
                        segment_recording, zscore_normalize)

from conftest import make_segment, tone


# ---------------------------------------------------------------- segmentation

def test_fifteen_seconds_gives_five_frames(recording):
    segs = segment_recording(recording(60000))
    assert len(segs) == 5
    rec = recording(60000)
    starts = [np.flatnonzero(rec.samples == s.samples[0])[0] for s in segment_recording(rec)]
    assert starts == [0, 10000, 20000, 30000, 40000]
    assert all(len(s) == 20000 and s.stage is Stage.RAW for s in segs)


def test_exact_window_gives_one_frame(recording):
    assert len(segment_recording(recording(20000))) == 1


def test_short_recording_warns_and_yields_nothing(recording, caplog):
    with caplog.at_level(logging.WARNING):
        assert segment_recording(recording(19999)) == []
    assert "shorter than one" in caplog.text


def test_segment_origin_and_metadata(recording):
    segs = segment_recording(recording(45000))
    assert [s.origin for s in segs] == [("rec", 0), ("rec", 1), ("rec", 2)]
    assert all(s.label is Label.ILD and s.subject_id == "subj" for s in segs)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 400), win=st.integers(1, 80), overlap_num=st.integers(0, 3))
def test_frame_starts_match_naive_enumeration(n, win, overlap_num):
    # sample rate is fixed at 4000, so windows are expressed as multiples of 1/4000 s
    win4 = win * 4
    overlap = overlap_num / 4
    rec = RawRecording(np.arange(n * 4, dtype=float), recording_id="x")
    segs = segment_recording(rec, window_sec=win4 / 4000, overlap=overlap)
    hop = int(win4 * (1 - overlap))
    naive = []
    start = 0
    while start + win4 <= n * 4:
        naive.append(start)
        start += hop
    assert [int(s.samples[0]) for s in segs] == naive
    for s in segs:
        assert np.array_equal(s.samples, np.arange(s.samples[0], s.samples[0] + win4))


def test_segmentation_rejects_bad_parameters(recording):
    rec = recording(30000)
    with pytest.raises(ValueError):
        segment_recording(rec, overlap=1.0)
    with pytest.raises(ValueError):
        segment_recording(rec, window_sec=1.00001)
    with pytest.raises(ValueError):
        segment_recording(rec, window_sec=0.00075, overlap=0.5)  # 3-sample window, hop 1.5


def test_recording_contract():
    with pytest.raises(ValueError):
        RawRecording(np.zeros(10), sample_rate_hz=8000)
    with pytest.raises(ValueError):
        RawRecording(np.zeros(0))
    with pytest.raises(ValueError):
        RawRecording(np.zeros((2, 5)))
    assert Label.parse("ild") is Label.ILD and Label.parse("HEALTHY") is Label.HEALTHY
    with pytest.raises(ValueError):
        Label.parse("copd")


# ---------------------------------------------------------------- filter design

@pytest.fixture(scope="module")
def hpf():
    return design_butterworth_hpf()


def test_cascade_structure(hpf):
    assert len(hpf.sections) == 2
    for b, a in hpf.sections:
        assert a[0] == 1.0
        # both numerator zeros at z = 1
        assert np.allclose(np.roots(b), 1.0, atol=1e-6)
    assert np.all(np.abs(hpf.poles()) < 1.0)


def test_dc_null_and_cutoff(hpf):
    assert abs(hpf.frequency_response([0.0])[0]) < 1e-12
    db_at_cutoff = 20 * np.log10(abs(hpf.frequency_response([10.0])[0]))
    assert abs(db_at_cutoff - 20 * np.log10(1 / math.sqrt(2))) <= 0.1
    assert abs(hpf.frequency_response([100.0])[0]) >= 0.9999


def test_magnitude_matches_analytic_formula_at_log_spaced_points(hpf):
    f = np.logspace(0, np.log10(1990), 20)
    ours = 20 * np.log10(np.abs(hpf.frequency_response(f)))
    oracle = 20 * np.log10(butterworth_hpf_magnitude(f, 4, 10, 4000))
    assert np.max(np.abs(ours - oracle)) <= 0.1


def test_design_matches_independent_reference(hpf):
    # scipy's zpk route is an independent derivation of the same digital filter
    ref = signal.butter(4, 10, btype="highpass", fs=4000, output="sos")
    f = np.linspace(1, 1999, 300)
    _, h_ref = signal.sosfreqz(ref, worN=f, fs=4000)
    assert np.allclose(np.abs(hpf.frequency_response(f)), np.abs(h_ref), rtol=1e-7, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(half_order=st.integers(1, 4), cutoff=st.floats(1.0, 1900.0))
def test_every_design_is_stable_and_matches_formula(half_order, cutoff):
    c = design_butterworth_hpf(2 * half_order, cutoff, 4000)
    assert np.all(np.abs(c.poles()) < 1.0)
    f = np.logspace(np.log10(cutoff / 4), np.log10(1999), 20)
    ours = np.abs(c.frequency_response(f))
    oracle = butterworth_hpf_magnitude(f, 2 * half_order, cutoff, 4000)
    keep = oracle > 1e-4  # dB comparisons are meaningless deep in the stop band
    assert np.max(np.abs(20 * np.log10(ours[keep] / oracle[keep]))) <= 0.1


@pytest.mark.parametrize("order,cutoff", [(3, 10), (0, 10), (4, 2000), (4, 0), (4, 2500)])
def test_design_rejects_bad_parameters(order, cutoff):
    with pytest.raises(ValueError):
        design_butterworth_hpf(order, cutoff, 4000)


# ---------------------------------------------------------------- filtering

def _df2t_oracle(sos, x):
    """Literal per-sample transposed direct form II over each section."""
    y = np.array(x, dtype=float)
    for b0, b1, b2, _, a1, a2 in sos:
        s1 = s2 = 0.0
        out = np.empty_like(y)
        for n, v in enumerate(y):
            o = b0 * v + s1
            s1 = b1 * v - a1 * o + s2
            s2 = b2 * v - a2 * o
            out[n] = o
        y = out
    return y


def test_filter_matches_df2t_oracle(hpf, rng):
    x = rng.standard_normal(3000)
    out = apply_filter(hpf, make_segment(x)).samples
    assert np.allclose(out, _df2t_oracle(hpf.sos, x), rtol=0, atol=1e-12)


def test_filter_zero_constant_and_passband(hpf):
    z = apply_filter(hpf, make_segment(np.zeros(20000)))
    assert z.stage is Stage.FILTERED and np.all(z.samples == 0) and len(z) == 20000
    c = apply_filter(hpf, make_segment(np.full(20000, 3.0))).samples
    assert abs(c[-1]) < 1e-6 and abs(c[-1]) < abs(c[10])
    s = apply_filter(hpf, make_segment(tone(1000))).samples
    assert abs(np.max(np.abs(s[4000:])) - 1.0) <= 0.01


def test_filter_requires_raw_stage(hpf):
    with pytest.raises(ValueError):
        apply_filter(hpf, make_segment(np.ones(10), stage=Stage.FILTERED))


# ---------------------------------------------------------------- z-score

def test_zscore_on_ramp():
    out = zscore_normalize(make_segment(np.arange(1.0, 20001.0), stage=Stage.FILTERED))
    assert out.stage is Stage.NORMALIZED
    assert abs(out.samples.mean()) <= 1e-9 and abs(out.samples.std() - 1) <= 1e-9


def test_zscore_uses_population_std():
    out = zscore_normalize(make_segment([0.0, 2.0], stage=Stage.FILTERED))
    assert np.allclose(out.samples, [-1.0, 1.0])


def test_zscore_is_idempotent_on_normalized_data(rng):
    x = rng.standard_normal(5000)
    x = (x - x.mean()) / x.std()
    out = zscore_normalize(make_segment(x, stage=Stage.FILTERED))
    assert np.max(np.abs(out.samples - x)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=200), st.floats(1e-3, 1e3))
def test_zscore_twice_equals_once(values, gain):
    x = np.asarray(values) * gain
    if x.std() < 1e-6 * max(1.0, np.abs(x).max()):
        return
    once = zscore_normalize(make_segment(x, stage=Stage.FILTERED))
    twice = zscore_normalize(make_segment(once.samples, stage=Stage.FILTERED))
    assert np.max(np.abs(twice.samples - once.samples)) <= 1e-12
    assert abs(once.samples.mean()) <= 1e-9 and abs(once.samples.std() - 1) <= 1e-9


def test_flat_segment_is_degenerate():
    with pytest.raises(DegenerateSegment):
        zscore_normalize(make_segment(np.full(100, 7.0), stage=Stage.FILTERED))


def test_preprocess_skips_flat_segments(rng, caplog):
    x = np.concatenate([rng.standard_normal(20000), np.zeros(40000)])
    rec = RawRecording(x, recording_id="half_flat")
    with caplog.at_level(logging.WARNING):
        segs = preprocess_recording(rec)
    # frames starting at 20000 and later are all-zero and stay zero through the filter
    assert [s.index for s in segs] == [0, 1]
    assert all(s.stage is Stage.NORMALIZED for s in segs)
    with pytest.raises(DegenerateSegment):
        preprocess_recording(rec, skip_degenerate=False)
