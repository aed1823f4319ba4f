"""Synthetic breath-sound recordings for desk-scale runs.

Healthy: band-limited noise under a breathing envelope plus slow baseline
drift. ILD: the same, with short damped-sinusoid bursts (crackle-like)
during each inspiration. Each subject draws its own breathing rate, noise
band and crackle pitch so that subjects differ from one another.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE_HZ, Label
from .manifest import Manifest, ManifestEntry, write_manifest
from .wavio import write_wav

MIN_DURATION_SEC = 15.0
MAX_DURATION_SEC = 50.0


def _subject_traits(rng, label):
    traits = {
        "breath_hz": rng.uniform(0.2, 0.35),
        "band": (rng.uniform(60.0, 120.0), rng.uniform(350.0, 500.0)),
        "drift": rng.uniform(0.05, 0.3),
    }
    if label is Label.ILD:
        traits["crackle_hz"] = rng.uniform(700.0, 1300.0)
        traits["crackles_per_breath"] = int(rng.integers(5, 11))
    return traits


def synth_breath_sound(duration_sec, traits, rng, fs=SAMPLE_RATE_HZ):
    n = int(round(duration_sec * fs))
    t = np.arange(n) / fs
    sos = signal.butter(4, traits["band"], btype="bandpass", fs=fs, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(n))
    noise /= noise.std()
    phase = 2 * np.pi * traits["breath_hz"] * t + rng.uniform(0, 2 * np.pi)
    envelope = 0.25 + np.sin(phase / 2) ** 2  # one lobe per breath cycle
    x = envelope * noise + traits["drift"] * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t)

    if "crackle_hz" in traits:
        period = 1.0 / traits["breath_hz"]
        # the envelope rises while phase mod 2*pi is in [0, pi): inspiration
        cycle0 = ((-phase[0]) % (2 * np.pi)) / (2 * np.pi * traits["breath_hz"]) - period
        burst_len = int(0.015 * fs)
        tb = np.arange(burst_len) / fs
        while cycle0 < duration_sec:
            for _ in range(traits["crackles_per_breath"]):
                onset = cycle0 + rng.uniform(0.0, 0.5 * period)
                i0 = int(onset * fs)
                if i0 < 0 or i0 + burst_len > n:
                    continue
                f = traits["crackle_hz"] * rng.uniform(0.85, 1.15)
                burst = np.sin(2 * np.pi * f * tb) * np.exp(-tb / rng.uniform(0.002, 0.004))
                x[i0:i0 + burst_len] += rng.uniform(2.0, 4.0) * burst
            cycle0 += period
    return 0.8 * x / np.max(np.abs(x))


def generate_synthetic_dataset(out_dir, n_subjects_per_class=20, recordings_per_subject=2, seed=0,
                               min_duration=MIN_DURATION_SEC, max_duration=MAX_DURATION_SEC):
    """Write WAVs plus ``manifest.csv`` into ``out_dir``; returns the Manifest."""
    if n_subjects_per_class < 1 or recordings_per_subject < 1:
        raise ValueError("subject and recording counts must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for label, prefix in ((Label.HEALTHY, "H"), (Label.ILD, "I")):
        for s in range(n_subjects_per_class):
            subject = f"{prefix}{s + 1:03d}"
            rng = np.random.default_rng([seed, int(label), s])
            traits = _subject_traits(rng, label)
            for r in range(recordings_per_subject):
                rec_id = f"{subject}_r{r + 1}"
                duration = rng.uniform(min_duration, max_duration)
                x = synth_breath_sound(duration, traits, rng)
                fname = f"{rec_id}.wav"
                write_wav(os.path.join(out_dir, fname), x)
                entries.append(ManifestEntry(fname, rec_id, subject, label, "SYNTH"))
    manifest = Manifest(entries, os.path.abspath(out_dir))
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


def synth_heart_sound(duration_sec, rng, fs=SAMPLE_RATE_HZ):
    """Lub-dub pulse train at a random heart rate; a stand-in noise source for tests."""
    n = int(round(duration_sec * fs))
    x = np.zeros(n)
    beat = 60.0 / rng.uniform(60.0, 100.0)
    tb = np.arange(int(0.08 * fs)) / fs
    t0 = rng.uniform(0, beat)
    while t0 < duration_sec:
        for offset, f, amp in ((0.0, 45.0, 1.0), (0.3 * beat, 70.0, 0.7)):
            i0 = int((t0 + offset) * fs)
            seg = amp * np.sin(2 * np.pi * f * tb) * np.exp(-tb / 0.02)
            m = min(len(seg), n - i0)
            if m > 0:
                x[i0:i0 + m] += seg[:m]
        t0 += beat
    return x + 0.01 * rng.standard_normal(n)
