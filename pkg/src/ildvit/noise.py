"""SNR-controlled additive noise and the per-SNR robustness table."""

from __future__ import annotations

import csv
import glob
import os
from dataclasses import dataclass, replace

import numpy as np

from .dsp import DegenerateSegment, Label, Segment
from .features import Featurizer
from .model import predict
from .wavio import read_wav

MAX_SNR_DB = 100.0


def power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def fit_length(noise, n, rng=None):
    """Tile or crop ``noise`` to ``n`` samples, starting at a random offset when rng is given."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise ValueError("empty noise source")
    reps = -(-(n + noise.size) // noise.size)
    tiled = np.tile(noise, reps)
    start = int(rng.integers(noise.size)) if rng is not None else 0
    return tiled[start:start + n]


def snr_scale(signal_power, noise_power, snr_db):
    """Gain on the noise so that 10*log10(P_signal / P_scaled_noise) == snr_db."""
    snr_db = min(float(snr_db), MAX_SNR_DB)
    return float(np.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def mix_noise_at_snr(seg, noise=None, snr_db=0.0, seed=0):
    """Add noise to a segment at the requested SNR (capped at 100 dB).

    ``noise=None`` draws seeded white Gaussian noise; otherwise the given
    vector is tiled/cropped to the segment length from a seeded offset.
    """
    x = np.asarray(seg.samples if isinstance(seg, Segment) else seg, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if noise is None:
        n = rng.standard_normal(x.size)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        n = noise if noise.size == x.size else fit_length(noise, x.size, rng)
    p_noise = power(n)
    if p_noise <= 0.0:
        raise ValueError("noise has zero power")
    p_signal = power(x)
    if p_signal <= 0.0:
        raise DegenerateSegment("signal has zero power; SNR is undefined")
    y = x + snr_scale(p_signal, p_noise, snr_db) * n
    return replace(seg, samples=y) if isinstance(seg, Segment) else y


def measured_snr_db(clean, mixed):
    clean = np.asarray(clean, dtype=np.float64)
    return 10.0 * np.log10(power(clean) / power(np.asarray(mixed) - clean))


def load_noise_bank(path):
    """4 kHz mono PCM16 WAVs from a directory (or a single file)."""
    files = [path] if os.path.isfile(path) else sorted(glob.glob(os.path.join(path, "*.wav")))
    if not files:
        raise ValueError(f"no WAV files in noise bank {path!r}")
    return [read_wav(f).samples for f in files]


@dataclass
class RobustnessRow:
    kind: str
    snr_db: float
    n_healthy: int
    n_ild: int
    acc_healthy: float
    acc_ild: float
    acc_overall: float


def noise_robustness(params, manifest, cfg, kind="gaussian", snr_grid=(-5.0, 0.0, 5.0, 10.0),
                     bank=None, seed=0, batch_size=64):
    """Per-SNR, per-class segment accuracy with noise added to the raw segments."""
    if kind == "heart" and not bank:
        raise ValueError("heart-sound noise needs a non-empty noise bank")
    feat = Featurizer(cfg)
    raw = []
    for e in manifest:
        rec = read_wav(manifest.resolve(e), e.recording_id, e.subject_id, e.label)
        raw += feat.segments(rec)
    rows = []
    for si, snr in enumerate(snr_grid):
        images, labels = [], []
        for j, seg in enumerate(raw):
            mix_seed = [seed, si, j]
            source = None
            if kind == "heart":
                source = bank[int(np.random.default_rng(mix_seed).integers(len(bank)))]
            try:
                noisy = mix_noise_at_snr(seg, source, snr, seed=mix_seed)
                images.append(feat.segment_image(noisy))
            except DegenerateSegment:
                continue
            labels.append(int(seg.label))
        labels = np.asarray(labels)
        probs, _, _ = predict(params, np.asarray(images, dtype=params.dtype), batch_size)
        correct = np.argmax(probs, axis=1) == labels
        h, i = labels == int(Label.HEALTHY), labels == int(Label.ILD)
        rows.append(RobustnessRow(
            kind, float(snr), int(h.sum()), int(i.sum()),
            float(correct[h].mean()) if h.any() else float("nan"),
            float(correct[i].mean()) if i.any() else float("nan"),
            float(correct.mean()) if correct.size else float("nan"),
        ))
    return rows


def write_robustness_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "snr_db", "n_healthy", "n_ild", "acc_healthy", "acc_ild", "acc_overall"])
        for r in rows:
            w.writerow([r.kind, r.snr_db, r.n_healthy, r.n_ild,
                        f"{r.acc_healthy:.4f}", f"{r.acc_ild:.4f}", f"{r.acc_overall:.4f}"])


def format_robustness_table(rows):
    lines = [f"{'kind':<9}{'SNR dB':>8}{'Healthy':>10}{'ILD':>10}{'overall':>10}"]
    for r in rows:
        lines.append(f"{r.kind:<9}{r.snr_db:>8.1f}{100 * r.acc_healthy:>9.2f}%"
                     f"{100 * r.acc_ild:>9.2f}%{100 * r.acc_overall:>9.2f}%")
    return "\n".join(lines)
