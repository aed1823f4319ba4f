"""STFT, mel filterbank and the 64x64x3 jet-colored spectrogram image.

Image convention: rows are mel bands with the lowest band at the bottom
(row 63), columns are time frames resized to the image width, channels are
RGB in [0, 1].
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .dsp import SAMPLE_RATE_HZ, Stage

WINDOW_LEN = 1024
HOP = 512
N_MELS = 64
IMAGE_SIZE = 64
DB_FLOOR = 1e-10

# Classic piecewise-linear jet: each channel is clip(1.5 - |4x - c|, 0, 1)
# with c = 3 (red), 2 (green), 1 (blue). Breakpoints sit at
# x = 1/8, 3/8, 5/8, 7/8; jet(0) = (0, 0, 0.5), jet(1) = (0.5, 0, 0).
JET_CENTERS = (3.0, 2.0, 1.0)
JET_LUT_SIZE = 256


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # complex, (n_frames, window_len // 2 + 1)
    window_len: int = WINDOW_LEN
    hop: int = HOP
    sample_rate_hz: int = SAMPLE_RATE_HZ

    @property
    def n_frames(self):
        return self.values.shape[0]

    def bin_frequencies(self):
        return np.arange(self.values.shape[1]) * self.sample_rate_hz / self.window_len


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    center_hz: np.ndarray
    edges_hz: np.ndarray


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_frames, n_mels), non-negative


@dataclass(frozen=True)
class MelTfrImage:
    pixels: np.ndarray  # (64, 64, 3) in [0, 1]
    recording_id: str = ""
    index: int = 0


def hann_window(n):
    if n < 2:
        raise ValueError("hann window needs n >= 2")
    i = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / (n - 1)))


def stft(seg, window_len=WINDOW_LEN, hop=HOP, sample_rate_hz=SAMPLE_RATE_HZ):
    if seg.stage is not Stage.NORMALIZED:
        raise ValueError(f"stft expects a normalized segment, got stage {seg.stage.value}")
    x = np.asarray(seg.samples, dtype=np.float64)
    if x.size < window_len:
        raise ValueError(f"segment of {x.size} samples is shorter than the {window_len}-sample window")
    n_frames = 1 + (x.size - window_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window_len)[::hop][:n_frames]
    values = np.fft.rfft(frames * hann_window(window_len), axis=1)
    return Spectrogram(values, window_len, hop, sample_rate_hz)


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(m) if m.ndim == 0 else m


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(f) if f.ndim == 0 else f


def build_mel_filterbank(n_mels=N_MELS, n_fft=WINDOW_LEN, sample_rate_hz=SAMPLE_RATE_HZ,
                         f_min=0.0, f_max=None):
    """Triangular filters on mel-spaced edges, each row scaled to peak at 1.

    Triangles are sampled at FFT bin frequencies, so a sampled peak usually
    falls short of 1; rows are rescaled by their own maximum.
    """
    nyquist = sample_rate_hz / 2
    if f_max is None:
        f_max = nyquist
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0 <= f_min < f_max <= nyquist:
        raise ValueError(f"need 0 <= f_min < f_max <= Nyquist ({nyquist} Hz), got {f_min}, {f_max}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    edges[0], edges[-1] = f_min, f_max
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rise, fall))
    peaks = weights.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise ValueError(f"{empty.size} mel filters cover no FFT bin; reduce n_mels or raise n_fft")
    weights /= peaks[:, None]
    return MelFilterbank(weights, edges[1:-1].copy(), edges)


@functools.lru_cache(maxsize=8)
def _default_filterbank(n_mels, n_fft, sample_rate_hz):
    return build_mel_filterbank(n_mels, n_fft, sample_rate_hz)


def mel_spectrogram(spec, fb):
    mag = np.abs(spec.values)
    if mag.shape[1] != fb.weights.shape[1]:
        raise ValueError(f"spectrogram has {mag.shape[1]} bins, filterbank expects {fb.weights.shape[1]}")
    return MelSpectrogram(mag @ fb.weights.T)


def jet(x):
    """Evaluate the jet formula at scalars ``x`` in [0, 1]; returns (..., 3)."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    return np.clip(1.5 - np.abs(4.0 * x - np.asarray(JET_CENTERS)), 0.0, 1.0)


def jet_lut_from_formula(size=JET_LUT_SIZE):
    return np.round(jet(np.linspace(0.0, 1.0, size)), 6)


@functools.lru_cache(maxsize=1)
def jet_lut():
    """The committed 256x3 jet table (``data/jet_lut.csv``)."""
    with resources.files("ildvit").joinpath("data/jet_lut.csv").open("r", encoding="utf-8") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row and not row[0].startswith("#")]
    lut = np.array(rows)
    lut.setflags(write=False)
    return lut


def write_jet_lut(path, size=JET_LUT_SIZE):
    lut = jet_lut_from_formula(size)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# jet colormap, channel = clip(1.5 - |4x - c|, 0, 1), c = 3/2/1 for R/G/B, x = i/255\n")
        for r, g, b in lut:
            fh.write(f"{r:.6f},{g:.6f},{b:.6f}\n")


def apply_lut(values, lut=None):
    """Map values in [0, 1] through the LUT with linear interpolation between entries."""
    if lut is None:
        lut = jet_lut()
    pos = np.clip(values, 0.0, 1.0) * (len(lut) - 1)
    i0 = np.minimum(np.floor(pos).astype(int), len(lut) - 2)
    frac = (pos - i0)[..., None]
    return lut[i0] * (1.0 - frac) + lut[i0 + 1] * frac


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of an (H, W, C) array using half-pixel centers."""
    in_h, in_w = img.shape[:2]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, fr = axis_weights(in_h, out_h)
    c0, c1, fc = axis_weights(in_w, out_w)
    fr = fr[:, None, None]
    fc = fc[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def tfr_to_image(mel, size=IMAGE_SIZE, recording_id="", index=0):
    values = np.asarray(mel.values if isinstance(mel, MelSpectrogram) else mel, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty mel spectrogram")
    db = 20.0 * np.log10(values + DB_FLOOR)
    lo, hi = db.min(), db.max()
    norm = np.full_like(db, 0.5) if hi == lo else (db - lo) / (hi - lo)
    rgb = apply_lut(norm)                     # (frames, mels, 3)
    rgb = np.transpose(rgb, (1, 0, 2))[::-1]  # (mels, frames, 3), low band at the bottom
    pixels = np.clip(resize_bilinear(rgb, size, size), 0.0, 1.0)
    return MelTfrImage(pixels, recording_id, index)


def segment_to_image(seg, window_len=WINDOW_LEN, hop=HOP, n_mels=N_MELS):
    """Normalized segment -> jet mel image (the full TFR stage)."""
    fb = _default_filterbank(n_mels, window_len, SAMPLE_RATE_HZ)
    spec = stft(seg, window_len, hop)
    return tfr_to_image(mel_spectrogram(spec, fb), recording_id=seg.recording_id, index=seg.index)
