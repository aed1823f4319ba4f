"""Framing, Butterworth high-pass filtering and z-score normalization."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)

SAMPLE_RATE_HZ = 4000


class Label(enum.IntEnum):
    HEALTHY = 0
    ILD = 1

    @classmethod
    def parse(cls, token):
        if isinstance(token, Label):
            return token
        key = str(token).strip().upper()
        if key == "HEALTHY":
            return cls.HEALTHY
        if key == "ILD":
            return cls.ILD
        raise ValueError(f"unknown label {token!r} (expected 'Healthy' or 'ILD')")

    @property
    def display(self):
        return "Healthy" if self is Label.HEALTHY else "ILD"


class Stage(enum.Enum):
    RAW = "raw"
    FILTERED = "filtered"
    NORMALIZED = "normalized"


class DegenerateSegment(ValueError):
    """Raised when a segment has (numerically) zero variance."""


@dataclass(frozen=True)
class RawRecording:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ
    recording_id: str = ""
    subject_id: str = ""
    label: Label | None = None

    def __post_init__(self):
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise ValueError(
                f"recording {self.recording_id!r}: sample rate {self.sample_rate_hz} Hz, "
                f"pipeline requires {SAMPLE_RATE_HZ} Hz (resampling is not supported)"
            )
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError(f"recording {self.recording_id!r}: samples must be a non-empty 1-D array")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_sec(self):
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Segment:
    samples: np.ndarray
    recording_id: str = ""
    index: int = 0
    stage: Stage = Stage.RAW
    label: Label | None = None
    subject_id: str = ""

    @property
    def origin(self):
        return (self.recording_id, self.index)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections, each row ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    order: int
    cutoff_hz: float
    sample_rate_hz: int
    btype: str = field(default="highpass")

    @property
    def sections(self):
        return [(tuple(row[:3]), tuple(row[3:])) for row in self.sos]

    def poles(self):
        return np.concatenate([np.roots(row[3:]) for row in self.sos])

    def frequency_response(self, freqs_hz):
        """Complex response H(e^{jw}) at the given frequencies."""
        z = np.exp(1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate_hz)
        h = np.ones_like(z)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 + b1 / z + b2 / z**2) / (a0 + a1 / z + a2 / z**2)
        return h


def segment_recording(rec, window_sec=5.0, overlap=0.5):
    """Cut ``rec`` into overlapping frames; frames that would overrun the end are dropped."""
    win = window_sec * rec.sample_rate_hz
    if abs(win - round(win)) > 1e-9 or round(win) <= 0:
        raise ValueError(f"window of {window_sec} s is not a whole number of samples")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    win = int(round(win))
    hop = win * (1.0 - overlap)
    if abs(hop - round(hop)) > 1e-9 or round(hop) <= 0:
        raise ValueError(f"hop {hop} (window {win}, overlap {overlap}) is not a positive integer")
    hop = int(round(hop))

    n = rec.samples.size
    if n < win:
        logger.warning("recording %r has %d samples, shorter than one %d-sample window; no segments",
                       rec.recording_id, n, win)
        return []
    count = (n - win) // hop + 1
    return [
        Segment(
            samples=rec.samples[k * hop:k * hop + win].copy(),
            recording_id=rec.recording_id,
            index=k,
            stage=Stage.RAW,
            label=rec.label,
            subject_id=rec.subject_id,
        )
        for k in range(count)
    ]


def design_butterworth_hpf(order=4, cutoff_hz=10.0, sample_rate_hz=SAMPLE_RATE_HZ):
    """Digital Butterworth high-pass as a biquad cascade.

    Analog prototype poles are mapped to a high-pass at the prewarped cutoff
    and then through the bilinear transform, one conjugate pair per section.
    """
    if order < 2 or order % 2:
        raise ValueError(f"order must be even and >= 2, got {order}")
    nyquist = sample_rate_hz / 2
    if not 0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff {cutoff_hz} Hz must lie strictly between 0 and Nyquist ({nyquist} Hz)")

    fs2 = 2.0 * sample_rate_hz
    wc = fs2 * math.tan(math.pi * cutoff_hz / sample_rate_hz)
    sections = []
    for k in range(order // 2):
        # left-half-plane prototype pole of the normalized low-pass
        theta = math.pi * (2 * k + 1 + order) / (2 * order)
        p = complex(math.cos(theta), math.sin(theta))
        # LP->HP: s -> wc/s puts the pole at wc/p and both zeros at s=0
        pa = wc / p
        pz = (fs2 + pa) / (fs2 - pa)
        a1 = -2.0 * pz.real
        a2 = abs(pz) ** 2
        # zeros at z=1; normalize for unity gain at Nyquist (z=-1)
        gain = (1 - a1 + a2) / 4.0
        sections.append([gain, -2.0 * gain, gain, 1.0, a1, a2])
    cascade = BiquadCascade(np.array(sections), order, float(cutoff_hz), int(sample_rate_hz))
    if not np.all(np.abs(cascade.poles()) < 1.0):
        raise ArithmeticError("designed filter is unstable")
    return cascade


def butterworth_hpf_magnitude(freqs_hz, order, cutoff_hz, sample_rate_hz):
    """Analytic magnitude of the bilinear-transformed Butterworth high-pass."""
    f = np.asarray(freqs_hz, dtype=float)
    warped = np.tan(np.pi * f / sample_rate_hz)
    wc = math.tan(math.pi * cutoff_hz / sample_rate_hz)
    with np.errstate(divide="ignore"):
        ratio = np.where(warped > 0, wc / np.where(warped > 0, warped, 1.0), np.inf)
    return 1.0 / np.sqrt(1.0 + ratio ** (2 * order))


def apply_filter(cascade, seg):
    if seg.stage is not Stage.RAW:
        raise ValueError(f"apply_filter expects a raw segment, got stage {seg.stage.value}")
    # sosfilt runs each section in transposed direct form II from zero state
    y = signal.sosfilt(cascade.sos, seg.samples)
    return replace(seg, samples=y, stage=Stage.FILTERED)


def zscore_normalize(seg, min_std=1e-12):
    if seg.stage is not Stage.FILTERED:
        raise ValueError(f"zscore_normalize expects a filtered segment, got stage {seg.stage.value}")
    x = seg.samples
    mu = x.mean()
    sigma = x.std()
    if sigma < min_std:
        raise DegenerateSegment(f"segment {seg.origin} is flat (std={sigma:.3g})")
    return replace(seg, samples=(x - mu) / sigma, stage=Stage.NORMALIZED)


def preprocess_recording(rec, window_sec=5.0, overlap=0.5, cascade=None, skip_degenerate=True):
    """Segment, filter and normalize a whole recording.

    Flat segments are skipped with a warning unless ``skip_degenerate`` is
    false, in which case :class:`DegenerateSegment` propagates.
    """
    if cascade is None:
        cascade = design_butterworth_hpf()
    out = []
    for seg in segment_recording(rec, window_sec, overlap):
        try:
            out.append(zscore_normalize(apply_filter(cascade, seg)))
        except DegenerateSegment:
            if not skip_degenerate:
                raise
            logger.warning("skipping flat segment %s", seg.origin)
    return out
