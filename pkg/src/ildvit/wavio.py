"""Minimal RIFF/WAVE reader and writer for mono 16-bit PCM at 4 kHz."""

from __future__ import annotations

import os
import struct

import numpy as np

from .dsp import SAMPLE_RATE_HZ, RawRecording

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
# KSDATAFORMAT_SUBTYPE_PCM
_PCM_SUBFORMAT = bytes.fromhex("0100000000001000800000aa00389b71")


class WavError(ValueError):
    pass


def read_pcm16(path):
    """Parse a WAV file; returns (int16 samples, sample_rate_hz).

    Accepts plain PCM and WAVE_FORMAT_EXTENSIBLE with a PCM subformat; the
    file must be mono 16-bit.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    name = os.fspath(path)
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{name}: not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = data[pos:pos + 4], struct.unpack_from("<I", data, pos + 4)[0]
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise WavError(f"{name}: missing or short fmt chunk")
    if payload is None:
        raise WavError(f"{name}: missing data chunk")
    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 40 and fmt[24:40] == _PCM_SUBFORMAT:
        tag = WAVE_FORMAT_PCM
    if tag != WAVE_FORMAT_PCM:
        raise WavError(f"{name}: format tag 0x{tag:04x} is not integer PCM")
    if channels != 1:
        raise WavError(f"{name}: {channels} channels, only mono is supported")
    if bits != 16:
        raise WavError(f"{name}: {bits}-bit samples, only 16-bit PCM is supported")
    usable = len(payload) - len(payload) % 2
    return np.frombuffer(payload[:usable], dtype="<i2").astype(np.int16), rate


def read_wav(path, recording_id=None, subject_id="", label=None):
    pcm, rate = read_pcm16(path)
    if rate != SAMPLE_RATE_HZ:
        raise WavError(f"{os.fspath(path)}: sample rate {rate} Hz, expected {SAMPLE_RATE_HZ} Hz")
    if pcm.size == 0:
        raise WavError(f"{os.fspath(path)}: no samples")
    if recording_id is None:
        recording_id = os.path.splitext(os.path.basename(path))[0]
    return RawRecording(pcm.astype(np.float64) / 32768.0, rate, recording_id, subject_id, label)


def to_pcm16(samples):
    """Float samples in [-1, 1) -> int16 (x * 32768, rounded and clipped)."""
    x = np.asarray(samples)
    if x.dtype == np.int16:
        return x
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)


def wav_bytes(samples, sample_rate_hz=SAMPLE_RATE_HZ):
    pcm = to_pcm16(samples).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", WAVE_FORMAT_PCM, 1, sample_rate_hz, sample_rate_hz * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    if len(pcm) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples, sample_rate_hz=SAMPLE_RATE_HZ):
    data = wav_bytes(samples, sample_rate_hz)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)
