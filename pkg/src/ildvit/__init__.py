"""ILD detection from respiratory sounds with mel-spectrogram images and a small vision transformer."""

__version__ = "0.1.0"

from .dsp import (DegenerateSegment, Label, RawRecording, Segment, apply_filter, design_butterworth_hpf,
                  segment_recording, zscore_normalize)
from .metrics import ConfusionMatrix, compute_metrics, roc_auc
from .model import ModelConfig, count_parameters, init_params, model_forward, patchify
from .tfr import build_mel_filterbank, hann_window, hz_to_mel, mel_spectrogram, mel_to_hz, stft, tfr_to_image

__all__ = [
    "ConfusionMatrix", "DegenerateSegment", "Label", "ModelConfig", "RawRecording", "Segment",
    "apply_filter", "build_mel_filterbank", "compute_metrics", "count_parameters", "design_butterworth_hpf",
    "hann_window", "hz_to_mel", "init_params", "mel_spectrogram", "mel_to_hz", "model_forward", "patchify",
    "roc_auc", "segment_recording", "stft", "tfr_to_image", "zscore_normalize",
]
