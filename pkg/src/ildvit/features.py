"""Recording -> segment images, an on-disk image cache, and the in-memory dataset."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .dsp import apply_filter, design_butterworth_hpf, segment_recording, zscore_normalize, DegenerateSegment
from .tfr import mel_spectrogram, build_mel_filterbank, stft, tfr_to_image
from .wavio import read_wav

logger = logging.getLogger(__name__)


class Featurizer:
    """Holds the filter and filterbank for one configuration."""

    def __init__(self, cfg=None):
        self.cfg = cfg or RunConfig()
        self.cascade = design_butterworth_hpf(self.cfg.filter_order, self.cfg.cutoff_hz)
        self.filterbank = build_mel_filterbank(self.cfg.n_mels, self.cfg.window_len)

    def segments(self, rec):
        return segment_recording(rec, self.cfg.window_sec, self.cfg.overlap)

    def segment_image(self, raw_seg):
        """Raw segment -> float32 image pixels (H, W, 3)."""
        seg = zscore_normalize(apply_filter(self.cascade, raw_seg))
        spec = stft(seg, self.cfg.window_len, self.cfg.hop)
        img = tfr_to_image(mel_spectrogram(spec, self.filterbank), self.cfg.image_size,
                           seg.recording_id, seg.index)
        return img.pixels.astype(np.float32)

    def recording_images(self, rec):
        """Images for every usable segment; returns (segment indices, images (n, H, W, 3))."""
        ks, imgs = [], []
        for seg in self.segments(rec):
            try:
                imgs.append(self.segment_image(seg))
            except DegenerateSegment:
                logger.warning("skipping flat segment %s", seg.origin)
                continue
            ks.append(seg.index)
        size = self.cfg.image_size
        stack = np.stack(imgs) if imgs else np.zeros((0, size, size, 3), np.float32)
        return ks, stack


def _atomic_write(path, data):
    d = os.path.dirname(path)
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureCache:
    """Float32 H x W x C images on disk, keyed by (config hash, recording_id, k).

    Layout: ``<root>/<feature_hash>/<recording_id>/<k>.f32`` plus an
    ``index.json`` per recording listing its segment indices.
    """

    def __init__(self, root, cfg):
        self.root = root
        self.cfg = cfg
        self.dir = os.path.join(root, cfg.feature_hash())

    def _rec_dir(self, recording_id):
        return os.path.join(self.dir, recording_id)

    def image_path(self, recording_id, k):
        return os.path.join(self._rec_dir(recording_id), f"{k}.f32")

    def get(self, recording_id):
        index = os.path.join(self._rec_dir(recording_id), "index.json")
        if not os.path.exists(index):
            return None
        with open(index, encoding="utf-8") as fh:
            ks = json.load(fh)["segments"]
        size = self.cfg.image_size
        imgs = np.zeros((len(ks), size, size, 3), np.float32)
        for i, k in enumerate(ks):
            raw = np.fromfile(self.image_path(recording_id, k), dtype="<f4")
            imgs[i] = raw.reshape(size, size, 3)
        return ks, imgs

    def put(self, recording_id, ks, imgs):
        for k, img in zip(ks, imgs):
            _atomic_write(self.image_path(recording_id, k), np.ascontiguousarray(img, "<f4").tobytes())
        # index last: a recording counts as cached only once every image is on disk
        _atomic_write(os.path.join(self._rec_dir(recording_id), "index.json"),
                      json.dumps({"segments": list(ks)}).encode())

    def content_hash(self):
        h = hashlib.sha256()
        for dirpath, dirnames, filenames in os.walk(self.dir):
            dirnames.sort()
            for name in sorted(filenames):
                path = os.path.join(dirpath, name)
                h.update(os.path.relpath(path, self.dir).encode())
                with open(path, "rb") as fh:
                    h.update(fh.read())
        return h.hexdigest()


@dataclass
class Dataset:
    images: np.ndarray        # (N, H, W, 3) float32
    labels: np.ndarray        # (N,) int, 1 = ILD
    recording_ids: np.ndarray
    subject_ids: np.ndarray
    segment_index: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.recording_ids[idx],
                       self.subject_ids[idx], self.segment_index[idx])

    def select_recordings(self, recording_ids):
        return self.subset(np.flatnonzero(np.isin(self.recording_ids, list(recording_ids))))

    def segment_counts(self):
        ids, counts = np.unique(self.recording_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


def build_dataset(manifest, cfg=None, cache_dir=None):
    """Featurize every recording in ``manifest`` (through the cache when given)."""
    cfg = cfg or RunConfig()
    feat = Featurizer(cfg)
    cache = FeatureCache(cache_dir, cfg) if cache_dir else None
    images, labels, recs, subjects, ks_all = [], [], [], [], []
    for e in manifest:
        hit = cache.get(e.recording_id) if cache else None
        if hit is None:
            rec = read_wav(manifest.resolve(e), e.recording_id, e.subject_id, e.label)
            hit = feat.recording_images(rec)
            if cache:
                cache.put(e.recording_id, *hit)
        ks, imgs = hit
        images.append(imgs)
        labels += [int(e.label)] * len(ks)
        recs += [e.recording_id] * len(ks)
        subjects += [e.subject_id] * len(ks)
        ks_all += list(ks)
    size = cfg.image_size
    return Dataset(
        np.concatenate(images) if images else np.zeros((0, size, size, 3), np.float32),
        np.asarray(labels, dtype=np.int64),
        np.asarray(recs, dtype=object),
        np.asarray(subjects, dtype=object),
        np.asarray(ks_all, dtype=np.int64),
    )
