"""Recording -> subject -> label index (CSV: path,recording_id,subject_id,label,source)."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

from .dsp import Label

HEADER = ["path", "recording_id", "subject_id", "label", "source"]
SOURCES = ("BRACETS", "KAUH", "SYNTH")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    recording_id: str
    subject_id: str
    label: Label
    source: str = "SYNTH"


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    base_dir: str = "."

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.recording_id in seen:
                raise ManifestError(f"duplicate recording_id {e.recording_id!r}")
            seen.add(e.recording_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry):
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.base_dir, entry.path)

    def subjects(self):
        """subject_id -> label, in first-seen order."""
        out = {}
        for e in self.entries:
            if out.setdefault(e.subject_id, e.label) != e.label:
                raise ManifestError(f"subject {e.subject_id!r} carries both labels")
        return out

    def select(self, recording_ids):
        keep = set(recording_ids)
        return Manifest([e for e in self.entries if e.recording_id in keep], self.base_dir)

    def select_subjects(self, subject_ids):
        keep = set(subject_ids)
        return Manifest([e for e in self.entries if e.subject_id in keep], self.base_dir)

    def recording_ids(self):
        return [e.recording_id for e in self.entries]


def load_manifest(path, strict=False):
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != HEADER:
            raise ManifestError(f"{path}: header must be {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
            try:
                label = Label.parse(row["label"])
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            source = row["source"].upper() or "SYNTH"
            if source not in SOURCES:
                raise ManifestError(f"{path}:{lineno}: unknown source {row['source']!r}")
            if not row["recording_id"] or not row["subject_id"]:
                raise ManifestError(f"{path}:{lineno}: empty recording_id or subject_id")
            entries.append(ManifestEntry(row["path"], row["recording_id"], row["subject_id"], label, source))
    manifest = Manifest(entries, base)
    manifest.subjects()
    if strict:
        missing = [e.path for e in manifest if not os.path.exists(manifest.resolve(e))]
        if missing:
            raise ManifestError(f"{len(missing)} missing audio files, first: {missing[0]}")
    return manifest


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for e in manifest:
            w.writerow([e.path, e.recording_id, e.subject_id, e.label.display, e.source])
