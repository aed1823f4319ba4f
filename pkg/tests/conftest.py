import numpy as np
import pytest

from ildvit.dsp import Label, RawRecording, Segment, Stage
from ildvit.model import ModelConfig

# small enough for exhaustive finite differences, same topology as the default
TINY = ModelConfig(image_size=16, patch_size=8, proj_len=8, n_blocks=2, n_heads=2, head_dim=4,
                   mlp_dims=(12, 8), dropout=0.3)


def make_segment(samples, stage=Stage.RAW, label=Label.HEALTHY, rid="r", index=0):
    return Segment(samples=np.asarray(samples, dtype=np.float64), recording_id=rid, index=index,
                   stage=stage, label=label, subject_id="s")


def tone(freq_hz, n=20000, fs=4000, amp=1.0):
    return amp * np.sin(2 * np.pi * freq_hz * np.arange(n) / fs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def recording(rng):
    def make(n, label=Label.ILD):
        return RawRecording(rng.standard_normal(n), recording_id="rec", subject_id="subj", label=label)
    return make


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """Three subjects per class, one recording each."""
    from ildvit.synth import generate_synthetic_dataset

    out = tmp_path_factory.mktemp("synth_small")
    generate_synthetic_dataset(out, n_subjects_per_class=3, recordings_per_subject=1, seed=5)
    return out


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    if report.failed:
        _CRITERIA[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _CRITERIA.setdefault(n, "PASS")
    elif report.skipped:
        _CRITERIA.setdefault(n, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {_CRITERIA[n]}")
