from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parent.parent


def write_idx_images(path: Path, images: np.ndarray, gz: bool = False) -> Path:
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", 0x803, n, rows, cols) + images.astype(np.uint8).tobytes()
    opener = gzip.open if gz else open
    with opener(path, "wb") as fh:
        fh.write(payload)
    return path


def write_idx_labels(path: Path, labels: np.ndarray, gz: bool = False) -> Path:
    payload = struct.pack(">II", 0x801, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    opener = gzip.open if gz else open
    with opener(path, "wb") as fh:
        fh.write(payload)
    return path


@pytest.fixture
def idx_fixture(tmp_path):
    images = np.array([[[0, 255], [128, 64]], [[255, 255], [0, 0]],
                       [[1, 2], [3, 4]], [[10, 20], [30, 40]]], dtype=np.uint8)
    labels = np.array([0, 1, 2, 1], dtype=np.uint8)
    img = write_idx_images(tmp_path / "images.idx", images)
    lab = write_idx_labels(tmp_path / "labels.idx", labels)
    return img, lab, images, labels


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
