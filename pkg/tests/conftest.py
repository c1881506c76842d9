import json
from pathlib import Path

import numpy as np
import pytest

from facerec.detect import load_default_cascade
from facerec.imaging import GrayImage, Rect, read_image

FIXTURES = Path(__file__).parent / "fixtures"
FACES = FIXTURES / "faces"
SYNTHETIC = FIXTURES / "synthetic"


def gaussian_blob(size: int, sigma: float, cx=None, cy=None, amp=0.8, base=0.1) -> GrayImage:
    cx = (size - 1) / 2 if cx is None else cx
    cy = (size - 1) / 2 if cy is None else cy
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    return GrayImage(base + amp * g)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cascade():
    return load_default_cascade()


@pytest.fixture(scope="session")
def face_annotations():
    notes = json.loads((FACES / "annotations.json").read_text())
    return {name: Rect(*box) for name, box in notes.items()}


@pytest.fixture(scope="session")
def face_images(face_annotations):
    return {name: read_image(FACES / name) for name in sorted(face_annotations)}


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {status}  {detail}")
