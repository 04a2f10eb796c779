import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sceneiqa.imaging import Patch  # noqa: E402
from sceneiqa.training import Sample, make_labels  # noqa: E402


def make_samples(n_scenes=4, n_devices=5, patches_per_image=2, size=16, aspect="texture",
                 seed=0, signal=True):
    """In-memory samples whose patch contrast shrinks with the device rank."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_scenes):
        for d in range(n_devices):
            rank = d + 1
            iid = f"s{s}/d{d}"
            amp = (n_devices - d) / n_devices if signal else 1.0
            for k in range(patches_per_image):
                pix = (amp * rng.standard_normal((size, size))).astype(np.float32)
                out.append(Sample(Patch(pix, iid, 0, 160 * k), make_labels(rank, n_devices),
                                  s % 4, f"s{s}", aspect, rank))
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
