import numpy as np
import pytest

from flowtrack.bench import load_suite_detector
from flowtrack.boxes import Box
from flowtrack.config import Config
from flowtrack.detect_head import Detection


@pytest.fixture(scope="session")
def default_detector():
    """The packaged trained detector (shared; it is read-only during tracking)."""
    return load_suite_detector(Config())


class ScriptedDetector:
    """Returns a fixed list of (x, y, w, h[, embedding]) boxes for each call, in order."""

    def __init__(self, script, dim=4):
        self.script = list(script)
        self.calls = 0
        self.dim = dim

    def detect(self, frame):
        items = self.script[self.calls] if self.calls < len(self.script) else []
        self.calls += 1
        out = []
        for i, item in enumerate(items):
            emb = np.asarray(item[4], np.float64) if len(item) > 4 else np.eye(self.dim)[0]
            out.append(Detection(Box(*item[:4]), 0.9, 0, i, embedding=emb / np.linalg.norm(emb)))
        return out


@pytest.fixture
def scripted():
    return ScriptedDetector


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
