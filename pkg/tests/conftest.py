import sys

import pytest
from hypothesis import strategies as st

from pseudolabel_kit.geometry import Box


class StubRng:
    """Replays a fixed list of uniforms; fails loudly if over-consumed."""

    def __init__(self, values):
        self.values = list(values)
        self.calls = 0

    def random(self):
        if self.calls >= len(self.values):
            raise AssertionError("stub rng exhausted")
        v = self.values[self.calls]
        self.calls += 1
        return v


@pytest.fixture
def stub_rng():
    return StubRng


coord = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False, allow_infinity=False)
extent = st.floats(min_value=0, max_value=1e3, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, min_extent=0.0):
    x, y = draw(coord), draw(coord)
    w = draw(extent.filter(lambda v: v >= min_extent))
    h = draw(extent.filter(lambda v: v >= min_extent))
    return Box(x, y, x + w, y + h)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.VERDICTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
