"""
Tests for the SVG line-plot writer
==================================

Output must parse as XML and carry the labels it was given.
"""

import xml.etree.ElementTree as ET

import pytest

from colora.plotting import Band, Series, _ticks, line_plot

SVG = "{http://www.w3.org/2000/svg}"


def test_line_plot_is_valid_svg():
    svg = line_plot([Series("a & b", [0, 1, 2], [0.1, 0.5, 0.4]), Series("c", [0, 2], [1, 0], dashed=True)],
                    "title <x>", "epoch", "accuracy",
                    bands=[Band("c", [0, 2], [0.8, -0.1], [1.1, 0.2])])
    root = ET.fromstring(svg)
    texts = [t.text for t in root.iter(SVG + "text")]
    assert "title <x>" in texts and "epoch" in texts and "accuracy" in texts and "a & b" in texts
    assert len(list(root.iter(SVG + "polyline"))) == 2
    assert len(list(root.iter(SVG + "polygon"))) == 1


def test_line_plot_skips_nonfinite_points():
    svg = line_plot([Series("s", [0, 1, 2], [0.0, float("nan"), 1.0])], "t", "x", "y")
    points = next(ET.fromstring(svg).iter(SVG + "polyline")).get("points").split()
    assert len(points) == 2


def test_line_plot_needs_series():
    with pytest.raises(ValueError):
        line_plot([], "t", "x", "y")


def test_flat_series_gets_a_range():
    ET.fromstring(line_plot([Series("s", [0, 1], [2.0, 2.0])], "t", "x", "y"))


@pytest.mark.parametrize("lo,hi", [(0, 1), (0, 20), (-3.2, 7.7), (0.001, 0.0042)])
def test_ticks_are_round_and_inside(lo, hi):
    ticks = _ticks(lo, hi)
    assert 2 <= len(ticks) <= 11
    assert all(lo - 1e-9 <= t <= hi + 1e-9 for t in ticks)
    steps = {round(b - a, 12) for a, b in zip(ticks, ticks[1:])}
    assert len(steps) == 1
