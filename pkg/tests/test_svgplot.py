"""SVG chart rendering: well-formedness, element counts, determinism."""

import xml.etree.ElementTree as ET

import pytest

from extremecast import svgplot as sp

SVG = "{http://www.w3.org/2000/svg}"


def test_nice_ticks_cover_range_with_round_steps():
    ticks = sp.nice_ticks(0.0, 1.0)
    assert ticks[0] == 0.0
    assert ticks[-1] == 1.0
    steps = {round(b - a, 12) for a, b in zip(ticks, ticks[1:])}
    assert len(steps) == 1
    ticks = sp.nice_ticks(-3.0, 7.0)
    assert 0.0 in ticks
    assert min(ticks) >= -3.0 and max(ticks) <= 7.0


def test_bar_chart_parses_and_counts_bars():
    svg = sp.bar_chart(
        ["a", "b", "c"],
        [{"name": "event", "values": [1.0, -0.5, 2.0],
          "errors": [0.1, 0.2, 0.0]},
         {"name": "reference", "values": [0.5, 0.5, 0.5]}],
        title="channels", ylabel="attr")
    root = ET.fromstring(svg)
    rects = root.findall(f"{SVG}rect")
    # background + 6 bars + 2 legend swatches
    assert len(rects) == 1 + 6 + 2
    texts = [t.text for t in root.iter(f"{SVG}text")]
    for label in ("channels", "attr", "a", "b", "c", "event",
                  "reference"):
        assert label in texts


def test_bar_chart_whiskers_only_for_positive_errors():
    svg = sp.bar_chart(["g"], [{"name": "s", "values": [1.0],
                                "errors": [0.25]}])
    root = ET.fromstring(svg)
    dark = [e for e in root.findall(f"{SVG}line")
            if e.get("stroke") == "#222"]
    assert len(dark) == 3  # stem plus two caps
    svg0 = sp.bar_chart(["g"], [{"name": "s", "values": [1.0],
                                 "errors": [0.0]}])
    root0 = ET.fromstring(svg0)
    assert not [e for e in root0.findall(f"{SVG}line")
                if e.get("stroke") == "#222"]


def test_bar_chart_escapes_markup_in_labels():
    svg = sp.bar_chart(["a<b&c"], [{"name": "x>y", "values": [1.0]}],
                       title="t&t")
    ET.fromstring(svg)
    assert "a<b&c" not in svg
    assert "a&lt;b&amp;c" in svg


def test_bar_chart_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        sp.bar_chart(["a", "b"], [{"name": "s", "values": [1.0]}])
    with pytest.raises(ValueError):
        sp.bar_chart([], [])


def test_line_chart_polylines_and_axes():
    svg = sp.line_chart(
        [{"name": "u", "y": [0.0, 1.0, 0.5]},
         {"name": "v", "y": [1.0, 1.0, 1.0], "x": [0, 5, 10]}],
        xlabel="step", ylabel="value")
    root = ET.fromstring(svg)
    lines = root.findall(f"{SVG}polyline")
    assert len(lines) == 2
    assert len(lines[0].get("points").split()) == 3
    texts = [t.text for t in root.iter(f"{SVG}text")]
    assert "step" in texts and "value" in texts


def test_line_chart_rejects_empty_series():
    with pytest.raises(ValueError):
        sp.line_chart([])
    with pytest.raises(ValueError):
        sp.line_chart([{"name": "u", "y": []}])


def test_identical_inputs_render_identical_bytes():
    args = (["a", "b"], [{"name": "s", "values": [0.3, -0.7],
                          "errors": [0.05, 0.1]}])
    assert sp.bar_chart(*args) == sp.bar_chart(*args)
    series = [{"name": "u", "y": [0.1, 0.9, 0.4]}]
    assert sp.line_chart(series) == sp.line_chart(series)


def test_larger_value_sits_higher_on_canvas():
    svg = sp.bar_chart(["a", "b"],
                       [{"name": "s", "values": [1.0, 3.0]}])
    root = ET.fromstring(svg)
    bars = root.findall(f"{SVG}rect")[1:3]
    y_small, y_big = (float(b.get("y")) for b in bars)
    assert y_big < y_small  # SVG y axis points down
