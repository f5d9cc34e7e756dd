import re

import numpy as np
import pytest

from mmtl.heatmap import HIGH, LOW, render_svg


def _cells(svg):
    return re.findall(r'<rect x="\d+" y="\d+" width="\d+" height="\d+" fill="(#[0-9a-f]{6})"><title>([^<]*)</title>',
                      svg)


def test_one_cell_per_entry_and_max_is_darkest():
    m = np.arange(12, dtype=float).reshape(3, 4)
    svg = render_svg(m, title="t")
    cells = _cells(svg)
    assert len(cells) == 12
    assert cells[-1][0] == "#%02x%02x%02x" % HIGH and cells[0][0] == "#%02x%02x%02x" % LOW
    assert "min 0" in svg and "max 11" in svg


def test_single_cell_grid():
    svg = render_svg(np.array([[0.5]]))
    assert len(_cells(svg)) == 1 and "min 0.5" in svg and "max 0.5" in svg


def test_labels_are_escaped_and_checked():
    svg = render_svg(np.ones((1, 2)), ["a<b"], ["x", "y"])
    assert "a&lt;b" in svg
    with pytest.raises(ValueError):
        render_svg(np.ones((2, 2)), ["a"], ["x", "y"])
    with pytest.raises(ValueError):
        render_svg(np.array([[np.nan]]))
