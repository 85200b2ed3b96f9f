import hashlib
from pathlib import Path

import numpy as np
import pytest

from conftest import CRUDE, STUDIES
from ipdsurv.forest import ForestPanel, render_forest
from ipdsurv.meta import MetaInput, pool, se_from_ci

GOLDEN = Path(__file__).parent / "data" / "forest_golden.svg"


def crude_panel():
    values = np.log([r[0] for r in CRUDE])
    se = np.array([se_from_ci(lo, hi, "log") for _, lo, hi in CRUDE])
    inp = MetaInput(values, se, STUDIES, "log")
    return ForestPanel("Crude HR", inp, pool(inp))


def rd_panel():
    inp = MetaInput([0.10, 0.25, -0.05], [0.05, 0.08, 0.1], ("A & co", "B", "C"))
    return ForestPanel("Risk difference at 36", inp, pool(inp, re=False))


def test_golden_svg():
    svg, _ = render_forest([crude_panel(), rd_panel()], title="Fixture")
    assert svg == GOLDEN.read_text(encoding="utf-8")


def test_rendering_is_deterministic():
    a = render_forest([crude_panel(), rd_panel()])
    b = render_forest([crude_panel(), rd_panel()])
    assert hashlib.sha256(a[0].encode()).digest() == hashlib.sha256(b[0].encode()).digest()
    assert a[1] == b[1]


def test_reference_line_and_elements():
    svg, text = render_forest([crude_panel()])
    # one square per study, a diamond, a dotted prediction bar and a tick at 1
    assert svg.count("<rect") == 1 + len(STUDIES)
    assert svg.count("<polygon") == 1
    assert 'stroke-dasharray="2,2"' in svg
    assert '>1</text>' in svg
    assert "&amp;" not in svg
    assert "Pooled (RE)" in text and "0.39" in text


def test_identity_scale_escapes_labels_and_marks_fixed_effect():
    svg, text = render_forest([rd_panel()])
    assert "A &amp; co" in svg and "Pooled (FE)" in svg
    assert "Pooled (FE)" in text and "-0.05" in text


def test_single_study_annotation():
    inp = MetaInput([np.log(0.5)], [0.3], ("Only",), "log")
    svg, text = render_forest([ForestPanel("One", inp)])
    assert "<polygon" not in svg
    assert "single study: no pooled estimate" in svg and "single study" in text
    with pytest.raises(ValueError):
        render_forest([])
