import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_sv.detector import precision_recall_curve
from adaptive_sv.errors import DataError
from adaptive_sv.plotting import curve_series, emit_plot
from adaptive_sv.scoring import DetCurve, ScoreSet, det_sweep

NS = "{http://www.w3.org/2000/svg}"


def polylines(svg):
    root = ET.fromstring(svg)
    return root, root.findall(f".//{NS}polyline")


def points(line):
    return np.array([[float(v) for v in p.split(",")] for p in line.get("points").split()])


class TestEmitPlot:
    def test_two_point_curve(self):
        curve = DetCurve(np.array([0.1, 0.2]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        root, lines = polylines(emit_plot(curve))
        assert root.tag == f"{NS}svg"
        assert len(lines) == 2
        assert [ln.get("data-series") for ln in lines] == ["FAR", "FRR"]
        assert all(len(points(ln)) == 2 for ln in lines)

    def test_one_polyline_per_series(self):
        a = det_sweep(ScoreSet([0.5, 0.9], [0.1, 0.6], group="A"))
        b = det_sweep(ScoreSet([0.4, 0.8], [0.2], group="B"))
        _, lines = polylines(emit_plot({"A": a, "B": b}))
        assert sorted(ln.get("data-series") for ln in lines) == ["A FAR", "A FRR", "B FAR", "B FRR"]
        _, lines = polylines(emit_plot([a, b]))
        assert len(lines) == 4

    def test_axes_and_labels(self):
        svg = emit_plot({"s": ([0.0, 1.0], [0.2, 0.4])}, title="t", x_label="threshold", y_label="rate")
        root = ET.fromstring(svg)
        texts = [t.text for t in root.iter(f"{NS}text")]
        assert "threshold" in texts and "rate" in texts and "t" in texts
        assert root.find(f".//{NS}g[@id='axes']") is not None

    def test_constant_x(self):
        _, lines = polylines(emit_plot({"s": ([0.5, 0.5], [0.0, 1.0])}))
        assert np.all(np.isfinite(points(lines[0])))

    def test_pr_curve(self):
        pts = precision_recall_curve([0.9, 0.7, 0.4, 0.2], [1, 0, 1, 0])
        _, lines = polylines(emit_plot(pts))
        assert [ln.get("data-series") for ln in lines] == ["precision", "recall"]

    @pytest.mark.parametrize("bad", [[], {}, {"s": ([], [])}])
    def test_empty(self, bad):
        with pytest.raises(DataError, match="empty curve"):
            emit_plot(bad)

    def test_deterministic(self):
        curve = det_sweep(ScoreSet([0.5, 0.9], [0.1, 0.6]))
        assert emit_plot(curve) == emit_plot(curve)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=40), st.lists(st.floats(-1, 1), min_size=1, max_size=40))
    def test_axis_transform_monotone(self, target, nontarget):
        curve = det_sweep(ScoreSet(target, nontarget))
        _, lines = polylines(emit_plot(curve))
        far, frr = (points(ln) for ln in lines)
        for p in (far, frr):
            assert np.all(np.diff(p[:, 0]) >= 0)
        # FRR grows with threshold and SVG y points down, so pixel y never increases
        assert np.all(np.diff(frr[:, 1]) <= 1e-9)
        assert np.all(np.diff(far[:, 1]) >= -1e-9)

    def test_series_normalization(self):
        curve = DetCurve(np.array([0.1, 0.2]), np.array([1.0, 0.0]), np.array([0.0, 1.0]), group="g")
        assert list(curve_series(curve)) == ["g FAR", "g FRR"]
