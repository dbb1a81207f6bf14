"""SVG line plots of rate-versus-threshold curves (DET sweeps, PR curves).

Only the standard library is used; the output is a self-contained SVG
document with axes, tick labels, a legend and one ``<polyline>`` per series.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from collections.abc import Mapping, Sequence

import numpy as np

from .errors import DataError
from .scoring import DetCurve

__all__ = ["curve_series", "emit_plot"]

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 150, "top": 30, "bottom": 50}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")


def curve_series(curves) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Normalize plot input to ``{series name: (threshold, rate)}``.

    Accepts a :class:`DetCurve` (FAR and FRR series), a sequence or mapping
    of DetCurves (series prefixed by group), a PR curve (list of points with
    ``threshold``, ``precision``, ``recall``) or a ready mapping of series.
    """
    if isinstance(curves, DetCurve):
        prefix = f"{curves.group} " if curves.group is not None else ""
        return {f"{prefix}FAR": (curves.thresholds, curves.far), f"{prefix}FRR": (curves.thresholds, curves.frr)}
    if isinstance(curves, Mapping):
        out = {}
        for name, item in curves.items():
            if isinstance(item, DetCurve):
                out[f"{name} FAR"] = (item.thresholds, item.far)
                out[f"{name} FRR"] = (item.thresholds, item.frr)
            else:
                x, y = item
                out[str(name)] = (x, y)
        return out
    if isinstance(curves, Sequence) and curves and hasattr(curves[0], "precision"):
        t = np.array([p.threshold for p in curves])
        return {
            "precision": (t, np.array([p.precision for p in curves])),
            "recall": (t, np.array([p.recall for p in curves])),
        }
    if isinstance(curves, Sequence) and curves and all(isinstance(c, DetCurve) for c in curves):
        out = {}
        for i, c in enumerate(curves):
            out.update(curve_series({c.group if c.group is not None else f"curve{i}": c}))
        return out
    raise DataError("empty curve: nothing to plot")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_plot(curves, title: str = "", x_label: str = "threshold", y_label: str = "rate") -> str:
    """SVG document with one polyline per series, threshold on x and rate on y.

    The y axis spans [0, 1] and grows upward; the x axis spans the data range.
    """
    series = curve_series(curves)
    if not series:
        raise DataError("empty curve: nothing to plot")
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if x.size == 0 or x.shape != y.shape:
            raise DataError(f"empty curve: series {name!r} has no points")
        clean[name] = (x, y)
    xs = np.concatenate([x for x, _ in clean.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    ys = np.concatenate([y for _, y in clean.values()])
    y0, y1 = min(0.0, float(ys.min())), max(1.0, float(ys.max()))

    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    svg = ET.Element(
        "svg",
        xmlns="http://www.w3.org/2000/svg",
        width=str(WIDTH),
        height=str(HEIGHT),
        viewBox=f"0 0 {WIDTH} {HEIGHT}",
    )
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    if title:
        ET.SubElement(svg, "text", x=str(WIDTH / 2), y="18", attrib={"text-anchor": "middle"}).text = title
    axes = ET.SubElement(svg, "g", id="axes", stroke="black", attrib={"stroke-width": "1"})
    ET.SubElement(axes, "line", x1=_fmt(left), y1=_fmt(top + ph), x2=_fmt(left + pw), y2=_fmt(top + ph))
    ET.SubElement(axes, "line", x1=_fmt(left), y1=_fmt(top), x2=_fmt(left), y2=_fmt(top + ph))
    labels = ET.SubElement(svg, "g", id="ticks", attrib={"font-size": "11", "font-family": "sans-serif"})
    for v in np.linspace(x0, x1, 5):
        ET.SubElement(axes, "line", x1=_fmt(px(v)), y1=_fmt(top + ph), x2=_fmt(px(v)), y2=_fmt(top + ph + 4))
        ET.SubElement(labels, "text", x=_fmt(px(v)), y=_fmt(top + ph + 16), attrib={"text-anchor": "middle"}).text = f"{v:.3g}"
    for v in np.linspace(y0, y1, 6):
        ET.SubElement(axes, "line", x1=_fmt(left - 4), y1=_fmt(py(v)), x2=_fmt(left), y2=_fmt(py(v)))
        ET.SubElement(labels, "text", x=_fmt(left - 6), y=_fmt(py(v) + 4), attrib={"text-anchor": "end"}).text = f"{v:.2g}"
    ET.SubElement(labels, "text", x=_fmt(left + pw / 2), y=_fmt(HEIGHT - 10), attrib={"text-anchor": "middle"}).text = x_label
    ET.SubElement(
        labels, "text", x="14", y=_fmt(top + ph / 2), transform=f"rotate(-90 14 {_fmt(top + ph / 2)})", attrib={"text-anchor": "middle"}
    ).text = y_label

    plot = ET.SubElement(svg, "g", id="series", fill="none", attrib={"stroke-width": "1.5"})
    legend = ET.SubElement(svg, "g", id="legend", attrib={"font-size": "11", "font-family": "sans-serif"})
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = COLORS[i % len(COLORS)]
        points = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        line = ET.SubElement(plot, "polyline", points=points, stroke=color)
        line.set("data-series", name)
        ly = top + 12 + 16 * i
        ET.SubElement(legend, "line", x1=_fmt(left + pw + 10), y1=_fmt(ly), x2=_fmt(left + pw + 30), y2=_fmt(ly), stroke=color)
        ET.SubElement(legend, "text", x=_fmt(left + pw + 34), y=_fmt(ly + 4)).text = name
    return ET.tostring(svg, encoding="unicode", xml_declaration=False) + "\n"
