"""Dependency-free SVG charts: line chart, bar chart, heatmap.

Every plotted element carries ``data-*`` attributes with its raw values so a
chart can be re-parsed and checked against the CSV written next to it.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SVG_NS = "http://www.w3.org/2000/svg"

# viridis anchors; relative luminance rises monotonically from 0 to 1
_SCALE = np.array([
    [0.267, 0.005, 0.329],
    [0.231, 0.322, 0.545],
    [0.129, 0.565, 0.553],
    [0.369, 0.788, 0.384],
    [0.993, 0.906, 0.144],
])
_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
            "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"]


def color_for(value: float) -> str:
    """Hex colour of ``value`` in [0, 1] on the sequential scale (clipped)."""
    v = min(max(float(value), 0.0), 1.0) * (len(_SCALE) - 1)
    k = min(int(v), len(_SCALE) - 2)
    rgb = _SCALE[k] + (v - k) * (_SCALE[k + 1] - _SCALE[k])
    return "#" + "".join(f"{int(round(c * 255)):02x}" for c in rgb)


def relative_luminance(hex_color: str) -> float:
    r, g, b = (int(hex_color[i:i + 2], 16) / 255 for i in (1, 3, 5))
    return 0.2126 * r + 0.7152 * g + 0.0722 * b


@dataclass(frozen=True)
class _Frame:
    width: float = 720
    height: float = 420
    left: float = 70
    right: float = 150
    top: float = 40
    bottom: float = 55

    @property
    def plot_w(self) -> float:
        return self.width - self.left - self.right

    @property
    def plot_h(self) -> float:
        return self.height - self.top - self.bottom


def _nice_ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step - 1e-9) * step
    return [round(first + k * step, 12) for k in range(int((hi - first) / step + 1e-9) + 1)]


def _num(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


class _Canvas:
    def __init__(self, frame: _Frame, title: str):
        self.f = frame
        self.root = ET.Element("svg", xmlns=SVG_NS, width=_num(frame.width), height=_num(frame.height),
                               viewBox=f"0 0 {_num(frame.width)} {_num(frame.height)}")
        ET.SubElement(self.root, "rect", x="0", y="0", width=_num(frame.width), height=_num(frame.height),
                      fill="white")
        self.text(frame.width / 2, 22, title, size=15, anchor="middle")

    def el(self, tag: str, parent=None, **attrs) -> ET.Element:
        clean = {k.rstrip("_").replace("_", "-"): (v if isinstance(v, str) else _num(v)) for k, v in attrs.items()}
        return ET.SubElement(self.root if parent is None else parent, tag, clean)

    def text(self, x, y, s, size=11, anchor="start", rotate=None, parent=None):
        t = self.el("text", parent, x=x, y=y, font_size=size, text_anchor=anchor, font_family="sans-serif")
        if rotate is not None:
            t.set("transform", f"rotate({rotate} {_num(x)} {_num(y)})")
        t.text = s
        return t

    def axes(self, xlim, ylim, xlabel, ylabel, xticks=True):
        f = self.f
        sx = lambda v: f.left + (v - xlim[0]) / (xlim[1] - xlim[0] or 1) * f.plot_w
        sy = lambda v: f.top + f.plot_h - (v - ylim[0]) / (ylim[1] - ylim[0] or 1) * f.plot_h
        g = self.el("g", stroke="black", stroke_width=1)
        self.el("line", g, x1=f.left, y1=f.top + f.plot_h, x2=f.left + f.plot_w, y2=f.top + f.plot_h)
        self.el("line", g, x1=f.left, y1=f.top, x2=f.left, y2=f.top + f.plot_h)
        if xticks:
            for v in _nice_ticks(*xlim):
                self.el("line", g, x1=sx(v), y1=f.top + f.plot_h, x2=sx(v), y2=f.top + f.plot_h + 4)
                self.text(sx(v), f.top + f.plot_h + 17, _num(v), anchor="middle")
        for v in _nice_ticks(*ylim):
            self.el("line", g, x1=f.left - 4, y1=sy(v), x2=f.left, y2=sy(v))
            self.text(f.left - 7, sy(v) + 4, _num(v), anchor="end")
        self.text(f.left + f.plot_w / 2, f.height - 12, xlabel, anchor="middle")
        self.text(18, f.top + f.plot_h / 2, ylabel, anchor="middle", rotate=-90)
        return sx, sy

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        ET.indent(self.root)
        ET.ElementTree(self.root).write(path, encoding="utf-8", xml_declaration=True)
        return path


def line_chart(x: Sequence[float], series: Mapping[str, Sequence[float]], path: str | Path, *,
               title: str = "", xlabel: str = "", ylabel: str = "", max_points: int = 4000) -> Path:
    """Polyline per series sharing one x axis.

    Long series are thinned to about ``max_points`` vertices, always keeping
    each chunk's minimum and maximum so dips survive the thinning.
    """
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    if not len(x) or not ys:
        raise ValueError("line chart needs data")
    keep = _thin(x, ys, max_points)
    lo = min(float(np.nanmin(v)) for v in ys.values())
    hi = max(float(np.nanmax(v)) for v in ys.values())
    pad = 0.05 * (hi - lo or 1.0)
    c = _Canvas(_Frame(), title)
    sx, sy = c.axes((float(x[0]), float(x[-1])), (lo - pad, hi + pad), xlabel, ylabel)
    for k, (name, v) in enumerate(ys.items()):
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{sx(x[i]):.2f},{sy(v[i]):.2f}" for i in keep)
        c.el("polyline", points=pts, fill="none", stroke=color, stroke_width=1.2,
             data_series=name, data_min=repr(float(np.nanmin(v))), data_max=repr(float(np.nanmax(v))))
        ly = c.f.top + 14 * k + 6
        c.el("line", x1=c.f.width - c.f.right + 12, y1=ly, x2=c.f.width - c.f.right + 30, y2=ly,
             stroke=color, stroke_width=2)
        c.text(c.f.width - c.f.right + 35, ly + 4, name, size=10)
    return c.write(path)


def _thin(x: np.ndarray, ys: Mapping[str, np.ndarray], max_points: int) -> list[int]:
    n = len(x)
    if n <= max_points:
        return list(range(n))
    chunk = max(1, math.ceil(2 * n / max_points))
    keep = {0, n - 1}
    for a in range(0, n, chunk):
        b = min(n, a + chunk)
        keep.add(a)
        for v in ys.values():
            seg = v[a:b]
            keep.add(a + int(np.nanargmin(seg)))
            keep.add(a + int(np.nanargmax(seg)))
    return sorted(keep)


def bar_chart(labels: Sequence[str], groups: Mapping[str, Sequence[float]], path: str | Path, *,
              errors: Mapping[str, Sequence[float]] | None = None, title: str = "", ylabel: str = "",
              ylim: tuple[float, float] = (0.0, 1.0)) -> Path:
    """Grouped bars, one group per label and one bar colour per key of ``groups``."""
    if not labels or not groups:
        raise ValueError("bar chart needs data")
    c = _Canvas(_Frame(), title)
    _, sy = c.axes((0.0, float(len(labels))), ylim, "", ylabel, xticks=False)
    f = c.f
    slot = f.plot_w / len(labels)
    width = 0.8 * slot / len(groups)
    for k, (name, vals) in enumerate(groups.items()):
        color = _PALETTE[k % len(_PALETTE)]
        errs = (errors or {}).get(name)
        for i, v in enumerate(vals):
            x0 = f.left + i * slot + 0.1 * slot + k * width
            top = sy(min(max(v, ylim[0]), ylim[1]))
            c.el("rect", x=x0, y=top, width=width, height=sy(ylim[0]) - top, fill=color,
                 data_label=labels[i], data_group=name, data_value=repr(float(v)))
            if errs is not None:
                xm = x0 + width / 2
                c.el("line", x1=xm, y1=sy(min(v + errs[i], ylim[1])), x2=xm, y2=sy(max(v - errs[i], ylim[0])),
                     stroke="black", stroke_width=1)
        ly = f.top + 14 * k + 6
        c.el("rect", x=f.width - f.right + 12, y=ly - 5, width=10, height=10, fill=color)
        c.text(f.width - f.right + 27, ly + 4, name, size=10)
    for i, lab in enumerate(labels):
        c.text(f.left + (i + 0.5) * slot, f.top + f.plot_h + 17, lab, size=10, anchor="middle")
    return c.write(path)


def heatmap(cells: Sequence[Mapping], path: str | Path, *, cell_w: float, cell_h: float,
            xlim: tuple[float, float], ylim: tuple[float, float], title: str = "", xlabel: str = "",
            ylabel: str = "") -> Path:
    """Rectangles coloured by ``mu`` in [0, 1]; cells with ``mu`` None are drawn hatched grey.

    Each cell mapping needs ``x``, ``y`` (centre) and ``mu``.
    """
    c = _Canvas(_Frame(), title)
    pad_x, pad_y = cell_w / 2, cell_h / 2
    xl = (xlim[0] - pad_x, xlim[1] + pad_x) if xlim[1] > xlim[0] else (xlim[0] - pad_x, xlim[0] + pad_x)
    yl = (ylim[0] - pad_y, ylim[1] + pad_y) if ylim[1] > ylim[0] else (ylim[0] - pad_y, ylim[0] + pad_y)
    sx, sy = c.axes(xl, yl, xlabel, ylabel)
    g = c.el("g")
    for cell in cells:
        x0, x1 = sx(cell["x"] - cell_w / 2), sx(cell["x"] + cell_w / 2)
        y0, y1 = sy(cell["y"] + cell_h / 2), sy(cell["y"] - cell_h / 2)
        mu = cell.get("mu")
        c.el("rect", g, x=x0, y=y0, width=max(x1 - x0, 0.1), height=max(y1 - y0, 0.1),
             fill="#d9d9d9" if mu is None else color_for(mu), fill_opacity=0.9 if mu is None else 1,
             data_x=repr(float(cell["x"])), data_y=repr(float(cell["y"])),
             data_mu="insufficient" if mu is None else repr(float(mu)))
    # colour bar
    f = c.f
    bx, steps = f.width - f.right + 25, 50
    for k in range(steps):
        y = f.top + f.plot_h * (1 - (k + 1) / steps)
        c.el("rect", x=bx, y=y, width=18, height=f.plot_h / steps + 0.5, fill=color_for((k + 0.5) / steps))
    c.text(bx + 24, f.top + 8, "1", size=10)
    c.text(bx + 24, f.top + f.plot_h, "0", size=10)
    c.text(bx + 9, f.top - 8, "mu", size=10, anchor="middle")
    return c.write(path)
