"""Static SVG figures drawn from analysis tables.

Each figure is a pure function of its input rows: positions come only from
the numbers in the table, and the table itself is embedded in the SVG
``<metadata>`` element as CSV so a figure can be audited without the
pipeline that produced it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .synthgen import PALETTE

KINDS = {
    "polar_profile": ("center", "median", "n"),
    "binned_box": ("label", "n", "q1", "median", "q3"),
    "hexbin": ("cx", "cy", "count"),
    "group_bars": ("group", "n", "mean", "median", "p75"),
    "cluster_pie": ("label", "cluster", "value"),
    "loss_curves": ("epoch", "train_loss", "val_loss"),
}

_SERIES = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class ReportError(ValueError):
    pass


@dataclass
class FigureSpec:
    kind: str
    title: str = ""
    width: int = 480
    height: int = 360
    labels: dict[str, str] = field(default_factory=dict)
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ReportError(f"unknown figure kind {self.kind!r}; expected one of {sorted(KINDS)}")

    def filename(self, tag: str = "") -> str:
        return f"{self.kind}_{tag}.svg" if tag else f"{self.kind}.svg"


def _num(v) -> str:
    if isinstance(v, float):
        if not math.isfinite(v):
            return "nan"
        return f"{v:.3f}".rstrip("0").rstrip(".") if v != 0 else "0"
    return str(v)


def _table_csv(rows: Sequence[Mapping]) -> str:
    cols = list(rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()


class _Svg:
    def __init__(self, spec: FigureSpec, rows: Sequence[Mapping]):
        self.spec = spec
        self.parts: list[str] = []
        self.rows = rows

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, size=11, anchor="middle", **attrs) -> None:
        extra = "".join(f' {k.replace("_", "-")}="{v}"' for k, v in attrs.items())
        self.add(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>')

    def finish(self) -> str:
        w, h = self.spec.width, self.spec.height
        head = [
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" '
            f'viewBox="0 0 {w} {h}" font-family="sans-serif">',
            f'<metadata id="data" data-kind="{self.spec.kind}"><![CDATA[\n{_table_csv(self.rows)}]]></metadata>',
            f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        ]
        if self.spec.title:
            head.append(f'<text x="{w / 2:.2f}" y="18" font-size="14" text-anchor="middle">{escape(self.spec.title)}</text>')
        return "\n".join(head + self.parts + ["</svg>", ""])


def _check(spec: FigureSpec, rows: Sequence[Mapping]) -> None:
    if not rows:
        raise ReportError(f"no data for {spec.kind} figure")
    need = KINDS[spec.kind]
    missing = [c for c in need if any(c not in r for r in rows)]
    if missing:
        raise ReportError(f"{spec.kind} figure needs columns {missing}, missing from input")


class _Axes:
    """Linear data -> pixel mapping for a plot rectangle."""

    def __init__(self, spec: FigureSpec, xlim, ylim, margin=(55, 20, 30, 45)):
        left, right, top, bottom = margin
        self.x0, self.x1 = left, spec.width - right
        self.y0, self.y1 = spec.height - bottom, top + (10 if spec.title else 0)
        self.xlim, self.ylim = xlim, ylim

    def x(self, v: float) -> float:
        a, b = self.xlim
        return self.x0 + (v - a) / (b - a) * (self.x1 - self.x0) if b != a else (self.x0 + self.x1) / 2

    def y(self, v: float) -> float:
        a, b = self.ylim
        return self.y0 + (v - a) / (b - a) * (self.y1 - self.y0) if b != a else (self.y0 + self.y1) / 2

    def frame(self, svg: _Svg, xlabel="", ylabel="", yticks=5) -> None:
        svg.add(f'<rect x="{self.x0:.2f}" y="{self.y1:.2f}" width="{self.x1 - self.x0:.2f}" '
                f'height="{self.y0 - self.y1:.2f}" fill="none" stroke="#333"/>')
        a, b = self.ylim
        for i in range(yticks + 1):
            v = a + (b - a) * i / yticks
            yy = self.y(v)
            svg.add(f'<line x1="{self.x0 - 4:.2f}" y1="{yy:.2f}" x2="{self.x0:.2f}" y2="{yy:.2f}" stroke="#333"/>')
            svg.text(self.x0 - 6, yy + 4, _num(float(v)), size=9, anchor="end")
        if xlabel:
            svg.text((self.x0 + self.x1) / 2, svg.spec.height - 8, xlabel)
        if ylabel:
            cx, cy = 14, (self.y0 + self.y1) / 2
            svg.text(cx, cy, ylabel, transform=f"rotate(-90 {cx:.2f} {cy:.2f})")


def _limits(values, pad=0.05, zero=False):
    lo, hi = min(values), max(values)
    if zero:
        lo = min(lo, 0.0)
    if hi == lo:
        hi = lo + 1.0
    span = hi - lo
    return (lo if zero else lo - pad * span, hi + pad * span)


def _polar(spec, rows, svg, events):
    rows = [r for r in rows if r["n"] and r["median"] is not None]
    if not rows:
        raise ReportError("polar profile has no populated bins")
    cx, cy = spec.width / 2, spec.height / 2 + 8
    R = min(spec.width, spec.height) / 2 - 40
    rmax = max(r["median"] for r in rows) or 1.0
    for frac in (0.25, 0.5, 0.75, 1.0):
        svg.add(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{R * frac:.2f}" fill="none" stroke="#ccc"/>')
        svg.text(cx + 3, cy - R * frac - 2, _num(rmax * frac), size=8, anchor="start")
    for deg in range(0, 360, 45):
        a = math.radians(deg)
        svg.add(f'<line x1="{cx:.2f}" y1="{cy:.2f}" x2="{cx + R * math.cos(a):.2f}" y2="{cy - R * math.sin(a):.2f}" stroke="#eee"/>')
        svg.text(cx + (R + 14) * math.cos(a), cy - (R + 14) * math.sin(a) + 4, f"{deg}°", size=9)
    pts = []
    for r in rows:
        a = math.radians(r["center"])
        rad = R * r["median"] / rmax
        pts.append((cx + rad * math.cos(a), cy - rad * math.sin(a)))
    path = " ".join(f"{'M' if i == 0 else 'L'}{x:.2f},{y:.2f}" for i, (x, y) in enumerate(pts)) + " Z"
    svg.add(f'<path d="{path}" fill="#1f77b4" fill-opacity="0.25" stroke="#1f77b4"/>')
    for (x, y) in pts:
        svg.add(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="#1f77b4" class="radius"/>')
    best = min(range(len(rows)), key=lambda i: (rows[i]["median"], rows[i]["center"]))
    bx, by = pts[best]
    svg.add(f'<circle cx="{bx:.2f}" cy="{by:.2f}" r="5" fill="none" stroke="#d62728" stroke-width="2" id="minimum"/>')
    svg.text(bx, by - 8, f"min {_num(rows[best]['median'])} @ {_num(rows[best]['center'])}°", size=10, fill="#d62728")


def _box(spec, rows, svg, events):
    vals = [v for r in rows if r["n"] for v in (r["q1"], r["q3"], r["median"])]
    if not vals:
        raise ReportError("binned box figure has no populated bins")
    ax = _Axes(spec, (0, len(rows)), _limits(vals, zero=True))
    ax.frame(svg, spec.labels.get("x", ""), spec.labels.get("y", "angle error (deg)"))
    bw = 0.6
    for i, r in enumerate(rows):
        svg.text(ax.x(i + 0.5), ax.y0 + 14, r["label"], size=8)
        if not r["n"]:
            continue
        x0, x1 = ax.x(i + 0.5 - bw / 2), ax.x(i + 0.5 + bw / 2)
        svg.add(f'<rect x="{x0:.2f}" y="{ax.y(r["q3"]):.2f}" width="{x1 - x0:.2f}" '
                f'height="{ax.y(r["q1"]) - ax.y(r["q3"]):.2f}" fill="#9ecae1" stroke="#333" class="box"/>')
        svg.add(f'<line x1="{x0:.2f}" y1="{ax.y(r["median"]):.2f}" x2="{x1:.2f}" y2="{ax.y(r["median"]):.2f}" stroke="#d62728" stroke-width="2"/>')


def _hexbin(spec, rows, svg, events):
    w = float(spec.style.get("hex_width", 1.0))
    rh = float(spec.style.get("row_height", w * math.sqrt(3) / 2))
    xs = [r["cx"] for r in rows]
    ys = [r["cy"] for r in rows]
    ax = _Axes(spec, (min(xs) - w, max(xs) + w), (min(ys) - rh, max(ys) + rh))
    ax.frame(svg, spec.labels.get("x", "length (px)"), spec.labels.get("y", "angle error (deg)"))
    cmax = max(r["count"] for r in rows)
    side = rh * 2 / 3  # centre-to-vertex in data-y units
    for r in rows:
        shade = 0.15 + 0.85 * r["count"] / cmax
        pts = []
        for k in range(6):
            a = math.radians(90 + 60 * k)
            pts.append((ax.x(r["cx"] + w / math.sqrt(3) * math.cos(a)), ax.y(r["cy"] + side * math.sin(a))))
        poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        svg.add(f'<polygon points="{poly}" fill="#08519c" fill-opacity="{shade:.3f}" stroke="white" stroke-width="0.5" class="hex"/>')


def _bars(spec, rows, svg, events):
    vals = [r[c] for r in rows for c in ("mean", "median", "p75")]
    ax = _Axes(spec, (0, len(rows)), _limits(vals, zero=True))
    ax.frame(svg, spec.labels.get("x", ""), spec.labels.get("y", "angle error (deg)"))
    stats = ("mean", "median", "p75")
    bw = 0.8 / len(stats)
    for i, r in enumerate(rows):
        svg.text(ax.x(i + 0.5), ax.y0 + 14, r["group"], size=8)
        for j, s in enumerate(stats):
            x0 = ax.x(i + 0.1 + j * bw)
            x1 = ax.x(i + 0.1 + (j + 1) * bw)
            svg.add(f'<rect x="{x0:.2f}" y="{ax.y(r[s]):.2f}" width="{x1 - x0:.2f}" height="{ax.y(0) - ax.y(r[s]):.2f}" '
                    f'fill="{_SERIES[j]}" class="bar-{s}"/>')
    for j, s in enumerate(stats):
        svg.text(ax.x1 - 4, ax.y1 + 12 + 12 * j, s, size=9, anchor="end", fill=_SERIES[j])


def _fill_for(label: str) -> str:
    rgb = PALETTE.get(str(label).lower())
    return "#%02x%02x%02x" % rgb if rgb else "#999999"


def _pie(spec, rows, svg, events):
    total = sum(float(r["value"]) for r in rows)
    if total <= 0:
        raise ReportError("cluster pie needs positive values")
    rows = sorted(rows, key=lambda r: (r["cluster"], -float(r["value"]), str(r["label"])))
    cx, cy = spec.width / 2, spec.height / 2 + 8
    R = min(spec.width, spec.height) / 2 - 50
    a0 = 0.0
    spans: dict = {}
    for r in rows:
        frac = float(r["value"]) / total
        a1 = a0 + 2 * math.pi * frac
        large = 1 if a1 - a0 > math.pi else 0
        p0 = (cx + R * math.sin(a0), cy - R * math.cos(a0))
        p1 = (cx + R * math.sin(a1), cy - R * math.cos(a1))
        fill = r.get("fill") or _fill_for(r["label"])
        svg.add(f'<path d="M{cx:.2f},{cy:.2f} L{p0[0]:.2f},{p0[1]:.2f} A{R:.2f},{R:.2f} 0 {large} 1 {p1[0]:.2f},{p1[1]:.2f} Z" '
                f'fill="{fill}" stroke="#555" stroke-width="0.5" class="wedge" data-cluster="{r["cluster"]}"/>')
        mid = (a0 + a1) / 2
        svg.text(cx + (R * 0.7) * math.sin(mid), cy - (R * 0.7) * math.cos(mid) + 3, r["label"], size=8)
        lo, _ = spans.get(r["cluster"], (a0, a1))
        spans[r["cluster"]] = (lo, a1)
        a0 = a1
    Ro = R + 10
    for i, (cid, (s0, s1)) in enumerate(sorted(spans.items())):
        large = 1 if s1 - s0 > math.pi else 0
        p0 = (cx + Ro * math.sin(s0), cy - Ro * math.cos(s0))
        p1 = (cx + Ro * math.sin(s1 - 1e-9), cy - Ro * math.cos(s1 - 1e-9))
        svg.add(f'<path d="M{p0[0]:.2f},{p0[1]:.2f} A{Ro:.2f},{Ro:.2f} 0 {large} 1 {p1[0]:.2f},{p1[1]:.2f}" fill="none" '
                f'stroke="{_SERIES[i % len(_SERIES)]}" stroke-width="6" class="cluster-arc" data-cluster="{cid}"/>')
        mid = (s0 + s1) / 2
        svg.text(cx + (Ro + 16) * math.sin(mid), cy - (Ro + 16) * math.cos(mid) + 4, f"cluster {cid}", size=9)


def _loss(spec, rows, svg, events):
    ep = [float(r["epoch"]) for r in rows]
    vals = [float(r[c]) for r in rows for c in ("train_loss", "val_loss")]
    ax = _Axes(spec, (min(ep), max(ep) if max(ep) > min(ep) else min(ep) + 1), _limits(vals))
    ax.frame(svg, spec.labels.get("x", "epoch"), spec.labels.get("y", "loss"))
    for j, col in enumerate(("train_loss", "val_loss")):
        d = " ".join(f"{'M' if i == 0 else 'L'}{ax.x(float(r['epoch'])):.2f},{ax.y(float(r[col])):.2f}" for i, r in enumerate(rows))
        svg.add(f'<path d="{d}" fill="none" stroke="{_SERIES[j]}" stroke-width="1.5" class="{col}"/>')
        svg.text(ax.x1 - 4, ax.y1 + 12 + 12 * j, col.replace("_", " "), size=9, anchor="end", fill=_SERIES[j])
    for ev in events or ():
        e = ev.epoch if hasattr(ev, "epoch") else ev["epoch"]
        x = ax.x(float(e))
        svg.add(f'<line x1="{x:.2f}" y1="{ax.y1:.2f}" x2="{x:.2f}" y2="{ax.y0:.2f}" stroke="#ff7f0e" stroke-dasharray="4,3" class="phase-event"/>')
        svg.text(x, ax.y1 + 10, f"bump @{e}", size=9, fill="#ff7f0e")


_RENDERERS = {
    "polar_profile": _polar,
    "binned_box": _box,
    "hexbin": _hexbin,
    "group_bars": _bars,
    "cluster_pie": _pie,
    "loss_curves": _loss,
}


def render(spec: FigureSpec, rows: Sequence[Mapping], events: Sequence = ()) -> str:
    """SVG document for ``rows``; ``events`` are phase markers for loss curves."""
    rows = [dict(r) for r in rows]
    _check(spec, rows)
    svg = _Svg(spec, rows)
    _RENDERERS[spec.kind](spec, rows, svg, events)
    return svg.finish()
