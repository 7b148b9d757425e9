"""Figure data: curve CSVs with per-seed and aggregate rows, and SVG plots."""

from __future__ import annotations

import csv
import math
import statistics
import xml.etree.ElementTree as ET
from collections import defaultdict
from pathlib import Path

CURVE_COLUMNS = (
    "mode",
    "N",
    "seed",
    "test_error",
    "metric_name",
    "metric_value",
    "row_type",
    "test_error_std",
    "metric_std",
    "n_seeds",
    "source",
)

CURVE_KINDS = ("vs_n", "vs_test_error")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _std(values: list[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def aggregate(cells: list[dict]) -> list[dict]:
    """One row per (mode, N, metric): means and sample standard deviations over seeds.

    Cells whose metric is missing (no eligible inputs) are left out of the
    aggregate; ``n_seeds`` counts the cells that contributed.
    """
    groups = defaultdict(list)
    for c in cells:
        groups[(c["mode"], c["N"], c["metric_name"])].append(c)
    out = []
    for (mode, n, name), rows in groups.items():
        usable = [r for r in rows if r["metric_value"] is not None and r["test_error"] is not None]
        if not usable:
            continue
        errors = [float(r["test_error"]) for r in usable]
        values = [float(r["metric_value"]) for r in usable]
        out.append(
            {
                "mode": mode,
                "N": n,
                "seed": "",
                "test_error": math.fsum(errors) / len(errors),
                "metric_name": name,
                "metric_value": math.fsum(values) / len(values),
                "row_type": "aggregate",
                "test_error_std": _std(errors),
                "metric_std": _std(values),
                "n_seeds": len(usable),
                "source": "",
            }
        )
    return out


def emit_curves(metrics: list[dict], kind: str, path, svg: bool = True, title: str | None = None) -> list[dict]:
    """Write a curve CSV (and optionally an SVG next to it).

    ``metrics`` holds per-cell dicts with keys mode, N, seed, test_error,
    metric_name and metric_value. The CSV lists the per-seed rows followed
    by the aggregate rows; an optional ``source`` key (the cell's summary
    file) is carried through to the per-seed rows. ``kind`` picks the plotted x axis: ``vs_n`` or
    ``vs_test_error``.
    """
    if kind not in CURVE_KINDS:
        raise ValueError(f"unknown curve kind {kind!r}; choose one of {CURVE_KINDS}")
    cells = sorted(
        ({"source": "", **m, "row_type": "cell", "test_error_std": None, "metric_std": None, "n_seeds": 1} for m in metrics),
        key=lambda r: (str(r["mode"]), r["metric_name"], r["N"], r["seed"]),
    )
    agg = sorted(aggregate(cells), key=lambda r: (str(r["mode"]), r["metric_name"], r["N"]))
    rows = cells + agg
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in CURVE_COLUMNS])
    if svg:
        write_svg(agg, kind, path.with_suffix(".svg"), title or path.stem)
    return rows


def read_curves(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# SVG -------------------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22")


def write_svg(aggregates: list[dict], kind: str, path, title: str = "") -> None:
    """Line plot of the aggregate means with a shaded band of one standard deviation."""
    width, height, margin = 640, 420, 60
    series = defaultdict(list)
    for r in aggregates:
        x = float(r["N"]) if kind == "vs_n" else float(r["test_error"])
        series[(r["mode"], r["metric_name"])].append((x, float(r["metric_value"]), float(r["metric_std"])))
    points = [p for s in series.values() for p in s]
    xs = [p[0] for p in points] or [0.0, 1.0]
    ys = [v for p in points for v in (p[1] - p[2], p[1] + p[2])] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height), viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width), height=str(height), fill="white")
    ET.SubElement(svg, "text", x=str(width // 2), y="24", attrib={"text-anchor": "middle", "font-size": "15"}).text = title
    ET.SubElement(svg, "line", x1=str(margin), y1=str(height - margin), x2=str(width - margin), y2=str(height - margin), stroke="black")
    ET.SubElement(svg, "line", x1=str(margin), y1=str(margin), x2=str(margin), y2=str(height - margin), stroke="black")
    xlabel = "training-set size N" if kind == "vs_n" else "test error"
    ET.SubElement(svg, "text", x=str(width // 2), y=str(height - 18), attrib={"text-anchor": "middle", "font-size": "12"}).text = xlabel
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        ET.SubElement(svg, "text", x=f"{sx(xv):.1f}", y=str(height - margin + 16), attrib={"text-anchor": "middle", "font-size": "10"}).text = f"{xv:.3g}"
        ET.SubElement(svg, "text", x=str(margin - 6), y=f"{sy(yv) + 3:.1f}", attrib={"text-anchor": "end", "font-size": "10"}).text = f"{yv:.2f}"
    for k, ((mode, name), pts) in enumerate(sorted(series.items())):
        color = _PALETTE[k % len(_PALETTE)]
        pts.sort()
        upper = [f"{sx(x):.2f},{sy(y + s):.2f}" for x, y, s in pts]
        lower = [f"{sx(x):.2f},{sy(y - s):.2f}" for x, y, s in reversed(pts)]
        ET.SubElement(svg, "polygon", points=" ".join(upper + lower), fill=color, attrib={"fill-opacity": "0.2"})
        ET.SubElement(svg, "polyline", points=" ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y, _ in pts), fill="none", stroke=color, attrib={"stroke-width": "2"})
        for x, y, _ in pts:
            ET.SubElement(svg, "circle", cx=f"{sx(x):.2f}", cy=f"{sy(y):.2f}", r="3", fill=color)
        ET.SubElement(svg, "text", x=str(width - margin + 4 - 120), y=str(margin + 14 * k), fill=color, attrib={"font-size": "11"}).text = f"{mode}: {name}"
    Path(path).write_bytes(ET.tostring(svg, encoding="utf-8", xml_declaration=True))
