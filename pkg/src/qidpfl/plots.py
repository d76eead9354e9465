"""Static SVG line charts from per-round CSV files.

Series are averaged over seeds, one line per strategy. Non-finite values are
left out of a series.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import CSVSchemaError

BASE_COLUMNS = (
    "round", "strategy", "seed", "accuracy", "loss", "reward", "rho_total",
    "server_cost_accuracy_term", "server_cost_reward_term", "server_cost_total",
)
CHARTS = (
    ("accuracy", "accuracy", "Test accuracy"),
    ("server_cost", "server_cost_total", "Cumulative server cost"),
    ("reward", "reward", "Reward per round"),
)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 70, "right": 150, "top": 30, "bottom": 45}


def read_metrics(path: str | Path) -> list[dict]:
    """Rows of one metrics CSV, after checking the header and numeric columns."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CSVSchemaError(f"{path}: empty file")
        if tuple(header[:len(BASE_COLUMNS)]) != BASE_COLUMNS:
            raise CSVSchemaError(f"{path}: unexpected header {header[:len(BASE_COLUMNS)]}")
        extra = header[len(BASE_COLUMNS):]
        expected = [f"client_{c}_{k}" for c in range(len(extra) // 2) for k in ("rho", "utility")]
        if extra != expected:
            raise CSVSchemaError(f"{path}: client columns out of order")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise CSVSchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(raw)}")
            row = dict(zip(header, raw))
            try:
                parsed = {
                    "round": int(row["round"]),
                    "strategy": row["strategy"],
                    "seed": int(row["seed"]),
                }
                for col in BASE_COLUMNS[3:]:
                    parsed[col] = float(row[col]) if row[col] != "" else math.nan
            except ValueError as exc:
                raise CSVSchemaError(f"{path}:{lineno}: {exc}") from None
            rows.append(parsed)
    if not rows:
        raise CSVSchemaError(f"{path}: no data rows")
    return rows


def _mean_series(rows: list[dict], column: str) -> dict[str, list[tuple[int, float]]]:
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if math.isfinite(r[column]):
            acc[r["strategy"]][r["round"]].append(r[column])
    return {s: sorted((t, math.fsum(v) / len(v)) for t, v in by_t.items()) for s, by_t in acc.items()}


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def line_chart(series: dict[str, list[tuple[float, float]]], title: str, ylabel: str) -> str:
    """One standalone SVG document with a polyline and legend entry per series."""
    points = [p for pts in series.values() for p in pts]
    xs = [p[0] for p in points] or [0.0, 1.0]
    ys = [p[1] for p in points] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        pad = abs(y0) * 0.05 or 1.0
        y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x: float) -> float:
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y: float) -> float:
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>',
    ]
    for tx in _ticks(x0, x1):
        out.append(f'<text x="{sx(tx):.1f}" y="{MARGIN["top"] + ph + 16}" text-anchor="middle">{tx:g}</text>')
    for ty in _ticks(y0, y1):
        out.append(f'<line x1="{MARGIN["left"]}" x2="{MARGIN["left"] + pw}" y1="{sy(ty):.1f}" y2="{sy(ty):.1f}" '
                   'stroke="#ddd"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(ty) + 4:.1f}" text-anchor="end">{ty:.4g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{HEIGHT - 8}" text-anchor="middle">round</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, pts) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline class="series" data-strategy="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.8" points="{coords}"/>')
        ly = MARGIN["top"] + 14 + 18 * k
        lx = MARGIN["left"] + pw + 12
        out.append(f'<g class="legend"><line x1="{lx}" x2="{lx + 18}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{lx + 24}" y="{ly}">{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(csv_paths, out_dir: str | Path) -> list[Path]:
    """Write accuracy, server-cost, and reward charts; returns their paths."""
    paths = list(csv_paths)
    if not paths:
        raise CSVSchemaError("no CSV files given")
    rows = [r for p in paths for r in read_metrics(p)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, column, title in CHARTS:
        series = _mean_series(rows, column)
        target = out_dir / f"{name}.svg"
        target.write_text(line_chart(series, title, column), encoding="utf-8")
        written.append(target)
    return written
