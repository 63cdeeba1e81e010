"""CSV and minimal SVG writers for evaluation artifacts.

CSV files are the authoritative output: comma separated, one header row,
LF line endings, floats written with ``repr`` so reruns are byte-identical.
The SVG renderers are deliberately plain (rect grids, bars, polylines).
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .metrics import HeatmapGrid, SpectrumReport


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def heatmap_csv(path, grid: HeatmapGrid) -> None:
    rows = []
    for i, s in enumerate(grid.starts):
        for j, ln in enumerate(grid.lengths):
            v = grid.values[i, j]
            rows.append((s, ln, None if np.isnan(v) else v))
    write_csv(path, ("start", "length", "depth_db"), rows)


def spectrum_csv(path, rep: SpectrumReport) -> None:
    order = np.argsort(rep.freqs, kind="stable")
    header = ["freq"]
    for c in range(rep.true.shape[0]):
        header += [f"true_db_{c}", f"pred_db_{c}", f"residual_db_{c}"]

    def db(p):
        return 10.0 * math.log10(p) if p > 0 else -math.inf

    rows = []
    for k in order:
        row = [rep.freqs[k]]
        for c in range(rep.true.shape[0]):
            row += [db(rep.true[c, k]), db(rep.pred[c, k]), db(rep.residual[c, k])]
        rows.append(row)
    write_csv(path, header, rows)


def overlay_csv(path, z: np.ndarray, z_hat: np.ndarray, first: int, channel: int, count: int) -> None:
    n = min(count, z.shape[1])
    rows = [(first + i, z[channel, i].real, z[channel, i].imag,
             z_hat[channel, i].real, z_hat[channel, i].imag) for i in range(n)]
    write_csv(path, ("sample", "true_i", "true_q", "pred_i", "pred_q"), rows)


# --- SVG -----------------------------------------------------------------------

def _svg(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, f'<title>{escape(title)}</title>',
                      f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _color(t: float) -> str:
    # blue (low) to yellow (high)
    t = min(max(t, 0.0), 1.0)
    r, g, b = int(40 + 215 * t), int(40 + 190 * t), int(140 - 100 * t)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(path, grid: HeatmapGrid, title: str = "depth (dB) by segment") -> None:
    cell, pad = 16, 60
    rows, cols = len(grid.starts), len(grid.lengths)
    finite = grid.values[np.isfinite(grid.values)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    body = []
    for i in range(rows):
        for j in range(cols):
            v = grid.values[i, j]
            x, y = pad + j * cell, pad + i * cell
            if np.isnan(v):
                fill = "#dddddd"
            else:
                fill = _color((min(v, hi) - lo) / span)
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}">'
                        f'<title>start {grid.starts[i]} length {grid.lengths[j]}: {fmt(v)}</title></rect>')
    body.append(f'<text x="{pad}" y="{pad - 30}" font-size="12">{escape(title)} '
                f'range [{lo:.1f}, {hi:.1f}]</text>')
    body.append(f'<text x="{pad}" y="{pad - 10}" font-size="10">length</text>')
    body.append(f'<text x="4" y="{pad + 10}" font-size="10">start</text>')
    _write(path, _svg(2 * pad + cols * cell, 2 * pad + rows * cell, body, title))


def bars_svg(path, labels: Sequence[str], before: Sequence[float], after: Sequence[float],
             title: str = "PIM power before and after cancellation (dB)") -> None:
    pad, bw, gap, h = 50, 14, 12, 240
    vals = [v for v in list(before) + list(after) if math.isfinite(v)]
    lo, hi = min(vals + [0.0]), max(vals + [0.0])
    span = hi - lo or 1.0

    def y(v):
        return pad + h * (hi - v) / span

    body = [f'<text x="{pad}" y="20" font-size="12">{escape(title)}</text>',
            f'<line x1="{pad}" y1="{y(0):.2f}" x2="{pad + len(labels) * (2 * bw + gap)}" '
            f'y2="{y(0):.2f}" stroke="black"/>']
    for i, lab in enumerate(labels):
        x0 = pad + i * (2 * bw + gap)
        for k, (v, fill) in enumerate(((before[i], "#c0392b"), (after[i], "#2471a3"))):
            if not math.isfinite(v):
                continue
            top, bot = sorted((y(v), y(0)))
            body.append(f'<rect x="{x0 + k * bw}" y="{top:.2f}" width="{bw}" height="{bot - top:.2f}" '
                        f'fill="{fill}"><title>{escape(lab)}: {fmt(v)}</title></rect>')
        body.append(f'<text x="{x0}" y="{pad + h + 16}" font-size="9">{escape(lab)}</text>')
    width = 2 * pad + len(labels) * (2 * bw + gap)
    _write(path, _svg(width, h + 2 * pad, body, title))


def lines_svg(path, series: dict[str, np.ndarray], title: str = "") -> None:
    w, h, pad = 640, 240, 40
    colors = ["#c0392b", "#2471a3", "#27ae60", "#8e44ad"]
    vals = np.concatenate([np.asarray(s)[np.isfinite(s)] for s in series.values()])
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    span = hi - lo or 1.0
    body = [f'<text x="{pad}" y="20" font-size="12">{escape(title)}</text>']
    for idx, (name, s) in enumerate(series.items()):
        s = np.asarray(s, dtype=float)
        n = max(len(s) - 1, 1)
        pts = " ".join(f"{pad + (w - 2 * pad) * i / n:.2f},{pad + (h - 2 * pad) * (hi - v) / span:.2f}"
                       for i, v in enumerate(s) if math.isfinite(v))
        color = colors[idx % len(colors)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        body.append(f'<text x="{w - pad - 120}" y="{pad + 14 * idx}" font-size="10" fill="{color}">'
                    f'{escape(name)}</text>')
    _write(path, _svg(w, h, body, title))


def _write(path, text: str) -> None:
    Path(path).write_text(text, newline="\n")
