"""Deterministic CSV/JSON emission and self-contained SVG line plots."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CSV_HEADER = "step,seed,metric,value"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_rows_csv(rows, path: str | Path, time_kind: bool = False):
    """Write long-format rows; byte-identical across runs for identical inputs.

    ``rows`` are (step, seed, metric, value) tuples, with a trailing
    ``time_kind`` column ("discrete"/"slow") when requested.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = CSV_HEADER + (",time_kind" if time_kind else "")
    try:
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                step, seed, metric, value = row[:4]
                line = f"{_fmt(step)},{_fmt(seed)},{metric},{_fmt(value)}"
                if time_kind:
                    line += f",{row[4]}"
                fh.write(line + "\n")
    except OSError as exc:
        raise OSError(f"failed writing CSV to {path}: {exc}") from exc


def write_json(obj: dict, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    except OSError as exc:
        raise OSError(f"failed writing JSON to {path}: {exc}") from exc


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
            "#e377c2", "#17becf"]


def _ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + step / 2, step)


def svg_line_plot(series: dict[str, tuple], path: str | Path, title: str = "",
                  xlabel: str = "", ylabel: str = "", logx: bool = False,
                  logy: bool = False, width: int = 640, height: int = 420):
    """Write a self-contained SVG with one polyline per named series.

    ``series`` maps label -> (x_array, y_array).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ml, mr, mt, mb = 64, 16, 28, 44
    pw, ph = width - ml - mr, height - mt - mb

    def tx(v):
        return np.log10(np.maximum(v, 1e-300)) if logx else np.asarray(v, dtype=float)

    def ty(v):
        return np.log10(np.maximum(v, 1e-300)) if logy else np.asarray(v, dtype=float)

    xs = np.concatenate([tx(np.asarray(x, dtype=float)) for x, _ in series.values()]) \
        if series else np.array([0.0, 1.0])
    ys = np.concatenate([ty(np.asarray(y, dtype=float)) for _, y in series.values()]) \
        if series else np.array([0.0, 1.0])
    xs = xs[np.isfinite(xs)]
    ys = ys[np.isfinite(ys)]
    if xs.size == 0:
        xs = np.array([0.0, 1.0])
    if ys.size == 0:
        ys = np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 - x0 < 1e-12:
        x1 = x0 + 1.0
    if y1 - y0 < 1e-12:
        y1 = y0 + 1.0
    pad = 0.04 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (v - y0) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>']
    if title:
        parts.append(f'<text x="{width / 2}" y="18" text-anchor="middle" '
                     f'font-size="13">{title}</text>')
    for v in _ticks(x0, x1):
        parts.append(f'<line x1="{px(v):.1f}" y1="{mt + ph}" x2="{px(v):.1f}" '
                     f'y2="{mt + ph + 4}" stroke="#333"/>')
        label = f"1e{v:.0f}" if logx else f"{v:g}"
        parts.append(f'<text x="{px(v):.1f}" y="{mt + ph + 16}" '
                     f'text-anchor="middle">{label}</text>')
    for v in _ticks(y0, y1):
        parts.append(f'<line x1="{ml - 4}" y1="{py(v):.1f}" x2="{ml}" '
                     f'y2="{py(v):.1f}" stroke="#333"/>')
        label = f"1e{v:.0f}" if logy else f"{v:.4g}"
        parts.append(f'<text x="{ml - 6}" y="{py(v) + 4:.1f}" '
                     f'text-anchor="end">{label}</text>')
    if xlabel:
        parts.append(f'<text x="{ml + pw / 2}" y="{height - 8}" '
                     f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        parts.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 14 {mt + ph / 2})">{ylabel}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        x = tx(np.asarray(x, dtype=float))
        y = ty(np.asarray(y, dtype=float))
        ok = np.isfinite(x) & np.isfinite(y)
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[ok], y[ok]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = mt + 14 + 14 * i
        parts.append(f'<line x1="{ml + pw - 110}" y1="{ly - 4}" x2="{ml + pw - 90}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw - 85}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    try:
        path.write_text("\n".join(parts))
    except OSError as exc:
        raise OSError(f"failed writing SVG to {path}: {exc}") from exc
