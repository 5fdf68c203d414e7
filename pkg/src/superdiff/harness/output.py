"""CSV, JSON and SVG emission. Floats use 17 significant digits (lossless)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class OutputError(OSError):
    pass


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def trace_header(dim: int, m: int) -> list[str]:
    return (["sample_id", "step", "tau"] + [f"x{k}" for k in range(dim)]
            + [f"logq_{i}" for i in range(m)] + [f"kappa_{i}" for i in range(m)] + ["fallback"])


def samples_header(dim: int, m: int) -> list[str]:
    return ["sample_id"] + [f"x{k}" for k in range(dim)] + [f"logq_{i}" for i in range(m)] + ["aborted"]


def _open(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open("w", newline="")
    except OSError as exc:
        raise OutputError(f"{path}: cannot write ({exc.strerror})") from None


def emit_csv(records: Iterable, path, dim: int, m: int) -> int:
    """Write trace records ``(sample_id, step, tau, x, logq, kappa, fallback)``; returns the row count."""
    rows = 0
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(dim, m))
        for sid, step, tau, x, logq, kappa, fb in records:
            w.writerow([int(sid), int(step), fmt(tau), *map(fmt, x), *map(fmt, logq), *map(fmt, kappa),
                        int(bool(fb))])
            rows += 1
    return rows


def emit_samples_csv(ids, x, logq, aborted, path) -> int:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    logq = np.asarray(logq, dtype=float).reshape(x.shape[0], -1)
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(samples_header(x.shape[1], logq.shape[1]))
        for sid, xi, li, ab in zip(ids, x, logq, aborted):
            w.writerow([int(sid), *map(fmt, xi), *map(fmt, li), int(bool(ab))])
    return x.shape[0]


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a file written by this module."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [[float(v) for v in row] for row in reader]
    return header, np.asarray(data, dtype=float).reshape(-1, len(header))


def emit_scatter_svg(samples, path, labels=None, size: int = 480, radius: float = 1.6) -> None:
    """2D scatter of the first two coordinates, one colour per label."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[1] == 1:
        x = np.concatenate([x, np.zeros_like(x)], axis=1)
    keep = np.all(np.isfinite(x[:, :2]), axis=1)
    pts = x[keep, :2]
    lab = np.zeros(x.shape[0], dtype=int) if labels is None else np.asarray(labels, dtype=int)
    lab = lab[keep]
    pad = 20.0
    if pts.size:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    span = float(max(np.max(hi - lo), 1e-9))
    scale = (size - 2 * pad) / span
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for (px, py), c in zip(pts, lab):
        cx = pad + (px - lo[0]) * scale
        cy = size - pad - (py - lo[1]) * scale
        lines.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{radius}" fill="{PALETTE[c % len(PALETTE)]}" '
                     f'fill-opacity="0.6"/>')
    lines.append("</svg>")
    with _open(path) as fh:
        fh.write("\n".join(lines) + "\n")


def write_text(path, text: str) -> None:
    with _open(path) as fh:
        fh.write(text)
