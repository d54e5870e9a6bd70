"""Hand-rolled SVG emission for scatter plots and image grids.

No plotting dependency: the output is deterministic text, so plots can
be diffed and golden-tested.  Training points are circles colored by
class, generated points are crosses; image grids render 8-bit grayscale
cells with optional nearest-neighbor rows beneath.
"""

from __future__ import annotations

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

_MARGIN = 40.0


def _fmt(value):
    return f"{float(value):.2f}"


def _axis_bounds(arrays):
    pts = [np.atleast_2d(np.asarray(a, dtype=np.float64))
           for a in arrays if a is not None and np.size(a)]
    if not pts:
        return -1.0, 1.0, -1.0, 1.0
    allpts = np.vstack(pts)
    x_lo, y_lo = allpts.min(axis=0)
    x_hi, y_hi = allpts.max(axis=0)
    pad_x = 0.1 * max(x_hi - x_lo, 1e-9)
    pad_y = 0.1 * max(y_hi - y_lo, 1e-9)
    return x_lo - pad_x, x_hi + pad_x, y_lo - pad_y, y_hi + pad_y


def svg_scatter(train_points=None, train_labels=None, samples=None,
                sample_labels=None, size=480, title=""):
    """Scatter SVG: dataset points as circles, generated as crosses."""
    x_lo, x_hi, y_lo, y_hi = _axis_bounds([train_points, samples])
    span = size - 2 * _MARGIN

    def sx(x):
        return _MARGIN + (x - x_lo) / (x_hi - x_lo) * span

    def sy(y):
        return size - _MARGIN - (y - y_lo) / (y_hi - y_lo) * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        # axes
        f'<line x1="{_fmt(_MARGIN)}" y1="{_fmt(size - _MARGIN)}" '
        f'x2="{_fmt(size - _MARGIN)}" y2="{_fmt(size - _MARGIN)}" '
        'stroke="black" stroke-width="1"/>',
        f'<line x1="{_fmt(_MARGIN)}" y1="{_fmt(_MARGIN)}" '
        f'x2="{_fmt(_MARGIN)}" y2="{_fmt(size - _MARGIN)}" '
        'stroke="black" stroke-width="1"/>',
        f'<text x="{_fmt(_MARGIN)}" y="{_fmt(size - _MARGIN + 16)}" '
        f'font-size="10">{_fmt(x_lo)}</text>',
        f'<text x="{_fmt(size - _MARGIN)}" y="{_fmt(size - _MARGIN + 16)}" '
        f'font-size="10" text-anchor="end">{_fmt(x_hi)}</text>',
        f'<text x="{_fmt(_MARGIN - 4)}" y="{_fmt(size - _MARGIN)}" '
        f'font-size="10" text-anchor="end">{_fmt(y_lo)}</text>',
        f'<text x="{_fmt(_MARGIN - 4)}" y="{_fmt(_MARGIN)}" '
        f'font-size="10" text-anchor="end">{_fmt(y_hi)}</text>',
    ]
    if title:
        parts.append(f'<text x="{_fmt(size / 2)}" y="20" font-size="14" '
                     f'text-anchor="middle">{title}</text>')
    if samples is not None and np.size(samples):
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        labels = (np.zeros(len(samples), dtype=int) if sample_labels is None
                  else np.asarray(sample_labels, dtype=int))
        for p, lab in zip(samples, labels):
            cx, cy = sx(p[0]), sy(p[1])
            color = PALETTE[int(lab) % len(PALETTE)]
            parts.append(
                f'<path d="M {_fmt(cx - 3)} {_fmt(cy - 3)} '
                f'L {_fmt(cx + 3)} {_fmt(cy + 3)} '
                f'M {_fmt(cx - 3)} {_fmt(cy + 3)} '
                f'L {_fmt(cx + 3)} {_fmt(cy - 3)}" '
                f'stroke="{color}" stroke-width="1" opacity="0.6"/>')
    if train_points is not None and np.size(train_points):
        train_points = np.atleast_2d(
            np.asarray(train_points, dtype=np.float64))
        labels = (np.zeros(len(train_points), dtype=int)
                  if train_labels is None
                  else np.asarray(train_labels, dtype=int))
        for p, lab in zip(train_points, labels):
            color = PALETTE[int(lab) % len(PALETTE)]
            parts.append(
                f'<circle cx="{_fmt(sx(p[0]))}" cy="{_fmt(sy(p[1]))}" '
                f'r="5" fill="none" stroke="{color}" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _gray(value):
    level = int(round(255 * min(max(float(value), 0.0), 1.0)))
    return f"#{level:02x}{level:02x}{level:02x}"


def svg_image_grid(images, neighbors=None, side=None, cell=48, columns=10,
                   title=""):
    """Grid of grayscale images; ``neighbors`` renders beneath each image.

    ``images`` is (n, side*side) or (n, side, side); values clipped to
    [0, 1].
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2 and side is None:
        side = int(round(np.sqrt(images.shape[1])))
        if side * side != images.shape[1]:
            raise ValueError("cannot infer square image side")
    if images.ndim == 3:
        side = images.shape[1]
    images = images.reshape(len(images), side, side) if len(images) else \
        images.reshape(0, side or 1, side or 1)
    if neighbors is not None:
        neighbors = np.asarray(neighbors,
                               dtype=np.float64).reshape(len(images), side,
                                                         side)
    n = len(images)
    columns = max(1, min(columns, max(n, 1)))
    rows = (n + columns - 1) // columns if n else 0
    band = 2 if neighbors is not None else 1
    pad = 8
    width = columns * (cell + pad) + pad
    height = max(rows * band * (cell + pad) + pad + (20 if title else 0),
                 cell)
    px = cell / side if side else cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{_fmt(width / 2)}" y="14" font-size="12" '
                     f'text-anchor="middle">{title}</text>')
    y_base = 20 if title else 0
    for i in range(n):
        row, col = divmod(i, columns)
        x0 = pad + col * (cell + pad)
        y0 = y_base + pad + row * band * (cell + pad)
        stack = [images[i]] if neighbors is None else [images[i],
                                                       neighbors[i]]
        for k, img in enumerate(stack):
            yk = y0 + k * (cell + 2)
            for r in range(side):
                for c in range(side):
                    parts.append(
                        f'<rect x="{_fmt(x0 + c * px)}" '
                        f'y="{_fmt(yk + r * px)}" width="{_fmt(px)}" '
                        f'height="{_fmt(px)}" fill="{_gray(img[r, c])}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
