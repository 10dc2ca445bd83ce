"""CSV tables, small deterministic SVG charts and run manifests."""

import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

WIDTH, HEIGHT = 640, 480
_MARGIN = (60, 20, 30, 50)  # left, right, top, bottom


def _fmt(v):
    # fixed precision keeps the output byte-stable across platforms
    return f"{v:.2f}"


def _esc(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _span(lo, hi):
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


class _Frame:
    def __init__(self, xr, yr):
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr
        left, right, top, bottom = _MARGIN
        self.px = (left, WIDTH - right)
        self.py = (HEIGHT - bottom, top)

    def X(self, x):
        return self.px[0] + (x - self.x0) / (self.x1 - self.x0) * (self.px[1] - self.px[0])

    def Y(self, y):
        return self.py[0] + (y - self.y0) / (self.y1 - self.y0) * (self.py[1] - self.py[0])


def _svg(body, title, xlabel, ylabel, frame):
    left, right, top, bottom = _MARGIN
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{WIDTH - left - right}" height="{HEIGHT - top - bottom}" '
        'fill="none" stroke="black"/>',
    ]
    if title:
        parts.append(f'<text x="{WIDTH // 2}" y="{top - 10}" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    if xlabel:
        parts.append(f'<text x="{WIDTH // 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">'
                     f'{_esc(xlabel)}</text>')
    if ylabel:
        parts.append(f'<text x="15" y="{HEIGHT // 2}" text-anchor="middle" font-size="12" '
                     f'transform="rotate(-90 15 {HEIGHT // 2})">{_esc(ylabel)}</text>')
    for v, anchor in ((frame.x0, "start"), (frame.x1, "end")):
        parts.append(f'<text x="{_fmt(frame.X(v))}" y="{HEIGHT - bottom + 15}" text-anchor="{anchor}" '
                     f'font-size="10">{v:.3g}</text>')
    for v in (frame.y0, frame.y1):
        parts.append(f'<text x="{left - 4}" y="{_fmt(frame.Y(v))}" text-anchor="end" font-size="10">{v:.3g}</text>')
    parts.extend(body)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_svg_scatter(points, fit=None, title="", xlabel="", ylabel=""):
    """Scatter plot, optionally with a fitted line ``(slope, intercept)``
    drawn across the x range of the points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise DataError("scatter plot needs at least one point")
    if not np.all(np.isfinite(pts)):
        raise DataError("scatter points must be finite")
    xmin, xmax = float(pts[:, 0].min()), float(pts[:, 0].max())
    ys = list(pts[:, 1])
    if fit is not None:
        slope, intercept = fit
        ys += [slope * xmin + intercept, slope * xmax + intercept]
    frame = _Frame(_span(xmin, xmax), _span(min(ys), max(ys)))
    body = [f'<circle cx="{_fmt(frame.X(x))}" cy="{_fmt(frame.Y(y))}" r="3" fill="steelblue"/>' for x, y in pts]
    if fit is not None:
        body.append(f'<line x1="{_fmt(frame.X(xmin))}" y1="{_fmt(frame.Y(slope * xmin + intercept))}" '
                    f'x2="{_fmt(frame.X(xmax))}" y2="{_fmt(frame.Y(slope * xmax + intercept))}" '
                    'stroke="crimson" stroke-width="2"/>')
    return _svg(body, title, xlabel, ylabel, frame)


def emit_svg_strip(groups, title="", ylabel=""):
    """One vertical strip of points per labelled group.  Points within a
    strip are spread by a fixed offset pattern rather than random jitter."""
    if not groups or not any(len(v) for v in groups.values()):
        raise DataError("strip plot needs at least one value")
    labels = list(groups)
    allv = np.concatenate([np.asarray(groups[k], dtype=np.float64) for k in labels])
    frame = _Frame((-0.5, len(labels) - 0.5), _span(float(allv.min()), float(allv.max())))
    body = []
    for i, lab in enumerate(labels):
        vals = np.asarray(groups[lab], dtype=np.float64)
        for j, v in enumerate(vals):
            off = ((j * 7) % 11 - 5) / 30.0
            body.append(f'<circle cx="{_fmt(frame.X(i + off))}" cy="{_fmt(frame.Y(v))}" r="2.5" '
                        'fill="steelblue" fill-opacity="0.7"/>')
        body.append(f'<text x="{_fmt(frame.X(i))}" y="{HEIGHT - _MARGIN[3] + 28}" text-anchor="middle" '
                    f'font-size="11">{_esc(lab)}</text>')
    return _svg(body, title, "", ylabel, frame)


def emit_svg_histogram(values, bins=10, value_range=(0.0, 1.0), title="", xlabel=""):
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise DataError("histogram needs at least one value")
    counts, edges = np.histogram(vals, bins=bins, range=value_range)
    frame = _Frame((edges[0], edges[-1]), (0.0, max(1.0, float(counts.max())) * 1.05))
    body = []
    for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
        x, y = frame.X(lo), frame.Y(c)
        body.append(f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(frame.X(hi) - x)}" '
                    f'height="{_fmt(frame.Y(0) - y)}" fill="steelblue" stroke="white"/>')
    return _svg(body, title, xlabel, "count", frame)


def write_svg(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
    return path


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _version():
    from . import __version__
    return __version__


@dataclass
class RunManifest:
    """What a command read, what it wrote, and how to repeat it."""

    command: list
    config_hash: str | None = None
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # path -> sha256
    seeds: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)  # sampling mode, metric, tau and the like
    started: float = field(default_factory=time.time)
    finished: float | None = None
    tool_version: str = field(default_factory=_version)
    status: str = "ok"

    def add_input(self, path):
        if path and os.path.isfile(path):
            self.inputs[os.path.abspath(path)] = sha256_file(path)

    def add_output(self, path):
        self.outputs[os.path.abspath(path)] = sha256_file(path)

    def add_outputs(self, paths):
        for p in paths:
            self.add_output(p)

    def to_json(self):
        return {
            "tool_version": self.tool_version,
            "command": self.command,
            "config_hash": self.config_hash,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "seeds": self.seeds,
            "settings": self.settings,
            "started": _iso(self.started),
            "finished": _iso(self.finished) if self.finished else None,
            "status": self.status,
        }

    def write(self, path):
        self.finished = self.finished or time.time()
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def _iso(t):
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def verify_manifest(path):
    """Paths whose current bytes no longer match the recorded hash."""
    with open(path) as fh:
        doc = json.load(fh)
    bad = []
    for p, digest in {**doc["inputs"], **doc["outputs"]}.items():
        if not os.path.isfile(p) or sha256_file(p) != digest:
            bad.append(p)
    return bad


def command_line():
    return [os.path.basename(sys.argv[0])] + sys.argv[1:]


def log10_safe(values, floor=1e-12):
    v = np.asarray(values, dtype=np.float64)
    return np.log10(np.maximum(v, floor))


def summary_line(name, value):
    if isinstance(value, float) and math.isnan(value):
        return f"{name}: undefined"
    return f"{name}: {value}"
