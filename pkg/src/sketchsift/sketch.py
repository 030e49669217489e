"""Vector sketch data model: documents, normalization, masking, rasterization.

A sketch is an ordered list of strokes on a fixed canvas; each stroke is an
ordered polyline of absolute (x, y) points. The raster twin is produced by a
deterministic integer line traversal so that tests can assert bit-exact
pixels. All types are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptySketch,
    EmptySubset,
    LengthMismatch,
    MalformedDocument,
    OutOfCanvas,
)

COORD_DECIMALS = 6


class Point(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Stroke:
    """One pen-down polyline; at least two points (dots repeat a point)."""

    points: tuple[Point, ...]

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise MalformedDocument(f"stroke needs >= 2 points, got {len(self.points)}")
        for p in self.points:
            if not (math.isfinite(p.x) and math.isfinite(p.y)):
                raise MalformedDocument(f"non-finite coordinate {p}")

    def __len__(self) -> int:
        return len(self.points)

    def to_array(self) -> np.ndarray:
        """(N, 2) float array of x, y columns."""
        return np.array(self.points, dtype=np.float64)


@dataclass(frozen=True)
class VectorSketch:
    strokes: tuple[Stroke, ...]
    canvas_h: int
    canvas_w: int

    def __post_init__(self) -> None:
        if len(self.strokes) < 1:
            raise EmptySketch("sketch has no strokes")
        if self.canvas_h < 1 or self.canvas_w < 1:
            raise MalformedDocument(
                f"bad canvas {self.canvas_h}x{self.canvas_w}"
            )

    @property
    def stroke_count(self) -> int:
        return len(self.strokes)

    def point_counts(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.strokes)

    def all_points(self) -> np.ndarray:
        return np.concatenate([s.to_array() for s in self.strokes], axis=0)

    def fits_canvas(self) -> bool:
        pts = self.all_points()
        return bool(
            (pts[:, 0] >= 0).all()
            and (pts[:, 0] < self.canvas_w).all()
            and (pts[:, 1] >= 0).all()
            and (pts[:, 1] < self.canvas_h).all()
        )

    def prefix(self, k: int) -> "VectorSketch":
        """Sketch containing the first k strokes (temporal prefix)."""
        if not 1 <= k <= self.stroke_count:
            raise LengthMismatch(f"prefix length {k} outside 1..{self.stroke_count}")
        return VectorSketch(self.strokes[:k], self.canvas_h, self.canvas_w)


@dataclass(frozen=True)
class StrokeMask:
    """Per-stroke select/ignore decisions; True selects the stroke."""

    bits: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def selected_count(self) -> int:
        return sum(self.bits)

    def selected_indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @staticmethod
    def all_select(k: int) -> "StrokeMask":
        return StrokeMask(tuple(True for _ in range(k)))

    @staticmethod
    def from_int(value: int, k: int) -> "StrokeMask":
        """Bit i of value picks stroke i (LSB = stroke 0)."""
        return StrokeMask(tuple(bool((value >> i) & 1) for i in range(k)))


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray
    h: int
    w: int

    def __post_init__(self) -> None:
        if self.pixels.shape != (self.h, self.w):
            raise LengthMismatch(
                f"pixel grid {self.pixels.shape} disagrees with {self.h}x{self.w}"
            )
        self.pixels.flags.writeable = False

    @property
    def ink_count(self) -> int:
        return int((self.pixels > 0).sum())


# --------------------------------------------------------------------------
# canonical sketch document


def parse_sketch(text: str, *, allow_outside: bool = False) -> VectorSketch:
    """Parse the canonical sketch document.

    Format: a `canvas H W` header line followed by one `stroke x,y x,y ...`
    line per stroke. Raises MalformedDocument on syntax problems, EmptySketch
    when no strokes are listed, and OutOfCanvas when a point lies outside the
    declared canvas (suppressed by allow_outside for callers that normalize
    afterwards).
    """
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise MalformedDocument("empty document")

    header = lines[0].split()
    if len(header) != 3 or header[0] != "canvas":
        raise MalformedDocument(f"expected 'canvas H W' header, got {lines[0]!r}")
    try:
        canvas_h, canvas_w = int(header[1]), int(header[2])
    except ValueError as exc:
        raise MalformedDocument(f"bad canvas dimensions in {lines[0]!r}") from exc
    if canvas_h < 1 or canvas_w < 1:
        raise MalformedDocument(f"bad canvas {canvas_h}x{canvas_w}")

    strokes: list[Stroke] = []
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if tokens[0] != "stroke":
            raise MalformedDocument(f"line {lineno}: expected 'stroke', got {tokens[0]!r}")
        if len(tokens) < 3:
            raise MalformedDocument(f"line {lineno}: stroke needs >= 2 points")
        points = []
        for tok in tokens[1:]:
            parts = tok.split(",")
            if len(parts) != 2:
                raise MalformedDocument(f"line {lineno}: bad point {tok!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError as exc:
                raise MalformedDocument(f"line {lineno}: bad point {tok!r}") from exc
            if not (math.isfinite(x) and math.isfinite(y)):
                raise MalformedDocument(f"line {lineno}: non-finite point {tok!r}")
            if not allow_outside and not (0 <= x < canvas_w and 0 <= y < canvas_h):
                raise OutOfCanvas(
                    f"line {lineno}: point ({x}, {y}) outside {canvas_h}x{canvas_w} canvas"
                )
            points.append(Point(x, y))
        strokes.append(Stroke(tuple(points)))

    if not strokes:
        raise EmptySketch("document declares no strokes")
    return VectorSketch(tuple(strokes), canvas_h, canvas_w)


def serialize_sketch(sketch: VectorSketch) -> str:
    """Canonical text form: fixed 6-decimal coordinates, one stroke per line."""
    out = [f"canvas {sketch.canvas_h} {sketch.canvas_w}"]
    for stroke in sketch.strokes:
        pts = " ".join(
            f"{p.x:.{COORD_DECIMALS}f},{p.y:.{COORD_DECIMALS}f}" for p in stroke.points
        )
        out.append(f"stroke {pts}")
    return "\n".join(out) + "\n"


def quantize(sketch: VectorSketch) -> VectorSketch:
    """Round all coordinates to the document precision (6 decimals)."""
    strokes = tuple(
        Stroke(tuple(Point(round(p.x, COORD_DECIMALS), round(p.y, COORD_DECIMALS)) for p in s.points))
        for s in sketch.strokes
    )
    return VectorSketch(strokes, sketch.canvas_h, sketch.canvas_w)


def from_offset_triplets(
    triplets: Iterable[tuple[float, float, int]],
    canvas_h: int = 256,
    canvas_w: int = 256,
    margin_frac: float = 0.05,
) -> VectorSketch:
    """Convert the common (dx, dy, pen_lift) stroke stream to a VectorSketch.

    Positions accumulate from (0, 0); pen_lift != 0 ends the current stroke
    after that point. The result is normalized into the requested canvas and
    quantized to document precision.
    """
    strokes: list[Stroke] = []
    current: list[Point] = []
    x = y = 0.0
    for dx, dy, pen in triplets:
        x += float(dx)
        y += float(dy)
        current.append(Point(x, y))
        if pen:
            if len(current) == 1:
                current.append(current[0])
            strokes.append(Stroke(tuple(current)))
            current = []
    if current:
        if len(current) == 1:
            current.append(current[0])
        strokes.append(Stroke(tuple(current)))
    if not strokes:
        raise EmptySketch("offset stream contains no strokes")
    sketch = VectorSketch(tuple(strokes), canvas_h, canvas_w)
    return quantize(normalize(sketch, canvas_h, canvas_w, margin_frac))


# --------------------------------------------------------------------------
# geometry operations


def normalize(
    sketch: VectorSketch,
    target_h: int,
    target_w: int,
    margin_frac: float = 0.05,
) -> VectorSketch:
    """Scale + translate (aspect preserved) so the bbox fits the margin box.

    The fit box spans [m, (dim-1) - m] per axis with m = margin_frac * (dim-1)
    and the scaled bbox is centered on the canvas; a degenerate bbox (all
    points identical) is placed at the canvas center. Idempotent to ~1e-9.
    """
    if not 0 <= margin_frac < 0.5:
        raise LengthMismatch(f"margin_frac {margin_frac} outside [0, 0.5)")
    pts = sketch.all_points()
    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    bw, bh = xmax - xmin, ymax - ymin
    cx_canvas = (target_w - 1) / 2.0
    cy_canvas = (target_h - 1) / 2.0

    eps = 1e-12
    if bw <= eps and bh <= eps:
        scale = 1.0
    else:
        span_w = (target_w - 1) * (1.0 - 2.0 * margin_frac)
        span_h = (target_h - 1) * (1.0 - 2.0 * margin_frac)
        sx = span_w / bw if bw > eps else math.inf
        sy = span_h / bh if bh > eps else math.inf
        scale = min(sx, sy)

    cx_box = (xmin + xmax) / 2.0
    cy_box = (ymin + ymax) / 2.0

    strokes = []
    for stroke in sketch.strokes:
        new_pts = tuple(
            Point(
                (p.x - cx_box) * scale + cx_canvas,
                (p.y - cy_box) * scale + cy_canvas,
            )
            for p in stroke.points
        )
        strokes.append(Stroke(new_pts))
    return VectorSketch(tuple(strokes), target_h, target_w)


def apply_mask(sketch: VectorSketch, mask: StrokeMask) -> VectorSketch:
    """Keep exactly the selected strokes, order preserved."""
    if len(mask) != sketch.stroke_count:
        raise LengthMismatch(
            f"mask length {len(mask)} != stroke count {sketch.stroke_count}"
        )
    kept = tuple(s for s, b in zip(sketch.strokes, mask.bits) if b)
    if not kept:
        raise EmptySubset("mask selects no strokes")
    return VectorSketch(kept, sketch.canvas_h, sketch.canvas_w)


# --------------------------------------------------------------------------
# rasterization


def _bresenham(x0: int, y0: int, x1: int, y1: int) -> Iterable[tuple[int, int]]:
    """Integer midpoint line traversal, all octants, endpoints included."""
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def _dilation_offsets(line_width: int) -> list[tuple[int, int]]:
    lo = -((line_width - 1) // 2)
    hi = line_width // 2
    return [(oy, ox) for oy in range(lo, hi + 1) for ox in range(lo, hi + 1)]


def _paint_stroke(
    grid: np.ndarray,
    stroke: Stroke,
    sx: float,
    sy: float,
    offsets: list[tuple[int, int]],
) -> None:
    h, w = grid.shape
    arr = stroke.to_array()
    cols = np.floor(arr[:, 0] * sx).astype(np.int64)
    rows = np.floor(arr[:, 1] * sy).astype(np.int64)
    for i in range(len(arr) - 1):
        for px, py in _bresenham(int(cols[i]), int(rows[i]), int(cols[i + 1]), int(rows[i + 1])):
            for oy, ox in offsets:
                yy, xx = py + oy, px + ox
                if 0 <= yy < h and 0 <= xx < w:
                    grid[yy, xx] = 1.0


def rasterize(
    sketch: VectorSketch,
    out_h: int,
    out_w: int,
    line_width: int = 1,
) -> RasterImage:
    """Deterministic binary raster: ink 1, background 0.

    Canvas coordinates scale to output pixels by floor(x * out/canvas); line
    pixels come from integer line traversal dilated to a line_width square.
    Pixels falling outside the grid are clipped away.
    """
    if out_h < 8 or out_w < 8:
        raise LengthMismatch(f"raster {out_h}x{out_w} below 8x8 minimum")
    if line_width < 1:
        raise LengthMismatch(f"line_width {line_width} < 1")
    grid = np.zeros((out_h, out_w), dtype=np.float64)
    sx = out_w / sketch.canvas_w
    sy = out_h / sketch.canvas_h
    offsets = _dilation_offsets(line_width)
    for stroke in sketch.strokes:
        _paint_stroke(grid, stroke, sx, sy, offsets)
    return RasterImage(grid, out_h, out_w)


def rasterize_strokes(
    sketch: VectorSketch,
    out_h: int,
    out_w: int,
    line_width: int = 1,
) -> np.ndarray:
    """(K, out_h, out_w) stack of per-stroke rasters.

    The pixelwise max over any stroke group equals the raster of that group,
    so subset rasters can be assembled from this cache without re-tracing.
    """
    if out_h < 8 or out_w < 8:
        raise LengthMismatch(f"raster {out_h}x{out_w} below 8x8 minimum")
    if line_width < 1:
        raise LengthMismatch(f"line_width {line_width} < 1")
    sx = out_w / sketch.canvas_w
    sy = out_h / sketch.canvas_h
    offsets = _dilation_offsets(line_width)
    stack = np.zeros((sketch.stroke_count, out_h, out_w), dtype=np.float64)
    for i, stroke in enumerate(sketch.strokes):
        _paint_stroke(stack[i], stroke, sx, sy, offsets)
    return stack


def raster_of_mask(stroke_rasters: np.ndarray, mask: StrokeMask) -> np.ndarray:
    """Union (pixelwise max) of the selected strokes' cached rasters."""
    if len(mask) != stroke_rasters.shape[0]:
        raise LengthMismatch(
            f"mask length {len(mask)} != cached strokes {stroke_rasters.shape[0]}"
        )
    idx = mask.selected_indices()
    if not idx:
        raise EmptySubset("mask selects no strokes")
    return stroke_rasters[list(idx)].max(axis=0)
