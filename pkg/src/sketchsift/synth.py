"""Procedural paired (photo raster, vector sketch) generator with labeled noise.

Each pair is a random closed shape: the photo is the clean rasterized contour,
the sketch is a jittered polyline tracing of the same contour split into
strokes, optionally with planted scribble strokes whose positions are labeled
so selector precision/recall can be measured against ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidFractions, LengthMismatch, MalformedDocument
from .sketch import (
    Point,
    RasterImage,
    Stroke,
    StrokeMask,
    VectorSketch,
    apply_mask,
    normalize,
    parse_sketch,
    quantize,
    rasterize,
    serialize_sketch,
)

SHAPE_FAMILIES = ("polygon", "ellipse", "blob")


@dataclass
class PairSpec:
    shape_family: str = "polygon"
    jitter_sigma: float = 1.0
    n_clean_strokes: int = 5
    n_noise_strokes: int = 0
    seed: int = 0
    canvas: int = 256
    photo_hw: int = 64
    line_width: int = 1
    noise_points_min: int = 3
    noise_points_max: int = 6
    noise_step_max: float = 8.0

    def __post_init__(self) -> None:
        if self.shape_family not in SHAPE_FAMILIES:
            raise LengthMismatch(f"unknown shape family {self.shape_family!r}")
        if self.n_clean_strokes < 2:
            raise LengthMismatch(f"n_clean_strokes {self.n_clean_strokes} < 2")
        if self.jitter_sigma < 0:
            raise LengthMismatch(f"jitter_sigma {self.jitter_sigma} < 0")


@dataclass
class LabeledSketch:
    sketch: VectorSketch
    noise_flags: tuple[bool, ...]
    pair_id: str

    def __post_init__(self) -> None:
        if len(self.noise_flags) != self.sketch.stroke_count:
            raise LengthMismatch("noise flags length != stroke count")

    def clean_mask(self) -> StrokeMask:
        return StrokeMask(tuple(not f for f in self.noise_flags))


# --------------------------------------------------------------------------
# contour construction


def _polygon_contour(rng: np.random.Generator) -> np.ndarray:
    n_vert = int(rng.integers(5, 10))
    angles = np.sort((np.arange(n_vert) + rng.uniform(0.1, 0.9, n_vert)) / n_vert * 2 * np.pi)
    radii = rng.uniform(0.55, 1.0, n_vert)
    verts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    verts = np.concatenate([verts, verts[:1]], axis=0)
    pieces = []
    for a, b in zip(verts[:-1], verts[1:]):
        steps = max(2, int(np.ceil(np.linalg.norm(b - a) / 0.08)))
        t = np.linspace(0.0, 1.0, steps, endpoint=False)[:, None]
        pieces.append(a[None, :] * (1 - t) + b[None, :] * t)
    return np.concatenate(pieces, axis=0)


def _ellipse_contour(rng: np.random.Generator) -> np.ndarray:
    """Two or three overlapping ellipse outlines traced in sequence."""
    n_parts = int(rng.integers(2, 4))
    pieces = []
    for i in range(n_parts):
        cx, cy = rng.uniform(-0.35, 0.35, 2) if i else (0.0, 0.0)
        rx = rng.uniform(0.45, 0.95) * (1.0 if i == 0 else 0.55)
        ry = rng.uniform(0.45, 0.95) * (1.0 if i == 0 else 0.55)
        rot = rng.uniform(0, np.pi)
        t = np.linspace(0, 2 * np.pi, 40, endpoint=True)
        x = rx * np.cos(t)
        y = ry * np.sin(t)
        xr = x * np.cos(rot) - y * np.sin(rot) + cx
        yr = x * np.sin(rot) + y * np.cos(rot) + cy
        pieces.append(np.stack([xr, yr], axis=1))
    return np.concatenate(pieces, axis=0)


def _blob_contour(rng: np.random.Generator) -> np.ndarray:
    t = np.linspace(0, 2 * np.pi, 90, endpoint=True)
    r = np.full_like(t, 0.8)
    for h in range(2, 6):
        amp = rng.uniform(0.0, 0.16)
        phase = rng.uniform(0, 2 * np.pi)
        r = r + amp * np.cos(h * t + phase)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


_CONTOUR_BUILDERS = {
    "polygon": _polygon_contour,
    "ellipse": _ellipse_contour,
    "blob": _blob_contour,
}


def _contour_to_sketch(contour: np.ndarray, n_strokes: int, canvas: int) -> VectorSketch:
    """Scale a unit-box contour onto the canvas and split it into strokes."""
    pts = contour * canvas * 0.35 + canvas / 2.0
    n = len(pts)
    if n < 2 * n_strokes:
        raise LengthMismatch(f"contour of {n} points cannot make {n_strokes} strokes")
    bounds = np.linspace(0, n - 1, n_strokes + 1).astype(int)
    strokes = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        seg = pts[a : b + 1]  # share the boundary point with the next stroke
        strokes.append(Stroke(tuple(Point(float(x), float(y)) for x, y in seg)))
    return VectorSketch(tuple(strokes), canvas, canvas)


def _jitter(sketch: VectorSketch, sigma: float, rng: np.random.Generator) -> VectorSketch:
    if sigma == 0:
        return sketch
    hi_x = sketch.canvas_w - 1.0
    hi_y = sketch.canvas_h - 1.0
    strokes = []
    for stroke in sketch.strokes:
        arr = stroke.to_array() + rng.normal(0.0, sigma, size=(len(stroke), 2))
        arr[:, 0] = np.clip(arr[:, 0], 0.0, hi_x)
        arr[:, 1] = np.clip(arr[:, 1], 0.0, hi_y)
        strokes.append(Stroke(tuple(Point(float(x), float(y)) for x, y in arr)))
    return VectorSketch(tuple(strokes), sketch.canvas_h, sketch.canvas_w)


def _noise_stroke(canvas_h: int, canvas_w: int, spec: PairSpec, rng: np.random.Generator) -> Stroke:
    """Short random-walk scribble placed uniformly on the canvas."""
    n_pts = int(rng.integers(spec.noise_points_min, spec.noise_points_max + 1))
    x = rng.uniform(0.1 * canvas_w, 0.9 * canvas_w)
    y = rng.uniform(0.1 * canvas_h, 0.9 * canvas_h)
    pts = [Point(x, y)]
    for _ in range(n_pts - 1):
        x = float(np.clip(x + rng.uniform(-spec.noise_step_max, spec.noise_step_max), 0, canvas_w - 1))
        y = float(np.clip(y + rng.uniform(-spec.noise_step_max, spec.noise_step_max), 0, canvas_h - 1))
        pts.append(Point(x, y))
    return Stroke(tuple(pts))


def inject_noise(
    sketch: VectorSketch,
    n: int,
    rng: np.random.Generator,
    spec: PairSpec | None = None,
    pair_id: str = "",
) -> LabeledSketch:
    """Insert n labeled scribble strokes at random positions.

    Original strokes are untouched and keep their relative order, so applying
    the complement of the flags recovers the input byte-exactly.
    """
    if n < 0:
        raise LengthMismatch(f"noise count {n} < 0")
    spec = spec or PairSpec()
    strokes = list(sketch.strokes)
    flags = [False] * len(strokes)
    for _ in range(n):
        pos = int(rng.integers(0, len(strokes) + 1))
        noise = _noise_stroke(sketch.canvas_h, sketch.canvas_w, spec, rng)
        noise = Stroke(
            tuple(Point(round(p.x, 6), round(p.y, 6)) for p in noise.points)
        )
        strokes.insert(pos, noise)
        flags.insert(pos, True)
    labeled = VectorSketch(tuple(strokes), sketch.canvas_h, sketch.canvas_w)
    return LabeledSketch(labeled, tuple(flags), pair_id)


def generate_junk_sketch(
    spec: PairSpec, n_strokes: int, rng: np.random.Generator
) -> VectorSketch:
    """A sketch made only of scribble strokes (no generating shape); models a
    user doodling unusable input."""
    if n_strokes < 1:
        raise LengthMismatch(f"n_strokes {n_strokes} < 1")
    strokes = tuple(
        Stroke(
            tuple(
                Point(round(p.x, 6), round(p.y, 6))
                for p in _noise_stroke(spec.canvas, spec.canvas, spec, rng).points
            )
        )
        for _ in range(n_strokes)
    )
    return VectorSketch(strokes, spec.canvas, spec.canvas)


def generate_pair(spec: PairSpec) -> tuple[RasterImage, LabeledSketch]:
    """Seed-deterministic (photo raster, labeled sketch) pair."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, 7))))
    contour = _CONTOUR_BUILDERS[spec.shape_family](rng)
    clean = _contour_to_sketch(contour, spec.n_clean_strokes, spec.canvas)
    clean = normalize(clean, spec.canvas, spec.canvas, margin_frac=0.1)
    photo = rasterize(clean, spec.photo_hw, spec.photo_hw, spec.line_width)
    sketch = quantize(_jitter(clean, spec.jitter_sigma, rng))
    pair_id = f"p{spec.seed:06d}"
    labeled = inject_noise(sketch, spec.n_noise_strokes, rng, spec, pair_id)
    return photo, labeled


# --------------------------------------------------------------------------
# dataset on disk


@dataclass
class ManifestEntry:
    pair_id: str
    sketch_path: str
    photo_path: str
    split: str


@dataclass
class Dataset:
    root: Path
    entries: list[ManifestEntry]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load_split(
        self, name: str
    ) -> tuple[list[VectorSketch], np.ndarray, list[str]]:
        """(sketches, photo stack, pair ids) for one split."""
        entries = self.split(name)
        if not entries:
            raise LengthMismatch(f"split {name!r} is empty")
        sketches = [
            parse_sketch((self.root / e.sketch_path).read_text()) for e in entries
        ]
        photos = np.stack([read_pgm(self.root / e.photo_path).pixels for e in entries])
        return sketches, photos, [e.pair_id for e in entries]


def write_pgm(path: Path | str, raster: RasterImage) -> None:
    """Binary P5 graymap, ink scaled to 255."""
    path = Path(path)
    levels = np.clip(np.round(raster.pixels * 255.0), 0, 255).astype(np.uint8)
    with path.open("wb") as fh:
        fh.write(f"P5\n{raster.w} {raster.h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path: Path | str) -> RasterImage:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise MalformedDocument(f"{path}: not a binary P5 graymap")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3][: w * h], dtype=np.uint8).reshape(h, w)
    return RasterImage(pixels.astype(np.float64) / maxval, h, w)


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions {fractions} must be >= 0 and sum to 1")
    counts = [int(round(f * n)) for f in fractions]
    counts[-1] = n - sum(counts[:-1])
    if counts[-1] < 0:
        raise InvalidFractions(f"fractions {fractions} leave a negative split")
    return counts


def generate_dataset(
    n_pairs: int,
    base_spec: PairSpec,
    fractions: Sequence[float],
    seed: int,
    out_dir: Path | str,
    family_mix: Sequence[str] = SHAPE_FAMILIES,
    n_clean_range: tuple[int, int] | None = None,
) -> Dataset:
    """Write sketch documents, P5 photos, and the manifest for n_pairs pairs.

    Splits are disjoint by pair id; the split names are train/val/test in the
    order of the given fractions. Regeneration with the same arguments is
    byte-identical.
    """
    out_dir = Path(out_dir)
    (out_dir / "sketches").mkdir(parents=True, exist_ok=True)
    (out_dir / "photos").mkdir(parents=True, exist_ok=True)

    master = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 11))))
    split_names = ["train", "val", "test"][: len(fractions)]
    counts = _split_counts(n_pairs, fractions)
    assignment = []
    for name, count in zip(split_names, counts):
        assignment.extend([name] * count)
    assignment = [assignment[i] for i in master.permutation(n_pairs)]

    entries: list[ManifestEntry] = []
    for i in range(n_pairs):
        family = family_mix[i % len(family_mix)]
        spec = replace(base_spec, shape_family=family, seed=seed * 1_000_000 + i)
        if n_clean_range is not None:
            lo, hi = n_clean_range
            spec = replace(
                spec, n_clean_strokes=int(master.integers(lo, hi + 1))
            )
        photo, labeled = generate_pair(spec)
        sketch_rel = f"sketches/{labeled.pair_id}.sketch"
        photo_rel = f"photos/{labeled.pair_id}.pgm"
        (out_dir / sketch_rel).write_text(serialize_sketch(labeled.sketch))
        write_pgm(out_dir / photo_rel, photo)
        if any(labeled.noise_flags):
            flags_rel = f"sketches/{labeled.pair_id}.flags"
            (out_dir / flags_rel).write_text(
                " ".join("1" if f else "0" for f in labeled.noise_flags) + "\n"
            )
        entries.append(ManifestEntry(labeled.pair_id, sketch_rel, photo_rel, assignment[i]))

    manifest = out_dir / "manifest.txt"
    manifest.write_text(
        "".join(f"{e.pair_id} {e.sketch_path} {e.photo_path} {e.split}\n" for e in entries)
    )
    return Dataset(out_dir, entries)


def load_dataset(out_dir: Path | str) -> Dataset:
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.txt"
    if not manifest.exists():
        raise MalformedDocument(f"no manifest at {manifest}")
    entries = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MalformedDocument(f"bad manifest line {line!r}")
        entries.append(ManifestEntry(*parts))
    return Dataset(out_dir, entries)
