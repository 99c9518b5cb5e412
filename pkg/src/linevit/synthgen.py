"""Synthetic single-line image datasets (variants I-IV).

Each image is a black canvas with one straight segment drawn on it plus
additive Gaussian noise. Geometry is sampled as follows, with ``s`` the
geometry scale ``image_size / 224`` (1.0 at the reference resolution):

* angle ``theta ~ U[0, 2pi)``
* length fixed at ``50 s`` (variant I) or ``L ~ U(20 s, 100 s)`` (II-IV)
* width fixed at 2 (I, II) or ``w ~ U{1..5}`` (III, IV)
* start ``x1, y1 ~ U(m, W - m - 1)`` with margin ``m = L`` (I, II) or
  ``m = L + w`` (III, IV), rounded to the nearest interior integer pixel
* end ``(x1, y1) + L (cos theta, sin theta)``, kept as exact floats
* colour white (I-III) or uniform over an 11-colour palette (IV)
* noise level uniform over ``{0, 0.1, 0.2, 0.3}``, ``sigma = level * 255``

Per-image randomness comes from ``seed_i = mix64(base_seed, i)`` so any
image can be regenerated in isolation and the dataset is identical whether
it is written by one process or many.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

REFERENCE_SIZE = 224
NOISE_LEVELS = (0.0, 0.1, 0.2, 0.3)
WIDTHS = (1, 2, 3, 4, 5)
FIXED_LENGTH = 50.0
LENGTH_RANGE = (20.0, 100.0)
FIXED_WIDTH = 2
WHITE = (255, 255, 255)

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "orange": (255, 165, 0),
    "purple": (128, 0, 128),
    "pink": (255, 192, 203),
    "white": (255, 255, 255),
    "teal": (0, 128, 128),
}

MANIFEST_COLUMNS = (
    "image_id", "angle_deg", "x1", "y1", "x2", "y2", "noise_level",
    "length", "width", "color_r", "color_g", "color_b", "color_name",
)

_MASK64 = (1 << 64) - 1


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetVariant:
    tag: str
    vary_length: bool
    vary_width: bool
    vary_color: bool


VARIANTS: dict[str, DatasetVariant] = {
    "I": DatasetVariant("I", False, False, False),
    "II": DatasetVariant("II", True, False, False),
    "III": DatasetVariant("III", True, True, False),
    "IV": DatasetVariant("IV", True, True, True),
}


def get_variant(tag: str | DatasetVariant) -> DatasetVariant:
    if isinstance(tag, DatasetVariant):
        return tag
    try:
        return VARIANTS[str(tag).upper()]
    except KeyError:
        raise ValueError(f"unknown dataset variant {tag!r}; expected one of I, II, III, IV") from None


@dataclass(frozen=True)
class NoiseSpec:
    level: float

    @property
    def sigma(self) -> float:
        return self.level * 255.0


@dataclass(frozen=True)
class LineSpec:
    angle_rad: float
    length: float
    width: int
    start: tuple[float, float]
    end: tuple[float, float]
    color_rgb: tuple[int, int, int]
    color_name: str


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    angle_deg: float
    x1: float
    y1: float
    x2: float
    y2: float
    noise_level: float
    length: float
    width: int
    color_r: int
    color_g: int
    color_b: int
    color_name: str

    def as_row(self) -> list[str]:
        return [
            self.image_id, repr(self.angle_deg), _fmt(self.x1), _fmt(self.y1),
            repr(self.x2), repr(self.y2), repr(self.noise_level), repr(self.length),
            str(self.width), str(self.color_r), str(self.color_g), str(self.color_b),
            self.color_name,
        ]


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass
class GenConfig:
    variant: DatasetVariant | str = "I"
    n_images: int = 2000
    base_seed: int = 0
    output_dir: str | os.PathLike = "data"
    image_size: int = REFERENCE_SIZE
    palette: dict[str, tuple[int, int, int]] = field(default_factory=lambda: dict(PALETTE))
    workers: int = 1

    def __post_init__(self):
        self.variant = get_variant(self.variant)
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        self.palette = {str(k): tuple(int(c) for c in v) for k, v in self.palette.items()}
        margin = max_margin(self.variant, self.image_size)
        if math.ceil(margin) > math.floor(self.image_size - margin - 1):
            raise ValueError(
                f"image_size {self.image_size} too small for variant {self.variant.tag}: "
                f"start margin up to {margin:.2f}px leaves no room"
            )

    @property
    def scale(self) -> float:
        return self.image_size / REFERENCE_SIZE


def max_margin(variant: DatasetVariant | str, image_size: int) -> float:
    """Largest start-point margin the variant can draw at this canvas size."""
    v = get_variant(variant)
    scale = image_size / REFERENCE_SIZE
    length = LENGTH_RANGE[1] * scale if v.vary_length else FIXED_LENGTH * scale
    return length + (max(WIDTHS) if v.vary_width else 0)


def mix64(base_seed: int, index: int) -> int:
    """splitmix64 finaliser over ``base_seed + (index + 1) * golden``."""
    z = (int(base_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def compute_endpoint(start: tuple[float, float], length: float, angle_rad: float) -> tuple[float, float]:
    if length <= 0:
        raise ValueError("length must be positive")
    x1, y1 = start
    return (x1 + length * math.cos(angle_rad), y1 + length * math.sin(angle_rad))


def _sample_start(rng: np.random.Generator, margin: float, size: int) -> float:
    lo, hi = margin, size - margin - 1
    v = rng.uniform(lo, hi)
    # round to an integer pixel without leaving [margin, size - margin - 1]
    return float(min(max(round(v), math.ceil(lo)), math.floor(hi)))


def sample_line(
    variant: DatasetVariant | str,
    rng: np.random.Generator,
    image_size: int = REFERENCE_SIZE,
    palette: dict[str, tuple[int, int, int]] | None = None,
) -> LineSpec:
    variant = get_variant(variant)
    palette = PALETTE if palette is None else palette
    scale = image_size / REFERENCE_SIZE

    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    if variant.vary_length:
        length = float(rng.uniform(LENGTH_RANGE[0] * scale, LENGTH_RANGE[1] * scale))
    else:
        length = FIXED_LENGTH * scale
    width = int(rng.choice(WIDTHS)) if variant.vary_width else FIXED_WIDTH
    if variant.vary_color:
        names = list(palette)
        name = names[int(rng.integers(len(names)))]
        color = palette[name]
    else:
        name, color = "white", WHITE

    margin = length + width if variant.vary_width else length
    assert math.ceil(margin) <= math.floor(image_size - margin - 1), "canvas too small for margin"
    x1 = _sample_start(rng, margin, image_size)
    y1 = _sample_start(rng, margin, image_size)
    end = compute_endpoint((x1, y1), length, theta)
    return LineSpec(theta, length, width, (x1, y1), end, tuple(color), name)


def blank_canvas(size: int) -> np.ndarray:
    return np.zeros((size, size, 3), dtype=np.uint8)


def capsule_mask(shape: tuple[int, int], start, end, width: float) -> np.ndarray:
    """Boolean mask of pixels whose centre lies within ``width / 2`` of the segment.

    Pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)`` so its centre is
    ``(col + 0.5, row + 0.5)``. Only the segment's bounding box is evaluated.
    """
    h, w = shape
    r = width / 2.0
    (x1, y1), (x2, y2) = start, end
    c0 = max(int(math.floor(min(x1, x2) - r)) - 1, 0)
    c1 = min(int(math.ceil(max(x1, x2) + r)) + 1, w)
    r0 = max(int(math.floor(min(y1, y2) - r)) - 1, 0)
    r1 = min(int(math.ceil(max(y1, y2) + r)) + 1, h)
    mask = np.zeros((h, w), dtype=bool)
    if c0 >= c1 or r0 >= r1:
        return mask
    px = np.arange(c0, c1, dtype=np.float64) + 0.5
    py = np.arange(r0, r1, dtype=np.float64) + 0.5
    PX, PY = np.meshgrid(px, py)
    dx, dy = x2 - x1, y2 - y1
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        t = np.zeros_like(PX)
    else:
        t = np.clip(((PX - x1) * dx + (PY - y1) * dy) / seg2, 0.0, 1.0)
    ex = PX - (x1 + t * dx)
    ey = PY - (y1 + t * dy)
    mask[r0:r1, c0:c1] = ex * ex + ey * ey <= r * r
    return mask


def rasterize_line(canvas: np.ndarray, spec: LineSpec) -> np.ndarray:
    out = canvas.copy()
    mask = capsule_mask(out.shape[:2], spec.start, spec.end, spec.width)
    out[mask] = np.asarray(spec.color_rgb, dtype=np.uint8)
    return out


def apply_noise(canvas: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    if noise.sigma == 0.0:
        return canvas.copy()
    noisy = canvas.astype(np.float64) + rng.standard_normal(canvas.shape) * noise.sigma
    # round half away from zero, then clip
    noisy = np.sign(noisy) * np.floor(np.abs(noisy) + 0.5)
    return np.clip(noisy, 0, 255).astype(np.uint8)


def render_sample(cfg: GenConfig, index: int) -> tuple[SampleRecord, np.ndarray]:
    """Generate image ``index`` of the dataset described by ``cfg``."""
    rng = np.random.default_rng(mix64(cfg.base_seed, index))
    spec = sample_line(cfg.variant, rng, cfg.image_size, cfg.palette)
    level = float(NOISE_LEVELS[int(rng.integers(len(NOISE_LEVELS)))])
    img = rasterize_line(blank_canvas(cfg.image_size), spec)
    img = apply_noise(img, NoiseSpec(level), rng)
    deg = math.degrees(spec.angle_rad)
    if deg >= 360.0:
        deg -= 360.0
    rec = SampleRecord(
        image_id=f"Image{index}",
        angle_deg=deg,
        x1=spec.start[0], y1=spec.start[1],
        x2=spec.end[0], y2=spec.end[1],
        noise_level=level,
        length=spec.length,
        width=spec.width,
        color_r=spec.color_rgb[0], color_g=spec.color_rgb[1], color_b=spec.color_rgb[2],
        color_name=spec.color_name,
    )
    return rec, img


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG", compress_level=1)


def _write_range(cfg: GenConfig, indices: Sequence[int]) -> list[SampleRecord]:
    out_dir = Path(cfg.output_dir) / "images"
    records = []
    for i in indices:
        rec, img = render_sample(cfg, i)
        save_png(img, out_dir / f"{rec.image_id}.png")
        records.append(rec)
    return records


def write_manifest(records: Sequence[SampleRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            writer.writerow(rec.as_row())


def read_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks columns: {sorted(missing)}")
        return [
            SampleRecord(
                image_id=row["image_id"],
                angle_deg=float(row["angle_deg"]),
                x1=float(row["x1"]), y1=float(row["y1"]),
                x2=float(row["x2"]), y2=float(row["y2"]),
                noise_level=float(row["noise_level"]),
                length=float(row["length"]),
                width=int(row["width"]),
                color_r=int(row["color_r"]), color_g=int(row["color_g"]), color_b=int(row["color_b"]),
                color_name=row["color_name"],
            )
            for row in reader
        ]


def generate_dataset(cfg: GenConfig) -> Path:
    """Write ``cfg.n_images`` PNGs under ``output_dir/images`` and ``manifest.csv``.

    Returns the manifest path. Output is a pure function of ``cfg``.
    """
    out = Path(cfg.output_dir)
    indices = list(range(cfg.n_images))
    records: list[SampleRecord] = []
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        if cfg.workers > 1:
            chunks = [indices[k::cfg.workers] for k in range(cfg.workers)]
            with ProcessPoolExecutor(cfg.workers) as pool:
                parts = list(pool.map(_write_range, [cfg] * len(chunks), chunks))
            records = sorted((r for p in parts for r in p), key=lambda r: int(r.image_id[5:]))
        else:
            for i in indices:
                records.extend(_write_range(cfg, [i]))
        manifest = out / "manifest.csv"
        write_manifest(records, manifest)
    except OSError as exc:
        raise GenerationError(
            f"I/O failure after {len(records)}/{cfg.n_images} images in {out}: {exc}"
        ) from exc
    return manifest
