"""Regression targets: physical line properties <-> unit-range model targets.

Scales: angle ``(deg mod 360) / 180 - 1``; coordinates and length divided by
the image size; noise level by 0.3; width by 5; colour channels by 255.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .synthgen import REFERENCE_SIZE, DatasetVariant, SampleRecord, get_variant

TASK_DIMS = {"angle": 1, "coords": 4, "noise": 1, "length": 1, "width": 1, "color": 3}
NOISE_SCALE = 0.3
WIDTH_SCALE = 5.0
COLOR_SCALE = 255.0


class TargetValidationError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def tasks_for_variant(variant: DatasetVariant | str) -> tuple[str, ...]:
    v = get_variant(variant)
    tasks = ["angle", "coords", "noise"]
    if v.vary_length:
        tasks.append("length")
    if v.vary_width:
        tasks.append("width")
    if v.vary_color:
        tasks.append("color")
    return tuple(tasks)


@dataclass
class NormalizedTargets:
    """Per-task target arrays, each of shape ``(n, dim)``."""

    values: dict[str, np.ndarray]

    def __getitem__(self, task: str) -> np.ndarray:
        return self.values[task]

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(self.values)


def _check_range(name: str, arr: np.ndarray, lo: float, hi: float) -> None:
    if not np.all(np.isfinite(arr)):
        raise TargetValidationError(name, "non-finite value")
    if np.any(arr < lo) or np.any(arr > hi):
        bad = arr[(arr < lo) | (arr > hi)].ravel()[0]
        raise TargetValidationError(name, f"value {bad!r} outside [{lo}, {hi}]")


def _column(records: Sequence[SampleRecord], attr: str) -> np.ndarray:
    return np.array([getattr(r, attr) for r in records], dtype=np.float64)


def normalize(
    records: SampleRecord | Sequence[SampleRecord],
    variant: DatasetVariant | str,
    image_size: int = REFERENCE_SIZE,
) -> NormalizedTargets:
    if isinstance(records, SampleRecord):
        records = [records]
    tasks = tasks_for_variant(variant)
    size = float(image_size)
    angle = _column(records, "angle_deg")
    _check_range("angle_deg", angle, -np.inf, np.inf)
    coords = np.stack([_column(records, a) for a in ("x1", "y1", "x2", "y2")], axis=1)
    for j, a in enumerate(("x1", "y1", "x2", "y2")):
        _check_range(a, coords[:, j], 0.0, size)
    noise = _column(records, "noise_level")
    _check_range("noise_level", noise, 0.0, NOISE_SCALE)

    out = {
        "angle": (np.mod(angle, 360.0) / 180.0 - 1.0)[:, None],
        "coords": coords / size,
        "noise": (noise / NOISE_SCALE)[:, None],
    }
    if "length" in tasks:
        length = _column(records, "length")
        _check_range("length", length, 0.0, size)
        out["length"] = (length / size)[:, None]
    if "width" in tasks:
        width = _column(records, "width")
        _check_range("width", width, 0.0, WIDTH_SCALE)
        out["width"] = (width / WIDTH_SCALE)[:, None]
    if "color" in tasks:
        color = np.stack([_column(records, a) for a in ("color_r", "color_g", "color_b")], axis=1)
        _check_range("color", color, 0.0, COLOR_SCALE)
        out["color"] = color / COLOR_SCALE
    return NormalizedTargets(out)


TASK_RANGES = {
    "angle": (-1.0, 1.0),
    "coords": (0.0, 1.0),
    "noise": (0.0, 1.0),
    "length": (0.0, 1.0),
    "width": (0.0, 1.0),
    "color": (0.0, 1.0),
}


def denormalize(
    targets: NormalizedTargets | Mapping[str, np.ndarray],
    variant: DatasetVariant | str,
    image_size: int = REFERENCE_SIZE,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Map unit-range values back to physical fields.

    Returns ``(fields, clamped)`` where ``fields`` maps manifest column names
    to 1-D arrays and ``clamped`` is a per-sample flag set when any task value
    had to be clamped into its range first.
    """
    values = targets.values if isinstance(targets, NormalizedTargets) else dict(targets)
    size = float(image_size)
    tasks = tasks_for_variant(variant)
    clamped = None
    fixed = {}
    for task in tasks:
        if task not in values:
            raise KeyError(f"missing task {task!r}")
        arr = np.asarray(values[task], dtype=np.float64).reshape(-1, TASK_DIMS[task])
        lo, hi = TASK_RANGES[task]
        flag = np.any((arr < lo) | (arr > hi), axis=1)
        clamped = flag if clamped is None else clamped | flag
        fixed[task] = np.clip(arr, lo, hi)

    fields = {"angle_deg": np.mod((fixed["angle"][:, 0] + 1.0) * 180.0, 360.0)}
    for j, name in enumerate(("x1", "y1", "x2", "y2")):
        fields[name] = fixed["coords"][:, j] * size
    fields["noise_level"] = fixed["noise"][:, 0] * NOISE_SCALE
    if "length" in fixed:
        fields["length"] = fixed["length"][:, 0] * size
    if "width" in fixed:
        fields["width"] = fixed["width"][:, 0] * WIDTH_SCALE
    if "color" in fixed:
        for j, name in enumerate(("color_r", "color_g", "color_b")):
            fields[name] = fixed["color"][:, j] * COLOR_SCALE
    return fields, clamped


def stack_targets(records: Iterable[SampleRecord], variant, image_size: int = REFERENCE_SIZE) -> dict[str, np.ndarray]:
    return normalize(list(records), variant, image_size).values
