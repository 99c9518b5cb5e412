import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linevit.synthgen import SampleRecord
from linevit.targets import (
    TargetValidationError,
    denormalize,
    normalize,
    tasks_for_variant,
)


def record(**kw):
    base = dict(image_id="Image0", angle_deg=180.0, x1=112.0, y1=50.0, x2=150.0, y2=60.0,
                noise_level=0.1, length=40.0, width=3, color_r=255, color_g=0, color_b=128,
                color_name="x")
    base.update(kw)
    return SampleRecord(**base)


@pytest.mark.parametrize("deg,expected", [(180.0, 0.0), (0.0, -1.0), (540.0, 0.0), (360.0, -1.0), (90.0, -0.5)])
def test_angle_map(deg, expected):
    assert normalize(record(angle_deg=deg), "I")["angle"][0, 0] == expected


def test_direct_divisions():
    t = normalize(record(x1=112.0, color_r=255), "IV")
    assert t["coords"][0, 0] == 0.5
    assert t["color"][0, 0] == 1.0
    assert t["noise"][0, 0] == pytest.approx(0.1 / 0.3)
    assert t["width"][0, 0] == 3 / 5
    assert t["length"][0, 0] == 40 / 224


def test_tasks_per_variant():
    assert tasks_for_variant("I") == ("angle", "coords", "noise")
    assert tasks_for_variant("II") == ("angle", "coords", "noise", "length")
    assert tasks_for_variant("III")[-1] == "width"
    assert tasks_for_variant("IV")[-1] == "color"
    assert set(normalize(record(), "I").tasks) == {"angle", "coords", "noise"}


def test_image_size_scaling():
    t = normalize(record(x1=32.0, y1=16.0, x2=10.0, y2=10.0, length=20.0), "II", image_size=64)
    assert t["coords"][0, :2].tolist() == [0.5, 0.25]
    assert t["length"][0, 0] == 20 / 64


@pytest.mark.parametrize("field,kw", [
    ("x1", {"x1": -1.0}),
    ("y2", {"y2": 300.0}),
    ("noise_level", {"noise_level": 0.5}),
    ("angle_deg", {"angle_deg": float("nan")}),
    ("color", {"color_g": 300}),
    ("width", {"width": 7}),
])
def test_validation_names_field(field, kw):
    with pytest.raises(TargetValidationError) as exc:
        normalize(record(**kw), "IV")
    assert exc.value.field == field


def test_inverse_examples():
    fields, clamped = denormalize({"angle": [[0.0], [-1.0]], "coords": np.full((2, 4), 0.5), "noise": [[1.0], [0.0]]}, "I")
    assert fields["angle_deg"].tolist() == [180.0, 0.0]
    assert fields["x1"].tolist() == [112.0, 112.0]
    assert fields["noise_level"].tolist() == [pytest.approx(0.3), 0.0]
    assert not clamped.any()


def test_clamps_and_flags():
    fields, clamped = denormalize(
        {"angle": [[1.2], [0.0]], "coords": [[0.5, 0.5, 0.5, 1.5], [0.1] * 4], "noise": [[0.0], [0.0]]}, "I")
    assert clamped.tolist() == [True, False]
    assert fields["y2"][0] == 224.0
    assert fields["angle_deg"][0] == 0.0  # +1 clamps to 360 which wraps to 0


def test_zero_and_360_alias():
    a = normalize(record(angle_deg=0.0), "I")["angle"]
    b = normalize(record(angle_deg=360.0), "I")["angle"]
    assert a[0, 0] == b[0, 0] == -1.0


def random_records(rng, n):
    color = rng.integers(0, 256, size=(n, 3))
    return [
        SampleRecord(f"Image{i}", float(rng.uniform(0, 360)), float(rng.integers(0, 225)), float(rng.integers(0, 225)),
                     float(rng.uniform(0, 224)), float(rng.uniform(0, 224)), float(rng.choice([0.0, 0.1, 0.2, 0.3])),
                     float(rng.uniform(20, 100)), int(rng.integers(1, 6)), *map(int, color[i]), "c")
        for i in range(n)
    ]


def test_round_trip_10k():
    rng = np.random.default_rng(0)
    recs = random_records(rng, 10_000)
    fields, clamped = denormalize(normalize(recs, "IV"), "IV")
    assert not clamped.any()
    for name, back in fields.items():
        orig = np.array([getattr(r, name) for r in recs], dtype=float)
        if name == "angle_deg":
            err = np.abs((back - orig + 180) % 360 - 180)
        else:
            err = np.abs(back - orig)
        assert err.max() <= 1e-6, name


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0, 359.999), b=st.floats(0, 359.999))
def test_angle_monotone(a, b):
    ta = normalize(record(angle_deg=a), "I")["angle"][0, 0]
    tb = normalize(record(angle_deg=b), "I")["angle"][0, 0]
    if a < b:
        assert ta <= tb
    assert -1.0 <= ta < 1.0
