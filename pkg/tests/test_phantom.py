import itertools

import numpy as np
import pytest

from srt2map.phantom import (
    PhantomSpec,
    Vial,
    default_phantom,
    from_config,
    rasterize,
    to_config,
)
from srt2map.volgrid import Grid3D


def test_default_phantom_reference_values():
    spec = default_phantom()
    assert [v.label for v in spec.vials] == ["a", "b", "c"]
    assert spec.vials[0].t2 == 428.3
    assert spec.vials[1].t2 == 258.4
    assert spec.vials[2].t2 == 186.1
    assert all(v.m0 == 1000.0 and v.radius == 8.0 for v in spec.vials)
    assert (spec.background_t2, spec.background_m0) == (50.0, 100.0)
    assert spec.field_of_view == (96.0, 96.0) and spec.plate_thickness == 10.0


def test_default_layout_non_overlapping():
    vials = default_phantom().vials
    for v, w in itertools.combinations(vials, 2):
        d = np.hypot(*np.subtract(v.center, w.center))
        assert d >= 24.0 - 1e-12
        assert d > v.radius + w.radius


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        Vial((0, 0), 0.0, 100.0, 1.0)
    with pytest.raises(ValueError):
        PhantomSpec((Vial((0, 0), 8, 100, 1, "a"), Vial((10, 0), 8, 100, 1, "b")))
    with pytest.raises(ValueError):
        PhantomSpec((Vial((45, 0), 8, 100, 1, "a"),))


def test_interior_and_background_voxels():
    spec = default_phantom()
    g = Grid3D.centered((16, 4, 16), 1.0, center=(-24.0, 0.0, 0.0))
    m0, t2 = rasterize(spec, g, supersample=4)
    # voxel at the vial axis: all corners well inside
    i, k = 7, 7
    assert t2.data[i, 1, k] == 428.3
    assert m0.data[i, 1, k] == 1000.0
    gb = Grid3D.centered((3, 3, 3), 1.0, center=(0.0, 20.0, 40.0))
    m0b, t2b = rasterize(spec, gb, 2)
    assert np.all(t2b.data == 50.0) and np.all(m0b.data == 100.0)


def test_boundary_voxel_matches_subsample_count():
    spec = PhantomSpec((Vial((0.0, 0.0), 8.0, 200.0, 1000.0, "a"),), background_m0=100.0, background_t2=50.0)
    # voxel centered exactly on the vial rim along x: half its x-extent lies inside
    g = Grid3D((1, 1, 1), (1.0, 1.0, 1.0), origin=(8.0, 0.0, 0.0))
    s = 4
    m0, t2 = rasterize(spec, g, s)
    inside = 0
    for a, b, c in itertools.product(range(s), repeat=3):
        x = 8.0 + (a + 0.5) / s - 0.5
        y = (b + 0.5) / s - 0.5
        z = (c + 0.5) / s - 0.5
        inside += (x * x + z * z <= 64.0) and abs(y) <= 5.0
    frac = inside / s ** 3
    assert inside == 32
    assert m0.data[0, 0, 0] == pytest.approx(frac * 1000 + (1 - frac) * 100, rel=1e-14)
    assert m0.data[0, 0, 0] == pytest.approx(550.0)
    assert t2.data[0, 0, 0] == pytest.approx(frac * 200 + (1 - frac) * 50, rel=1e-14)


def test_t2_values_are_convex_combinations():
    spec = default_phantom()
    g = Grid3D.centered((40, 12, 24), 2.0)
    m0, t2 = rasterize(spec, g, 3)
    lo = spec.background_t2
    hi = max(v.t2 for v in spec.vials)
    assert t2.data.min() >= lo - 1e-9 and t2.data.max() <= hi + 1e-9
    assert {428.3, 258.4, 186.1, 50.0} <= set(np.unique(t2.data).tolist())


def test_supersample_integral_converges():
    spec = default_phantom()
    g = Grid3D.centered((96, 96, 48), 1.0)
    total = {s: rasterize(spec, g, s)[0].data.sum() for s in (4, 8)}
    assert abs(total[4] - total[8]) / total[8] < 1e-3


def test_supersample_range():
    with pytest.raises(ValueError):
        rasterize(default_phantom(), Grid3D.centered((2, 2, 2), 1.0), 9)


def test_config_round_trip():
    spec = default_phantom()
    assert from_config(to_config(spec)) == spec
    custom = from_config({"phantom.vial.x": "0, 0, 5, 300, 900", "phantom.background_t2": "60"})
    assert [v.label for v in custom.vials] == ["x"]
    assert custom.background_t2 == 60.0
    with pytest.raises(KeyError):
        from_config({"phantom.bogus": "1"})
