import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srt2map.volgrid import (
    FWHM_TO_SIGMA,
    Grid3D,
    NiftiFormatError,
    Volume3D,
    gaussian_blur_axis,
    read_volume,
    trilinear_sample,
    write_volume,
)


def _vol(dims=(4, 5, 6), spacing=(1.0, 1.0, 1.0), seed=0):
    g = Grid3D.centered(dims, spacing)
    return Volume3D(g, np.random.default_rng(seed).random(dims))


def test_grid_rejects_bad_geometry():
    with pytest.raises(ValueError):
        Grid3D((0, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        Grid3D((2, 2, 2), (1, -1, 1))
    with pytest.raises(ValueError):
        Grid3D((2, 2, 2), (1, 1, 1), axes=((1, 0, 0), (1, 0, 0), (0, 0, 1)))


def test_volume_rejects_nonfinite_and_wrong_size():
    g = Grid3D((2, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        Volume3D(g, np.full(8, np.nan))
    with pytest.raises(ValueError):
        Volume3D(g, np.zeros(7))


def test_flat_order_is_x_fastest():
    g = Grid3D((2, 3, 4), (1, 1, 1))
    v = Volume3D(g, np.arange(24.0).reshape(2, 3, 4))
    flat = v.flat()
    assert flat[1] == v.data[1, 0, 0]
    assert flat[2] == v.data[0, 1, 0]
    assert np.array_equal(Volume3D.from_flat(g, flat).data, v.data)


class TestTrilinear:
    def test_voxel_center_is_identity(self):
        v = _vol()
        for idx in [(0, 0, 0), (1, 2, 3), (3, 4, 5)]:
            p = v.grid.index_to_world(idx)
            assert trilinear_sample(v, p) == pytest.approx(v.data[idx], abs=1e-12)

    def test_midpoint(self):
        g = Grid3D((2, 1, 1), (2.0, 1.0, 1.0))
        v = Volume3D(g, np.array([0.0, 10.0]))
        assert trilinear_sample(v, g.index_to_world([0.5, 0, 0])) == pytest.approx(5.0)

    def test_clamp_far_outside_constant(self):
        g = Grid3D.centered((3, 3, 3), 1.5)
        v = Volume3D(g, np.full((3, 3, 3), 7.25))
        assert trilinear_sample(v, [1e4, -1e4, 55.0]) == pytest.approx(7.25)

    @settings(max_examples=50, deadline=None)
    @given(
        coef=st.tuples(*[st.floats(-5, 5) for _ in range(4)]),
        frac=st.tuples(*[st.floats(0, 1) for _ in range(3)]),
    )
    def test_exact_on_affine_fields(self, coef, frac):
        dims = (5, 4, 3)
        g = Grid3D((5, 4, 3), (1.1, 0.7, 2.0), origin=(3.0, -1.0, 2.0),
                   axes=((0, 1, 0), (0, 0, 1), (1, 0, 0)))
        a, b, c, d = coef
        i, j, k = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
        v = Volume3D(g, a * i + b * j + c * k + d)
        idx = np.array(frac) * (np.array(dims) - 1)
        expected = a * idx[0] + b * idx[1] + c * idx[2] + d
        got = trilinear_sample(v, g.index_to_world(idx))
        assert got == pytest.approx(expected, rel=1e-9, abs=1e-9)


class TestGaussianBlur:
    def test_zero_fwhm_identity(self):
        v = _vol()
        assert np.array_equal(gaussian_blur_axis(v, 1, 0.0).data, v.data)

    def test_constant_preserved(self):
        g = Grid3D.centered((6, 6, 6), (1.0, 1.5, 2.0))
        v = Volume3D(g, np.full((6, 6, 6), 3.5))
        for ax in range(3):
            np.testing.assert_allclose(gaussian_blur_axis(v, ax, 4.0).data, 3.5, rtol=1e-14)

    def test_impulse_response_matches_direct_kernel(self):
        # Independent kernel: evaluate the Gaussian at integer offsets within 4 sigma, normalize.
        spacing = 1.25
        fwhm = 2 * spacing
        n = 21
        g = Grid3D((n, 1, 1), (spacing, 1, 1))
        data = np.zeros((n, 1, 1))
        data[n // 2] = 1.0
        out = gaussian_blur_axis(Volume3D(g, data), 0, fwhm).data[:, 0, 0]
        sigma_mm = fwhm / FWHM_TO_SIGMA
        taps = {}
        for off in range(-n, n + 1):
            if abs(off * spacing) <= 4 * sigma_mm:
                taps[off] = np.exp(-0.5 * (off * spacing / sigma_mm) ** 2)
        total = sum(taps.values())
        expected = np.zeros(n)
        for off, w in taps.items():
            expected[n // 2 + off] = w / total
        np.testing.assert_allclose(out, expected, rtol=1e-13, atol=1e-16)

    def test_axes_commute(self):
        v = _vol((7, 6, 5), (1.0, 1.3, 0.8), seed=3)
        ab = gaussian_blur_axis(gaussian_blur_axis(v, 0, 2.5), 2, 3.0).data
        ba = gaussian_blur_axis(gaussian_blur_axis(v, 2, 3.0), 0, 2.5).data
        np.testing.assert_allclose(ab, ba, rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), axis=st.integers(0, 2), fwhm=st.floats(0.1, 8.0))
    def test_no_new_extrema(self, seed, axis, fwhm):
        v = _vol((6, 5, 4), seed=seed)
        out = gaussian_blur_axis(v, axis, fwhm).data
        assert out.max() <= v.data.max() + 1e-12
        assert out.min() >= v.data.min() - 1e-12


class TestNifti:
    def test_round_trip_bit_exact(self, tmp_path):
        g = Grid3D.centered((4, 4, 4), (1.13, 1.13, 3.0))
        data = (np.arange(64, dtype=np.float32) * np.float32(0.37) - 5).reshape(4, 4, 4)
        v = Volume3D(g, data)
        write_volume(v, tmp_path / "v.nii")
        back = read_volume(tmp_path / "v.nii")
        assert back.grid.dims == (4, 4, 4)
        assert back.data.dtype == np.float32
        assert np.array_equal(back.data.view(np.uint32), data.view(np.uint32))
        np.testing.assert_allclose(back.grid.spacing, np.float32([1.13, 1.13, 3.0]), rtol=0, atol=0)
        np.testing.assert_allclose(back.grid.origin, g.origin, atol=1e-5)
        # rewriting the read volume reproduces the file byte for byte
        write_volume(back, tmp_path / "w.nii")
        assert (tmp_path / "v.nii").read_bytes() == (tmp_path / "w.nii").read_bytes()

    def test_header_layout(self, tmp_path):
        g = Grid3D((2, 3, 4), (1.0, 2.0, 3.0), origin=(5.0, 6.0, 7.0))
        write_volume(Volume3D.zeros(g), tmp_path / "v.nii")
        raw = (tmp_path / "v.nii").read_bytes()
        assert len(raw) == 352 + 4 * 24
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        assert raw[344:348] == b"n+1\x00"
        assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 2, 3, 4)
        assert struct.unpack_from("<hh", raw, 70) == (16, 32)
        assert struct.unpack_from("<f", raw, 108)[0] == 352.0
        assert struct.unpack_from("<h", raw, 254)[0] == 1
        assert struct.unpack_from("<4f", raw, 280) == (1.0, 0.0, 0.0, 5.0)

    def test_oriented_axes_survive(self, tmp_path):
        axes = ((0.0, 1.0, 0.0), (0.0, 0.0, -1.0), (-1.0, 0.0, 0.0))
        g = Grid3D((3, 2, 2), (1.1, 1.2, 1.3), origin=(1.0, 2.0, 3.0), axes=axes)
        write_volume(Volume3D.zeros(g), tmp_path / "v.nii")
        back = read_volume(tmp_path / "v.nii").grid
        np.testing.assert_allclose(back.axes, axes, atol=1e-12)

    @pytest.mark.parametrize(
        "offset,fmt,value,field",
        [
            (344, "4s", b"ni1\x00", "magic"),
            (70, "<h", 4, "datatype"),
            (40, "<h", 4, "dim"),
            (0, "<i", 540, "sizeof_hdr"),
            (112, "<f", 2.0, "scl_slope"),
        ],
    )
    def test_malformed_header_names_field(self, tmp_path, offset, fmt, value, field):
        p = tmp_path / "v.nii"
        write_volume(_vol((2, 2, 2)), p)
        raw = bytearray(p.read_bytes())
        struct.pack_into(fmt, raw, offset, value)
        p.write_bytes(bytes(raw))
        with pytest.raises(NiftiFormatError) as exc:
            read_volume(p)
        assert exc.value.field == field
