"""Oriented voxel grids, 3D scalar volumes, resampling primitives and NIfTI-1 I/O.

Arrays are indexed ``data[i, j, k]`` with ``i`` along the grid's first axis.
On disk the voxel order is x fastest, which is Fortran order for that array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FWHM_TO_SIGMA = 2.3548  # 2*sqrt(2*ln 2), rounded as used throughout
_ORTHO_TOL = 1e-9

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
NIFTI_FLOAT32 = 16


class NiftiFormatError(ValueError):
    """Raised when a file falls outside the supported NIfTI-1 subset."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Grid3D:
    """Voxel grid: ``world = origin + sum_a index[a] * spacing[a] * axes[a]``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axes: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        axes = tuple(tuple(float(c) for c in a) for a in self.axes)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3 or len(axes) != 3:
            raise ValueError("Grid3D needs three dims, spacings, origin coordinates and axes")
        if any(d < 1 for d in dims):
            raise ValueError(f"grid dims must be >= 1, got {dims}")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"grid spacing must be > 0, got {spacing}")
        gram = np.asarray(axes) @ np.asarray(axes).T
        if np.max(np.abs(gram - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("grid axes must be orthonormal")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def centered(cls, dims, spacing, center=(0.0, 0.0, 0.0)) -> "Grid3D":
        """Axis-aligned grid whose voxel centers are symmetric about ``center``."""
        dims = tuple(int(d) for d in dims)
        if np.isscalar(spacing):
            spacing = (float(spacing),) * 3
        origin = tuple(c - 0.5 * (n - 1) * s for c, n, s in zip(center, dims, spacing))
        return cls(dims, tuple(spacing), origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def affine(self) -> np.ndarray:
        """4x4 voxel-index to world (mm) matrix."""
        a = np.eye(4)
        a[:3, :3] = np.asarray(self.axes).T * np.asarray(self.spacing)
        a[:3, 3] = self.origin
        return a

    @property
    def center(self) -> np.ndarray:
        return self.index_to_world((np.asarray(self.dims) - 1) / 2.0)

    def extent(self, axis: int) -> float:
        """Physical length covered by the voxels along ``axis`` (voxel edges included)."""
        return self.dims[axis] * self.spacing[axis]

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        a = self.affine
        return idx @ a[:3, :3].T + a[:3, 3]

    def world_to_index(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        rot = np.asarray(self.axes)
        return ((p - np.asarray(self.origin)) @ rot.T) / np.asarray(self.spacing)

    def same_as(self, other: "Grid3D", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
            and np.allclose(self.axes, other.axes, rtol=0, atol=tol)
        )


@dataclass(frozen=True)
class Volume3D:
    """Scalar field sampled on a :class:`Grid3D`. The data array is read-only."""

    grid: Grid3D
    data: np.ndarray
    unit: str = ""

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.dtype.kind not in "fiub":
            raise TypeError(f"unsupported volume dtype {data.dtype}")
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        if data.size != self.grid.size:
            raise ValueError(f"data has {data.size} values, grid needs {self.grid.size}")
        data = data.reshape(self.grid.dims)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid: Grid3D, unit: str = "") -> "Volume3D":
        return cls(grid, np.zeros(grid.dims), unit)

    @classmethod
    def from_flat(cls, grid: Grid3D, flat, unit: str = "") -> "Volume3D":
        """Build from a flat array in on-disk order (x fastest)."""
        return cls(grid, np.asarray(flat).reshape(grid.dims, order="F"), unit)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def with_data(self, data, unit: str | None = None) -> "Volume3D":
        return Volume3D(self.grid, data, self.unit if unit is None else unit)


def _clamped_linear(coord: np.ndarray, n: int):
    c = np.clip(coord, 0.0, n - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = c - i0
    return i0, i1, w1


def trilinear_weights(grid: Grid3D, points) -> tuple[np.ndarray, np.ndarray]:
    """Flat (C-order) voxel indices and weights of trilinear interpolation.

    Returns arrays of shape ``(n_points, 8)``. Out-of-grid coordinates are
    clamped to the edge.
    """
    idx = np.atleast_2d(grid.world_to_index(points))
    per_axis = [_clamped_linear(idx[:, a], grid.dims[a]) for a in range(3)]
    nx, ny, nz = grid.dims
    cols, weights = [], []
    for bx in (0, 1):
        ix = per_axis[0][bx]
        wx = per_axis[0][2] if bx else 1.0 - per_axis[0][2]
        for by in (0, 1):
            iy = per_axis[1][by]
            wy = per_axis[1][2] if by else 1.0 - per_axis[1][2]
            for bz in (0, 1):
                iz = per_axis[2][bz]
                wz = per_axis[2][2] if bz else 1.0 - per_axis[2][2]
                cols.append((ix * ny + iy) * nz + iz)
                weights.append(wx * wy * wz)
    return np.stack(cols, axis=1), np.stack(weights, axis=1)


def trilinear_sample(vol: Volume3D, p) -> float | np.ndarray:
    """Trilinear interpolation at physical point(s) ``p`` (mm), clamp-to-edge."""
    p = np.asarray(p, dtype=float)
    cols, w = trilinear_weights(vol.grid, p.reshape(-1, 3))
    values = np.sum(vol.data.ravel()[cols] * w, axis=1)
    if p.ndim == 1:
        return float(values[0])
    return values.reshape(p.shape[:-1])


def gaussian_kernel(fwhm: float, spacing: float) -> np.ndarray:
    """Normalized discrete Gaussian taps on a grid of the given spacing.

    The kernel is truncated at four standard deviations; ``fwhm == 0`` yields
    the single tap ``[1.0]``.
    """
    if fwhm < 0:
        raise ValueError("fwhm must be >= 0")
    if fwhm == 0:
        return np.ones(1)
    sigma = fwhm / FWHM_TO_SIGMA / spacing
    radius = int(np.floor(4.0 * sigma))
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur_matrix(n: int, fwhm: float, spacing: float) -> np.ndarray:
    """Dense ``n x n`` matrix of Gaussian convolution with clamp-to-edge boundary."""
    kernel = gaussian_kernel(fwhm, spacing)
    radius = kernel.size // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for t, w in zip(range(-radius, radius + 1), kernel):
        np.add.at(mat, (rows, np.clip(rows + t, 0, n - 1)), w)
    return mat


def mode_product(x: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Multiply ``x`` by ``mat`` along ``axis`` (``y[.., i, ..] = sum_j mat[i, j] x[.., j, ..]``)."""
    return np.moveaxis(np.tensordot(mat, x, axes=(1, axis)), 0, axis)


def gaussian_blur_axis(vol: Volume3D, axis: int, fwhm_mm: float) -> Volume3D:
    """1D Gaussian blur along one grid axis (clamp-to-edge, +-4 sigma support)."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if fwhm_mm == 0:
        return vol
    mat = blur_matrix(vol.grid.dims[axis], fwhm_mm, vol.grid.spacing[axis])
    return vol.with_data(mode_product(np.asarray(vol.data, dtype=float), mat, axis))


# --- NIfTI-1 -----------------------------------------------------------------

_HDR = struct.Struct("<i10s18sihcc8h3fhhhh8ffffhccffffii80s24shh6f4f4f4f16s4s")


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    return u @ vt


def write_volume(vol: Volume3D, path) -> None:
    """Write ``vol`` as single-file little-endian float32 NIfTI-1."""
    g = vol.grid
    aff = g.affine
    dim = (3, *g.dims, 1, 1, 1, 1)
    pixdim = (1.0, *g.spacing, 0.0, 0.0, 0.0, 0.0)
    fields = (
        NIFTI_HEADER_SIZE, b"", b"", 0, 0, b"\x00", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0, NIFTI_FLOAT32, 32, 0,
        *pixdim,
        float(NIFTI_VOX_OFFSET), 1.0, 0.0,
        0, b"\x00", b"\x00",
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *aff[0], *aff[1], *aff[2],
        b"", b"n+1\x00",
    )
    header = _HDR.pack(*fields)
    payload = np.asarray(vol.flat(), dtype="<f4").tobytes()
    Path(path).write_bytes(header + b"\x00" * 4 + payload)


def read_volume(path, unit: str = "") -> Volume3D:
    """Read a file written in the supported NIfTI-1 subset.

    Raises
    ------
    NiftiFormatError
        If the header falls outside the subset; the error names the field.
    """
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise NiftiFormatError("sizeof_hdr", f"file too short ({len(raw)} bytes)")
    h = _HDR.unpack_from(raw)
    if h[0] != NIFTI_HEADER_SIZE:
        raise NiftiFormatError("sizeof_hdr", f"expected 348 little-endian, got {h[0]}")
    if h[-1] != b"n+1\x00":
        raise NiftiFormatError("magic", f"expected b'n+1\\x00', got {h[-1]!r}")
    dim = h[7:15]
    datatype, bitpix = h[19], h[20]
    pixdim = h[22:30]
    vox_offset, scl_slope, scl_inter = h[30:33]
    sform_code = h[45]
    srow = np.asarray(h[52:64], dtype=float).reshape(3, 4)
    if dim[0] != 3:
        raise NiftiFormatError("dim", f"expected dim[0] == 3, got {dim[0]}")
    if datatype != NIFTI_FLOAT32 or bitpix != 32:
        raise NiftiFormatError("datatype", f"only float32 (16/32) supported, got {datatype}/{bitpix}")
    if scl_slope not in (0.0, 1.0):
        raise NiftiFormatError("scl_slope", f"must be 0 or 1, got {scl_slope}")
    if scl_inter != 0.0:
        raise NiftiFormatError("scl_inter", f"must be 0, got {scl_inter}")
    if int(vox_offset) < NIFTI_VOX_OFFSET:
        raise NiftiFormatError("vox_offset", f"must be >= 352, got {vox_offset}")
    dims = tuple(int(d) for d in dim[1:4])
    spacing = tuple(float(np.float32(p)) for p in pixdim[1:4])
    if any(d < 1 for d in dims) or any(not s > 0 for s in spacing):
        raise NiftiFormatError("dim", f"invalid dims {dims} or spacing {spacing}")
    if sform_code > 0:
        cols = srow[:, :3] / np.asarray(spacing)
        axes = _orthonormalize(cols).T
        origin = srow[:, 3]
    else:
        axes, origin = np.eye(3), np.zeros(3)
    n = int(np.prod(dims))
    start = int(vox_offset)
    if len(raw) < start + 4 * n:
        raise NiftiFormatError("data", f"expected {4 * n} bytes of voxel data")
    flat = np.frombuffer(raw, dtype="<f4", count=n, offset=start).astype(np.float32)
    grid = Grid3D(dims, spacing, tuple(origin), tuple(map(tuple, axes)))
    return Volume3D.from_flat(grid, flat, unit)


def read_sidecar(path) -> dict[str, str]:
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_sidecar(path, values: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
