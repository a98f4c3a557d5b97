"""Forward model of a multi-slice acquisition: HR (m0, t2) volumes to LR slice stacks.

One stack is ``H = D B M``: per-slice rigid motion ``M`` (identity unless
given), Gaussian slice-profile blur ``B`` along the slice axis and the
downsampling ``D`` (box average in-plane, slice-center sampling through
plane). Without motion ``H`` is separable, so it is stored as one small
dense matrix per axis and applied as three mode products.

LR data arrays keep the HR axis order: ``data.shape[slice_axis]`` is the
slice count and the two remaining axes are in-plane, in increasing order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .volgrid import (
    Grid3D,
    Volume3D,
    blur_matrix,
    mode_product,
    read_sidecar,
    read_volume,
    trilinear_weights,
    write_sidecar,
    write_volume,
)


@dataclass(frozen=True)
class Orientation:
    label: str
    slice_axis: int


ORIENTATIONS = {
    "sagittal": Orientation("sagittal", 0),
    "coronal": Orientation("coronal", 1),
    "axial": Orientation("axial", 2),
}


def orientation(label: str) -> Orientation:
    try:
        return ORIENTATIONS[label]
    except KeyError:
        raise ValueError(f"unknown orientation {label!r}; expected one of {sorted(ORIENTATIONS)}") from None


@dataclass(frozen=True)
class SeriesGeometry:
    """Geometry of one slice stack. ``matrix`` follows :attr:`inplane_axes` order."""

    in_plane_spacing: tuple[float, float]
    slice_thickness: float
    gap_fraction: float
    matrix: tuple[int, int]
    n_slices: int
    orientation: Orientation
    slice_fwhm: float | None = None  # None: equal to slice_thickness

    def __post_init__(self):
        fwhm = self.slice_thickness if self.slice_fwhm is None else self.slice_fwhm
        object.__setattr__(self, "slice_fwhm", float(fwhm))
        object.__setattr__(self, "in_plane_spacing", tuple(float(s) for s in self.in_plane_spacing))
        object.__setattr__(self, "matrix", tuple(int(m) for m in self.matrix))
        if self.gap_fraction < 0:
            raise ValueError("gap_fraction must be >= 0")
        if not self.slice_thickness > 0 or any(not s > 0 for s in self.in_plane_spacing):
            raise ValueError("slice thickness and in-plane spacing must be > 0")
        if self.n_slices < 1 or any(m < 1 for m in self.matrix):
            raise ValueError("n_slices and matrix must be >= 1")

    @classmethod
    def covering(
        cls,
        hr_grid: Grid3D,
        orient: Orientation | str,
        in_plane_spacing=(1.13, 1.13),
        slice_thickness: float = 3.0,
        gap_fraction: float = 0.1,
        slice_fwhm: float | None = None,
        n_slices: int | None = None,
    ) -> "SeriesGeometry":
        """Stack whose field of view covers ``hr_grid``.

        The slice count defaults to the smallest odd number whose stack covers
        the grid, so one slice is centered on the grid center.
        """
        if isinstance(orient, str):
            orient = orientation(orient)
        s = orient.slice_axis
        a0, a1 = (a for a in range(3) if a != s)
        matrix = tuple(
            max(1, math.ceil(hr_grid.extent(a) / sp - 1e-9)) for a, sp in zip((a0, a1), in_plane_spacing)
        )
        if n_slices is None:
            pitch = slice_thickness * (1 + gap_fraction)
            n_slices = max(1, math.ceil(hr_grid.extent(s) / pitch - 1e-9))
            if n_slices % 2 == 0:
                n_slices += 1
        return cls(tuple(in_plane_spacing), slice_thickness, gap_fraction, matrix, n_slices, orient, slice_fwhm)

    @property
    def slice_axis(self) -> int:
        return self.orientation.slice_axis

    @property
    def inplane_axes(self) -> tuple[int, int]:
        a0, a1 = (a for a in range(3) if a != self.slice_axis)
        return a0, a1

    @property
    def slice_spacing(self) -> float:
        return self.slice_thickness * (1 + self.gap_fraction)

    @property
    def fwhm(self) -> float:
        return self.slice_fwhm

    def lr_shape(self) -> tuple[int, int, int]:
        shape = [0, 0, 0]
        shape[self.slice_axis] = self.n_slices
        for a, m in zip(self.inplane_axes, self.matrix):
            shape[a] = m
        return tuple(shape)

    def lr_spacing(self) -> tuple[float, float, float]:
        spacing = [0.0, 0.0, 0.0]
        spacing[self.slice_axis] = self.slice_spacing
        for a, sp_ in zip(self.inplane_axes, self.in_plane_spacing):
            spacing[a] = sp_
        return tuple(spacing)

    def lr_grid(self, hr_grid: Grid3D) -> Grid3D:
        """LR voxel grid sharing the HR axes and center."""
        shape, spacing = self.lr_shape(), self.lr_spacing()
        rot = np.asarray(hr_grid.axes)
        half = (np.asarray(shape) - 1) / 2 * np.asarray(spacing)
        origin = hr_grid.center - half @ rot
        return Grid3D(shape, spacing, tuple(origin), hr_grid.axes)


@dataclass(frozen=True)
class AcquisitionProtocol:
    te_list: tuple[float, ...]
    geometries: tuple[SeriesGeometry, ...]
    noise_sigma: float = 0.0
    kspace_truncation: float = 1.0
    first_echo_offset: float = 0.1
    n_offset_echoes: int = 1
    seed: int = 0
    tr: float = 1200.0

    def __post_init__(self):
        te = tuple(float(t) for t in self.te_list)
        object.__setattr__(self, "te_list", te)
        object.__setattr__(self, "geometries", tuple(self.geometries))
        if any(t <= 0 for t in te) or any(b <= a for a, b in zip(te, te[1:])):
            raise ValueError(f"te_list must be strictly increasing and > 0, got {te}")
        if not 0 < self.kspace_truncation <= 1:
            raise ValueError("kspace_truncation must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class RigidMotion:
    """``p -> R (p - c) + c + t`` with ``c`` the HR grid center."""

    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return np.array_equal(np.asarray(self.rotation), np.eye(3)) and not np.any(self.translation)

    @classmethod
    def from_euler(cls, angles_deg, translation=(0.0, 0.0, 0.0)) -> "RigidMotion":
        ax, ay, az = np.deg2rad(angles_deg)
        rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
        ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
        rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
        rot = rz @ ry @ rx
        return cls(tuple(map(tuple, rot)), tuple(float(t) for t in translation))


def ideal_signal(m0, t2, te):
    """Mono-exponential spin-echo signal ``m0 * exp(-te / t2)``."""
    return m0 * np.exp(-np.asarray(te, dtype=float) / t2)


def te_schedule(n: int, te_min: float = 90.0, te_max: float = 298.0) -> list[float]:
    """``n`` echo times uniformly spaced over ``[te_min, te_max]``."""
    if n < 2:
        raise ValueError(f"need at least 2 echo times, got {n}")
    if not te_max > te_min:
        raise ValueError("te_max must exceed te_min")
    step = (te_max - te_min) / (n - 1)
    return [te_min + i * step for i in range(n)]


def box_average_matrix(n_lr: int, sp_lr: float, n_hr: int, sp_hr: float) -> np.ndarray:
    """Area-weighted average of HR cells over each LR cell, both centered on 0.

    Parts of an LR cell beyond the HR extent are charged to the edge HR cell.
    """
    c_lr = (np.arange(n_lr) - (n_lr - 1) / 2) * sp_lr
    lo, hi = c_lr - sp_lr / 2, c_lr + sp_lr / 2
    c_hr = (np.arange(n_hr) - (n_hr - 1) / 2) * sp_hr
    b_lo, b_hi = c_hr - sp_hr / 2, c_hr + sp_hr / 2
    b_lo[0], b_hi[-1] = -np.inf, np.inf
    overlap = np.minimum(hi[:, None], b_hi[None, :]) - np.maximum(lo[:, None], b_lo[None, :])
    return np.clip(overlap, 0.0, None) / sp_lr


def slice_sampling_matrix(n_slices: int, pitch: float, n_hr: int, sp_hr: float) -> np.ndarray:
    """Linear interpolation of HR samples at slice centers, clamp-to-edge."""
    pos = (np.arange(n_slices) - (n_slices - 1) / 2) * pitch / sp_hr + (n_hr - 1) / 2
    pos = np.clip(pos, 0.0, n_hr - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n_hr - 1)
    i1 = np.minimum(i0 + 1, n_hr - 1)
    w = pos - i0
    mat = np.zeros((n_slices, n_hr))
    rows = np.arange(n_slices)
    np.add.at(mat, (rows, i0), 1.0 - w)
    np.add.at(mat, (rows, i1), w)
    return mat


def _motion_matrix(hr_grid: Grid3D, motion: RigidMotion) -> sp.csr_matrix:
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in hr_grid.dims], indexing="ij"), -1).reshape(-1, 3)
    pts = hr_grid.index_to_world(idx)
    c = hr_grid.center
    moved = (pts - c) @ np.asarray(motion.rotation).T + c + np.asarray(motion.translation)
    cols, w = trilinear_weights(hr_grid, moved)
    rows = np.repeat(np.arange(hr_grid.size), 8)
    return sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(hr_grid.size, hr_grid.size))


class ForwardOperator:
    """Linear map from an HR grid to one LR stack, with its exact transpose."""

    def __init__(self, hr_grid: Grid3D, geometry: SeriesGeometry, motion=None):
        self.hr_grid = hr_grid
        self.geometry = geometry
        g = geometry
        s = g.slice_axis
        mats = [None, None, None]
        for a, m, sp_ in zip(g.inplane_axes, g.matrix, g.in_plane_spacing):
            mats[a] = box_average_matrix(m, sp_, hr_grid.dims[a], hr_grid.spacing[a])
        blur = blur_matrix(hr_grid.dims[s], g.fwhm, hr_grid.spacing[s])
        mats[s] = slice_sampling_matrix(g.n_slices, g.slice_spacing, hr_grid.dims[s], hr_grid.spacing[s]) @ blur
        self.axis_matrices = tuple(mats)
        if motion is None:
            motion = ()
        motion = tuple(motion)
        if motion and len(motion) != g.n_slices:
            raise ValueError(f"need one motion per slice ({g.n_slices}), got {len(motion)}")
        self.motion = motion
        self._motion_mats = None
        if motion and not all(m.is_identity for m in motion):
            self._motion_mats = [None if m.is_identity else _motion_matrix(hr_grid, m) for m in motion]

    @property
    def lr_shape(self) -> tuple[int, int, int]:
        return self.geometry.lr_shape()

    @property
    def hr_shape(self) -> tuple[int, int, int]:
        return self.hr_grid.dims

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != self.hr_shape:
            raise ValueError(f"expected HR array of shape {self.hr_shape}, got {x.shape}")
        if self._motion_mats is None:
            y = x
            for a in range(3):
                y = mode_product(y, self.axis_matrices[a], a)
            return y
        s = self.geometry.slice_axis
        out = np.zeros(self.lr_shape)
        for l, mm in enumerate(self._motion_mats):
            xl = x if mm is None else (mm @ x.ravel()).reshape(x.shape)
            row = self.axis_matrices[s][l:l + 1]
            yl = xl
            for a in range(3):
                yl = mode_product(yl, row if a == s else self.axis_matrices[a], a)
            idx = [slice(None)] * 3
            idx[s] = slice(l, l + 1)
            out[tuple(idx)] = yl
        return out

    def backward(self, y: np.ndarray) -> np.ndarray:
        if y.shape != self.lr_shape:
            raise ValueError(f"expected LR array of shape {self.lr_shape}, got {y.shape}")
        if self._motion_mats is None:
            x = y
            for a in range(3):
                x = mode_product(x, self.axis_matrices[a].T, a)
            return x
        s = self.geometry.slice_axis
        out = np.zeros(self.hr_shape)
        for l, mm in enumerate(self._motion_mats):
            idx = [slice(None)] * 3
            idx[s] = slice(l, l + 1)
            xl = y[tuple(idx)]
            row = self.axis_matrices[s][l:l + 1]
            for a in range(3):
                xl = mode_product(xl, row.T if a == s else self.axis_matrices[a].T, a)
            out += xl if mm is None else (mm.T @ xl.ravel()).reshape(self.hr_shape)
        return out


def _check_grid(op: ForwardOperator, grid: Grid3D):
    if not grid.same_as(op.hr_grid):
        raise ValueError("volume grid does not match the operator's HR grid")


def apply(op: ForwardOperator, x: Volume3D) -> np.ndarray:
    """``H x`` as an LR-shaped array (no TE or noise semantics)."""
    _check_grid(op, x.grid)
    return op.forward(np.asarray(x.data, dtype=float))


def adjoint(op: ForwardOperator, y) -> Volume3D:
    """``H^T y`` as a volume on the operator's HR grid."""
    data = y.data if isinstance(y, LRSeries) else y
    return Volume3D(op.hr_grid, op.backward(np.asarray(data, dtype=float)))


@dataclass(frozen=True)
class LRSeries:
    data: np.ndarray
    geometry: SeriesGeometry
    te: float
    series_index: int = 0
    knobs: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.shape != self.geometry.lr_shape():
            raise ValueError(f"series data shape {data.shape} != geometry {self.geometry.lr_shape()}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise ValueError("series data must be finite and >= 0")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def slices(self) -> np.ndarray:
        """Array of shape ``(n_slices, matrix[0], matrix[1])``."""
        return np.moveaxis(self.data, self.geometry.slice_axis, 0)


def _truncate_kspace(img: np.ndarray, fraction: float) -> np.ndarray:
    """Keep the central ``fraction`` of phase-encode lines (slice axis 0), return magnitude."""
    n = img.shape[0]
    keep = max(1, int(round(fraction * n)))
    k = np.fft.fftshift(np.fft.fft2(img))
    mask = np.zeros(n, dtype=bool)
    start = (n - keep + 1) // 2
    mask[start:start + keep] = True
    k[~mask, :] = 0
    return np.abs(np.fft.ifft2(np.fft.ifftshift(k)))


def noise_generator(seed: int, series_index: int, slice_index: int, te: float) -> np.random.Generator:
    """Counter-based stream for one slice; pixel ``p`` consumes draws in raster order."""
    key = np.random.SeedSequence([int(seed) & (2**64 - 1), int(series_index), int(slice_index), int(round(te * 1000))])
    return np.random.Generator(np.random.Philox(key))


def simulate_series(
    m0_vol: Volume3D,
    t2_vol: Volume3D,
    geometry: SeriesGeometry,
    te: float,
    *,
    noise_sigma: float = 0.0,
    kspace_truncation: float = 1.0,
    first_echo_offset: float = 0.0,
    is_first_echo: bool = False,
    seed: int = 0,
    series_index: int = 0,
    operator: ForwardOperator | None = None,
) -> LRSeries:
    """Simulate one LR magnitude stack at echo time ``te``.

    Steps: mono-exponential contrast, optional early-echo gain, ``H``,
    optional phase-encode truncation (Gibbs ringing), then Rician noise
    ``|s + sigma (g1 + i g2)|``.
    """
    if not m0_vol.grid.same_as(t2_vol.grid):
        raise ValueError("m0 and t2 volumes must share one grid")
    if not 0 < kspace_truncation <= 1:
        raise ValueError(f"kspace_truncation must lie in (0, 1], got {kspace_truncation}")
    if operator is None:
        operator = ForwardOperator(m0_vol.grid, geometry)
    elif operator.geometry != geometry:
        raise ValueError("operator geometry differs from the requested geometry")
    contrast = ideal_signal(np.asarray(m0_vol.data, dtype=float), np.asarray(t2_vol.data, dtype=float), te)
    if is_first_echo:
        contrast = contrast * (1.0 + first_echo_offset)
    y = apply(operator, Volume3D(m0_vol.grid, contrast))
    slices = np.moveaxis(y, geometry.slice_axis, 0).copy()
    if kspace_truncation < 1:
        for l in range(slices.shape[0]):
            slices[l] = _truncate_kspace(slices[l], kspace_truncation)
    if noise_sigma > 0:
        for l in range(slices.shape[0]):
            g = noise_generator(seed, series_index, l, te).standard_normal((2,) + slices[l].shape)
            slices[l] = np.hypot(slices[l] + noise_sigma * g[0], noise_sigma * g[1])
    knobs = dict(
        noise_sigma=noise_sigma,
        kspace_truncation=kspace_truncation,
        first_echo_offset=first_echo_offset if is_first_echo else 0.0,
        seed=seed,
    )
    return LRSeries(np.moveaxis(slices, 0, geometry.slice_axis), geometry, float(te), series_index, knobs)


# --- persistence ---------------------------------------------------------------


def _with_ext(stem: Path, ext: str) -> Path:
    # stems may contain dots (e.g. a TE value), so append rather than replace
    return stem.parent / (stem.name + ext)


def save_series(series: LRSeries, hr_grid: Grid3D, stem) -> tuple[Path, Path]:
    """Write ``<stem>.nii`` and ``<stem>.txt``; returns both paths."""
    stem = Path(stem)
    g = series.geometry
    nii, txt = _with_ext(stem, ".nii"), _with_ext(stem, ".txt")
    write_volume(Volume3D(g.lr_grid(hr_grid), series.data), nii)
    meta = {
        "te": series.te,
        "orientation": g.orientation.label,
        "series_index": series.series_index,
        "in_plane_spacing": g.in_plane_spacing,
        "slice_thickness": g.slice_thickness,
        "gap_fraction": g.gap_fraction,
        "slice_fwhm": g.fwhm,
        "matrix": g.matrix,
        "n_slices": g.n_slices,
    }
    meta.update(series.knobs)
    write_sidecar(txt, meta)
    return nii, txt


def load_series(stem) -> LRSeries:
    stem = Path(stem)
    meta = read_sidecar(_with_ext(stem, ".txt"))
    vol = read_volume(_with_ext(stem, ".nii"))
    geom = SeriesGeometry(
        in_plane_spacing=tuple(float(x) for x in meta["in_plane_spacing"].split(",")),
        slice_thickness=float(meta["slice_thickness"]),
        gap_fraction=float(meta["gap_fraction"]),
        matrix=tuple(int(x) for x in meta["matrix"].split(",")),
        n_slices=int(meta["n_slices"]),
        orientation=orientation(meta["orientation"]),
        slice_fwhm=float(meta["slice_fwhm"]),
    )
    knobs = {k: meta[k] for k in ("noise_sigma", "kspace_truncation", "first_echo_offset", "seed") if k in meta}
    return LRSeries(np.asarray(vol.data, dtype=float), geom, float(meta["te"]), int(meta["series_index"]), knobs)
