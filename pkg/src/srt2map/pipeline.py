"""In-memory pipeline stages: simulate, reconstruct, fit, analyze, TE sweep.

The CLI wraps these with file I/O; tests and the acceptance suite call them
directly.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .acquire import (
    ForwardOperator,
    LRSeries,
    SeriesGeometry,
    orientation,
    simulate_series,
)
from .analyze import CircleROI, ROIStats, erode_then_stat, hough_circles
from .config import PipelineConfig
from .phantom import rasterize
from .relaxfit import FitConfig, T2FitResult, fit_volume, fit_voxels
from .srrecon import ConvergenceReport, SRProblem, sr_reconstruct
from .volgrid import Grid3D, Volume3D

logger = logging.getLogger(__name__)

# Gold-standard analogs: one coronal slice at 0.98 x 0.98 x 6.0 mm.
REFERENCE_TE = {
    "se": tuple(10.0 + i * (400.0 - 10.0) / 24 for i in range(25)),
    "mese": tuple(13.0 + 13.0 * i for i in range(32)),
}
REFERENCE_IN_PLANE = (0.98, 0.98)
REFERENCE_THICKNESS = 6.0


@dataclass(frozen=True)
class ReferenceProtocol:
    kind: str
    te_list: tuple[float, ...]
    geometry: SeriesGeometry


def reference_protocol(kind: str, grid: Grid3D) -> ReferenceProtocol:
    kind = kind.lower()
    if kind not in REFERENCE_TE:
        raise ValueError(f"unknown reference kind {kind!r}")
    geom = SeriesGeometry.covering(
        grid, "coronal", REFERENCE_IN_PLANE, REFERENCE_THICKNESS, 0.0, n_slices=1
    )
    return ReferenceProtocol(kind, REFERENCE_TE[kind], geom)


def hr_grid(cfg: PipelineConfig) -> Grid3D:
    return Grid3D.centered(cfg.grid_dims, cfg.hr_spacing)


def ground_truth(cfg: PipelineConfig) -> tuple[Volume3D, Volume3D]:
    return rasterize(cfg.phantom, hr_grid(cfg), cfg.supersample)


def series_geometries(cfg: PipelineConfig, grid: Grid3D) -> list[SeriesGeometry]:
    p = cfg.protocol
    return [
        SeriesGeometry.covering(
            grid, orientation(o), p.in_plane_spacing, p.slice_thickness, p.gap_fraction,
            p.slice_fwhm or None,
        )
        for o in p.orientations
    ]


def simulate(cfg: PipelineConfig, te_list, seed: int, truth=None, operators=None) -> dict[float, list[LRSeries]]:
    """LR stacks per TE, one per configured orientation (series index = position)."""
    grid = hr_grid(cfg)
    m0, t2 = truth or ground_truth(cfg)
    geoms = series_geometries(cfg, grid)
    ops = operators or [ForwardOperator(grid, g) for g in geoms]
    p = cfg.protocol
    out = {}
    for i, te in enumerate(te_list):
        out[te] = [
            simulate_series(
                m0, t2, g, te,
                noise_sigma=p.noise_sigma,
                kspace_truncation=p.kspace_truncation,
                first_echo_offset=p.first_echo_offset,
                is_first_echo=i < p.n_offset_echoes,
                seed=seed,
                series_index=k,
                operator=op,
            )
            for k, (g, op) in enumerate(zip(geoms, ops))
        ]
    return out


def reconstruct(cfg: PipelineConfig, series_by_te: dict, operators=None) -> dict[float, tuple[Volume3D, ConvergenceReport]]:
    """SR volume and convergence history per TE."""
    grid = hr_grid(cfg)
    cache: dict = {}

    def op_for(geom):
        if operators is not None:
            for op in operators:
                if op.geometry == geom:
                    return op
        if geom not in cache:
            cache[geom] = ForwardOperator(grid, geom)
        return cache[geom]

    def one(te):
        pairs = [(s, op_for(s.geometry)) for s in series_by_te[te]]
        return te, sr_reconstruct(SRProblem(pairs, grid, cfg.solver))

    tes = list(series_by_te)
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            return dict(pool.map(one, tes))
    return dict(one(te) for te in tes)


def evaluation_slice(grid: Grid3D) -> int:
    """Coronal HR slice index nearest the plate mid-plane."""
    return grid.dims[1] // 2


def slice_mask(grid: Grid3D, index: int, axis: int = 1) -> np.ndarray:
    mask = np.zeros(grid.dims, dtype=bool)
    sl = [slice(None)] * 3
    sl[axis] = index
    mask[tuple(sl)] = True
    return mask


def fit_sr(cfg: PipelineConfig, sr: dict, te_list, mask=None) -> T2FitResult:
    vols = [sr[te][0] for te in te_list]
    if mask is None:
        mask = slice_mask(vols[0].grid, evaluation_slice(vols[0].grid))
    return fit_volume(vols, te_list, mask, cfg.fit)


@dataclass
class SliceMaps:
    """2D evaluation-slice maps for one arm plus the first-TE image used for ROI detection."""

    t2: np.ndarray
    t2_sd: np.ndarray
    r2: np.ndarray
    first_image: np.ndarray
    spacing: float


def fit_slices(images, te_list, cfg: FitConfig, spacing: float) -> SliceMaps:
    """Fit a stack of 2D images (one per TE) voxel by voxel."""
    stack = np.stack([np.asarray(im, dtype=float) for im in images], axis=-1)
    shape = stack.shape[:2]
    f = fit_voxels(stack.reshape(-1, len(te_list)), te_list, cfg)
    return SliceMaps(f.t2.reshape(shape), f.t2_sd.reshape(shape), f.r2.reshape(shape), stack[..., 0], spacing)


def sr_slice_maps(cfg: PipelineConfig, sr: dict, te_list) -> SliceMaps:
    grid = next(iter(sr.values()))[0].grid
    j = evaluation_slice(grid)
    res = fit_sr(cfg, sr, te_list, slice_mask(grid, j))
    first = np.asarray(sr[te_list[0]][0].data)[:, j, :]
    return SliceMaps(
        res.t2_map.data[:, j, :], res.t2_sd_map.data[:, j, :], res.r2_map.data[:, j, :], first, grid.spacing[0]
    )


def haste_slice_maps(cfg: PipelineConfig, series_by_te: dict, te_list) -> SliceMaps:
    """Single-stack arm: fit the central slice of the coronal stack across TEs, no SR."""
    label = cfg.analysis.haste_orientation
    images = []
    for te in te_list:
        s = next(s for s in series_by_te[te] if s.geometry.orientation.label == label)
        images.append(s.slices[s.geometry.n_slices // 2])
    spacing = series_by_te[te_list[0]][0].geometry.in_plane_spacing[0]
    return fit_slices(images, te_list, cfg.fit, spacing)


def reference_slice_maps(cfg: PipelineConfig, kind: str, seed: int, truth=None) -> SliceMaps:
    """Dense-TE single-slice acquisition without early-echo gain or ringing."""
    grid = hr_grid(cfg)
    m0, t2 = truth or ground_truth(cfg)
    ref = reference_protocol(kind, grid)
    op = ForwardOperator(grid, ref.geometry)
    images = [
        simulate_series(m0, t2, ref.geometry, te, noise_sigma=cfg.protocol.noise_sigma,
                        seed=seed, series_index=100, operator=op).slices[0]
        for te in ref.te_list
    ]
    return fit_slices(images, list(ref.te_list), cfg.reference_fit, ref.geometry.in_plane_spacing[0])


def radius_range(cfg: PipelineConfig, spacing: float) -> tuple[int, int]:
    a = cfg.analysis
    radii = [v.radius for v in cfg.phantom.vials]
    r_min = a.r_min or max(1, math.floor(0.75 * min(radii) / spacing))
    r_max = a.r_max or math.ceil(1.25 * max(radii) / spacing)
    return r_min, r_max


def detect_rois(cfg: PipelineConfig, maps: SliceMaps) -> list[CircleROI]:
    r_min, r_max = radius_range(cfg, maps.spacing)
    return hough_circles(maps.first_image, r_min, r_max, cfg.analysis.n_expected)


def roi_stats(cfg: PipelineConfig, maps: SliceMaps, rois=None) -> dict[str, ROIStats]:
    rois = rois or detect_rois(cfg, maps)
    return {r.label: erode_then_stat(r, maps.t2, cfg.analysis.roi_margin) for r in rois}


def truth_by_label(cfg: PipelineConfig) -> dict[str, float]:
    return {v.label: v.t2 for v in cfg.phantom.vials}


@dataclass
class ArmResult:
    """Per-ROI T2 statistics for each arm of one run."""

    n_te: int
    stats: dict = field(default_factory=dict)  # method -> {label: ROIStats}
    rois: dict = field(default_factory=dict)  # method -> [CircleROI]
    reports: dict = field(default_factory=dict)  # te -> ConvergenceReport


def run_once(cfg: PipelineConfig, te_list, seed: int, truth=None, operators=None, sr_cache=None) -> ArmResult:
    """Simulate, reconstruct, fit and measure SR and single-stack arms for one seed.

    ``sr_cache`` (dict keyed by ``(seed, te, is_first)``) lets TE sweeps reuse
    reconstructions of echo times shared between schedules.
    """
    truth = truth or ground_truth(cfg)
    series = simulate(cfg, te_list, seed, truth, operators)
    sr = {}
    todo = {}
    for i, te in enumerate(te_list):
        key = (seed, round(te, 9), i < cfg.protocol.n_offset_echoes)
        if sr_cache is not None and key in sr_cache:
            sr[te] = sr_cache[key]
        else:
            todo[te] = series[te]
    if todo:
        done = reconstruct(cfg, todo, operators)
        for i, te in enumerate(te_list):
            if te in done:
                sr[te] = done[te]
                if sr_cache is not None:
                    sr_cache[(seed, round(te, 9), i < cfg.protocol.n_offset_echoes)] = done[te]
    out = ArmResult(n_te=len(te_list), reports={te: sr[te][1] for te in te_list})
    for method, maps in (("sr", sr_slice_maps(cfg, sr, te_list)), ("haste", haste_slice_maps(cfg, series, te_list))):
        rois = detect_rois(cfg, maps)
        out.rois[method] = rois
        out.stats[method] = roi_stats(cfg, maps, rois)
    return out
