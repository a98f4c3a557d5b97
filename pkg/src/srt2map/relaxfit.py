"""Voxel-wise mono-exponential T2 fitting, ``s(TE) = m0 * exp(-TE / t2)``.

The Levenberg-Marquardt loop is vectorized over voxels: every operation is
elementwise across the voxel axis, so a voxel's result does not depend on
which other voxels are fitted alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volgrid import Grid3D, Volume3D, write_sidecar, write_volume

SENTINEL = -1.0


@dataclass(frozen=True)
class FitConfig:
    skip_first_n: int = 1
    t2_bounds: tuple[float, float] = (1.0, 5000.0)
    m0_bounds: tuple[float, float] = (0.0, 1e9)
    max_iters: int = 50
    ftol: float = 1e-10
    signal_floor: float = 1e-6

    def __post_init__(self):
        if self.skip_first_n < 0:
            raise ValueError("skip_first_n must be >= 0")
        if not self.t2_bounds[0] < self.t2_bounds[1] or not self.m0_bounds[0] < self.m0_bounds[1]:
            raise ValueError("fit bounds must be ordered (low < high)")
        if self.t2_bounds[0] <= 0:
            raise ValueError("t2 lower bound must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def check_echo_count(self, n_te: int):
        if n_te - self.skip_first_n < 2:
            raise ValueError(f"{n_te} echoes with skip_first_n={self.skip_first_n} leaves fewer than 2 points")


@dataclass
class VoxelFit:
    m0: np.ndarray
    t2: np.ndarray
    t2_sd: np.ndarray
    r2: np.ndarray
    converged: np.ndarray


def model(m0, t2, te):
    return m0 * np.exp(-te / t2)


def model_jacobian(m0, t2, te) -> np.ndarray:
    """Partial derivatives w.r.t. (m0, t2), stacked on the last axis."""
    e = np.exp(-te / t2)
    return np.stack([e, m0 * te / (t2 * t2) * e], axis=-1)


def _prepare(signal, te, cfg: FitConfig):
    signal = np.atleast_2d(np.asarray(signal, dtype=float))
    te = np.asarray(te, dtype=float)
    if signal.shape[1] != te.size:
        raise ValueError(f"{signal.shape[1]} samples but {te.size} echo times")
    cfg.check_echo_count(te.size)
    order = np.argsort(te, kind="stable")[cfg.skip_first_n:]
    return signal[:, order], te[order]


def _loglinear(signal: np.ndarray, te: np.ndarray, cfg: FitConfig):
    use = signal > cfg.signal_floor
    w = use.astype(float)
    logs = np.log(np.where(use, signal, 1.0))
    n = w.sum(axis=1)
    sx = (w * te).sum(axis=1)
    sy = (w * logs).sum(axis=1)
    sxx = (w * te * te).sum(axis=1)
    sxy = (w * te * logs).sum(axis=1)
    den = n * sxx - sx * sx
    ok = (n >= 2) & (den > 0)
    den = np.where(ok, den, 1.0)
    slope = (n * sxy - sx * sy) / den
    intercept = (sy - slope * sx) / np.where(ok, n, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        t2 = np.where(slope < 0, -1.0 / np.where(slope < 0, slope, -1.0), cfg.t2_bounds[1])
        m0 = np.exp(intercept)
    t2 = np.clip(t2, *cfg.t2_bounds)
    m0 = np.clip(m0, *cfg.m0_bounds)
    return np.where(ok, m0, 0.0), np.where(ok, t2, 0.0), ok


def loglinear_init(signal, te, cfg: FitConfig | None = None) -> tuple[float, float]:
    """Closed-form (m0, t2) from least squares on ``log(signal)``.

    Raises
    ------
    ValueError
        If fewer than two samples exceed ``cfg.signal_floor``.
    """
    cfg = cfg or FitConfig(skip_first_n=0)
    m0, t2, ok = _loglinear(np.atleast_2d(np.asarray(signal, dtype=float)), np.asarray(te, dtype=float), cfg)
    if not ok[0]:
        raise ValueError("log-linear init failed: fewer than 2 samples above the signal floor")
    return float(m0[0]), float(t2[0])


def _rss(m0, t2, s, te):
    r = m0[:, None] * np.exp(-te / t2[:, None]) - s
    return np.sum(r * r, axis=1)


def _normal_eq(m0, t2, s, te):
    e = np.exp(-te / t2[:, None])
    j0 = e
    j1 = m0[:, None] * te / (t2 * t2)[:, None] * e
    r = m0[:, None] * e - s
    a00 = np.sum(j0 * j0, axis=1)
    a01 = np.sum(j0 * j1, axis=1)
    a11 = np.sum(j1 * j1, axis=1)
    g0 = np.sum(j0 * r, axis=1)
    g1 = np.sum(j1 * r, axis=1)
    return a00, a01, a11, g0, g1


def fit_voxels(signal, te, cfg: FitConfig | None = None) -> VoxelFit:
    """Fit many decays at once; ``signal`` has shape ``(n_voxels, n_te)``."""
    cfg = cfg or FitConfig()
    s, te = _prepare(signal, te, cfg)
    n_vox, n_pts = s.shape
    m0_init, t2_init, ok = _loglinear(s, te, cfg)
    m0, t2 = m0_init.copy(), t2_init.copy()
    rss = _rss(m0, np.where(ok, t2, 1.0), s, te)
    mu = np.full(n_vox, 1e-3)
    active = ok.copy()
    done = ~ok
    scale = np.sum(s * s, axis=1)
    done |= ok & (rss <= 1e-28 * scale)
    active &= ~done

    for _ in range(cfg.max_iters):
        if not active.any():
            break
        a00, a01, a11, g0, g1 = _normal_eq(m0, np.where(ok, t2, 1.0), s, te)
        b00 = a00 * (1 + mu)
        b11 = a11 * (1 + mu)
        det = b00 * b11 - a01 * a01
        good = active & (det > 0)
        det = np.where(good, det, 1.0)
        d0 = (-b11 * g0 + a01 * g1) / det
        d1 = (a01 * g0 - b00 * g1) / det
        m0_c = np.clip(m0 + d0, *cfg.m0_bounds)
        t2_c = np.clip(t2 + d1, *cfg.t2_bounds)
        rss_c = _rss(m0_c, np.where(good, t2_c, 1.0), s, te)
        accept = good & (rss_c < rss)
        reject = active & ~accept
        small = accept & (rss - rss_c <= cfg.ftol * rss)
        m0 = np.where(accept, m0_c, m0)
        t2 = np.where(accept, t2_c, t2)
        rss_prev = rss
        rss = np.where(accept, rss_c, rss)
        mu = np.where(accept, np.maximum(mu * 0.1, 1e-12), np.where(reject, mu * 10.0, mu))
        stalled = reject & (mu > 1e16)
        tiny = accept & (rss <= 1e-28 * scale)
        finished = small | stalled | tiny | (good & (rss_prev == 0))
        done |= finished
        active &= ~finished

    t2_safe = np.where(ok, t2, 1.0)
    a00, a01, a11, _, _ = _normal_eq(m0, t2_safe, s, te)
    det = a00 * a11 - a01 * a01
    singular = ~(det > 1e-14 * a00 * a11)
    converged = ok & done & ~singular
    var_t2 = a00 / np.where(singular, 1.0, det)
    dof = n_pts - 2
    if dof > 0:
        sd = np.sqrt(np.maximum(rss / dof * var_t2, 0.0))
    else:
        sd = np.zeros(n_vox)
    mean = s.mean(axis=1, keepdims=True)
    tss = np.sum((s - mean) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(tss > 0, 1.0 - rss / np.where(tss > 0, tss, 1.0), np.where(rss == 0, 1.0, 0.0))
    return VoxelFit(
        m0=np.where(converged, m0, m0_init),
        t2=np.where(converged, t2, t2_init),
        t2_sd=np.where(converged, sd, SENTINEL),
        r2=np.where(converged, r2, SENTINEL),
        converged=converged,
    )


def fit_voxel(signal, te, cfg: FitConfig | None = None) -> tuple[float, float, float, float, bool]:
    """Fit one decay. Returns ``(m0, t2, t2_sd, r2, converged)``.

    The first ``cfg.skip_first_n`` echoes (by TE) are dropped. ``t2_sd`` is
    ``sqrt(RSS / (n - 2) * [(J^T J)^-1]_t2t2)``; failed fits carry -1 in
    ``t2_sd`` and ``r2``.
    """
    f = fit_voxels(np.asarray(signal, dtype=float)[None, :], te, cfg)
    return float(f.m0[0]), float(f.t2[0]), float(f.t2_sd[0]), float(f.r2[0]), bool(f.converged[0])


@dataclass
class T2FitResult:
    t2_map: Volume3D
    m0_map: Volume3D
    t2_sd_map: Volume3D
    r2_map: Volume3D
    converged_mask: np.ndarray

    def save(self, out_dir, te, cfg: FitConfig, prefix: str = "") -> list:
        out = Path(out_dir)
        paths = []
        for name in ("t2", "m0", "t2_sd", "r2"):
            p = out / f"{prefix}{name}.nii"
            write_volume(getattr(self, f"{name}_map"), p)
            paths.append(p)
        conv = out / f"{prefix}converged.nii"
        write_volume(Volume3D(self.t2_map.grid, self.converged_mask.astype(np.float32)), conv)
        side = out / f"{prefix}fit.txt"
        write_sidecar(side, {
            "te": list(te),
            "skip_first_n": cfg.skip_first_n,
            "t2_bounds": cfg.t2_bounds,
            "m0_bounds": cfg.m0_bounds,
            "max_iters": cfg.max_iters,
            "ftol": cfg.ftol,
            "signal_floor": cfg.signal_floor,
        })
        return paths + [conv, side]


def fit_volume(volumes, te, mask=None, cfg: FitConfig | None = None) -> T2FitResult:
    """Fit every masked voxel of a multi-echo volume series.

    Unmasked voxels are zero in every map and flagged not converged.
    """
    cfg = cfg or FitConfig()
    volumes = list(volumes)
    if len(volumes) != len(te):
        raise ValueError(f"{len(volumes)} volumes but {len(te)} echo times")
    grid: Grid3D = volumes[0].grid
    if any(not v.grid.same_as(grid) for v in volumes[1:]):
        raise ValueError("all echo volumes must share one grid")
    cfg.check_echo_count(len(te))
    if mask is None:
        mask = np.ones(grid.dims, dtype=bool)
    else:
        mask = np.asarray(mask.data if isinstance(mask, Volume3D) else mask).astype(bool)
        if mask.shape != grid.dims:
            raise ValueError("mask grid does not match the volumes")
    maps = {k: np.zeros(grid.dims) for k in ("m0", "t2", "t2_sd", "r2")}
    conv = np.zeros(grid.dims, dtype=bool)
    if mask.any():
        sig = np.stack([np.asarray(v.data, dtype=float)[mask] for v in volumes], axis=1)
        f = fit_voxels(sig, te, cfg)
        for k in maps:
            maps[k][mask] = getattr(f, k)
        conv[mask] = f.converged
    return T2FitResult(
        t2_map=Volume3D(grid, maps["t2"], "ms"),
        m0_map=Volume3D(grid, maps["m0"], "a.u."),
        t2_sd_map=Volume3D(grid, maps["t2_sd"], "ms"),
        r2_map=Volume3D(grid, maps["r2"], ""),
        converged_mask=conv,
    )
