"""Evaluation: circular ROI detection, ROI statistics and agreement metrics."""

from __future__ import annotations

import csv
import string
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volgrid import Volume3D

# fraction of max gradient; 0.5 loses the shortest-T2 vial on late echoes
EDGE_THRESHOLD = 0.25
PEAK_THRESHOLD = 0.25


class DetectionFailure(RuntimeError):
    def __init__(self, found: int, expected: int, detail: str = ""):
        msg = f"found {found} of {expected} expected circles"
        super().__init__(msg + (f" ({detail})" if detail else ""))
        self.found = found
        self.expected = expected


@dataclass(frozen=True)
class CircleROI:
    center: tuple[int, int]
    radius: int
    slice_index: int = 0
    label: str = ""
    score: float = 0.0

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("ROI radius must be >= 1")


@dataclass(frozen=True)
class ROIStats:
    mean: float
    sd: float
    n_voxels: int


@dataclass(frozen=True)
class BlandAltmanStats:
    bias: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class RepeatabilityRow:
    mean_t2: float
    sd_t2: float
    cv_percent: float
    mean_abs_diff: float
    mape_percent: float


@dataclass
class RepeatabilityReport:
    rows: dict = field(default_factory=dict)  # (roi, method, n_te) -> RepeatabilityRow

    def add(self, roi: str, method: str, n_te: int, values) -> RepeatabilityRow:
        """Summarize repeated ROI means; spread metrics are NaN for a single run."""
        v = np.asarray(values, dtype=float)
        spread = v.size >= 2
        nan = float("nan")
        row = RepeatabilityRow(
            mean_t2=float(v.mean()),
            sd_t2=float(v.std()),
            cv_percent=cv_percent(v) if spread else nan,
            mean_abs_diff=mean_abs_diff(v) if spread else nan,
            mape_percent=mape_percent(v) if spread else nan,
        )
        self.rows[(roi, method, n_te)] = row
        return row

    def to_csv(self, path) -> None:
        def fmt(x):
            return "" if np.isnan(x) else f"{x:.6f}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["roi", "method", "n_te", "mean_t2_ms", "sd_t2_ms", "cv_percent", "mean_abs_diff_ms", "mape_percent"])
            for (roi, method, n_te), r in sorted(self.rows.items()):
                w.writerow([roi, method, n_te, *(fmt(x) for x in (r.mean_t2, r.sd_t2, r.cv_percent, r.mean_abs_diff, r.mape_percent))])


def _circle_offsets(r: int) -> np.ndarray:
    n = max(16, int(np.ceil(8 * np.pi * r)))
    theta = np.arange(n) * (2 * np.pi / n)
    off = np.rint(np.stack([r * np.cos(theta), r * np.sin(theta)], 1)).astype(int)
    return np.unique(off, axis=0)


def _disk(shape, center, radius) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return (ii - center[0]) ** 2 + (jj - center[1]) ** 2 <= radius * radius


def hough_accumulator(image, radii) -> np.ndarray:
    """Circle votes normalized by circle sample count, shape ``(len(radii), *image.shape)``."""
    img = np.asarray(image, dtype=float)
    mag = np.hypot(ndimage.sobel(img, axis=0, mode="nearest"), ndimage.sobel(img, axis=1, mode="nearest"))
    acc = np.zeros((len(radii),) + img.shape)
    if mag.max() <= 0:
        return acc
    ex, ey = np.nonzero(mag >= EDGE_THRESHOLD * mag.max())
    for ri, r in enumerate(radii):
        off = _circle_offsets(int(r))
        cx = (ex[:, None] - off[None, :, 0]).ravel()
        cy = (ey[:, None] - off[None, :, 1]).ravel()
        keep = (cx >= 0) & (cx < img.shape[0]) & (cy >= 0) & (cy < img.shape[1])
        np.add.at(acc[ri], (cx[keep], cy[keep]), 1.0)
        acc[ri] /= len(off)
    return acc


def hough_circles(image, r_min: int, r_max: int, n_expected: int, rank_image=None, slice_index: int = 0) -> list[CircleROI]:
    """Detect ``n_expected`` circles and label them by descending interior intensity.

    Sobel edges above ``EDGE_THRESHOLD`` of the maximum gradient vote into an
    accumulator over (radius, center). Peaks are taken greedily; a candidate
    overlapping a chosen circle, or centered within ``r_min`` of it, is
    suppressed. Labels ``a, b, c, ...`` follow descending mean intensity of
    ``rank_image`` (defaults to ``image``) inside each circle.

    Raises
    ------
    DetectionFailure
        If fewer than ``n_expected`` peaks exceed 25% of the accumulator maximum.
    """
    if r_min > r_max or r_min < 1:
        raise ValueError(f"need 1 <= r_min <= r_max, got {r_min}, {r_max}")
    if n_expected < 1:
        raise ValueError("n_expected must be >= 1")
    img = np.asarray(image, dtype=float)
    radii = np.arange(int(r_min), int(r_max) + 1)
    acc = hough_accumulator(img, radii)
    h, w = img.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for ri, r in enumerate(radii):
        outside = (ii - r < 0) | (ii + r > h - 1) | (jj - r < 0) | (jj + r > w - 1)
        acc[ri][outside] = 0.0
    top = acc.max()
    if top <= 0:
        raise DetectionFailure(0, n_expected, "no edges")
    found = []
    work = acc.copy()
    while len(found) < n_expected:
        flat = int(np.argmax(work))
        ri, cx, cy = np.unravel_index(flat, work.shape)
        score = work[ri, cx, cy]
        if score < PEAK_THRESHOLD * top:
            break
        found.append((int(cx), int(cy), int(radii[ri]), float(score)))
        d2 = (ii - cx) ** 2 + (jj - cy) ** 2
        for rj, r in enumerate(radii):
            # no later circle may overlap this one, nor sit within r_min of it
            reach = max(int(radii[ri]) + int(r), int(r_min))
            work[rj][d2 < reach * reach] = -np.inf
    if len(found) < n_expected:
        raise DetectionFailure(len(found), n_expected, "peaks above 25% of accumulator maximum")
    rank = img if rank_image is None else np.asarray(rank_image, dtype=float)
    means = [rank[_disk(rank.shape, (cx, cy), r)].mean() for cx, cy, r, _ in found]
    order = sorted(range(len(found)), key=lambda i: (-means[i], i))
    labels = string.ascii_lowercase
    return [
        CircleROI((found[i][0], found[i][1]), found[i][2], slice_index, labels[n], found[i][3])
        for n, i in enumerate(order)
    ]


def roi_mask(roi: CircleROI, shape, margin: int = -1) -> np.ndarray:
    """In-plane selection of pixels within ``radius + margin`` of the center."""
    r = roi.radius + margin
    if r < 0:
        return np.zeros(shape, dtype=bool)
    return _disk(shape, roi.center, r)


def _slice(map_, slice_index: int, slice_axis: int) -> np.ndarray:
    if isinstance(map_, Volume3D):
        return np.take(np.asarray(map_.data, dtype=float), slice_index, axis=slice_axis)
    arr = np.asarray(map_, dtype=float)
    return arr if arr.ndim == 2 else np.take(arr, slice_index, axis=slice_axis)


def erode_then_stat(roi: CircleROI, map_, margin: int = -1, slice_axis: int = 1) -> ROIStats:
    """Mean and population SD of ``map_`` within the ROI shrunk by one pixel.

    ``margin`` sets the radius adjustment: -1 (default) shrinks, 0 keeps the
    detected circle, +1 dilates it.
    """
    img = _slice(map_, roi.slice_index, slice_axis)
    sel = roi_mask(roi, img.shape, margin)
    if not sel.any():
        raise ValueError(f"ROI {roi.label or roi.center} selects no voxels")
    vals = img[sel]
    return ROIStats(float(vals.mean()), float(vals.std()), int(vals.size))


def relative_error(measured: float, reference: float) -> float:
    """Signed percentage error ``100 (measured - reference) / reference``."""
    if not reference > 0:
        raise ValueError("reference must be > 0")
    return 100.0 * (measured - reference) / reference


def _values(values, need_positive=False) -> np.ndarray:
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ValueError("need at least 2 values")
    if need_positive and np.any(v <= 0):
        raise ValueError("all values must be > 0")
    return v


def cv_percent(values) -> float:
    """Population SD over mean, in percent."""
    v = _values(values)
    mean = v.mean()
    if not mean > 0:
        raise ValueError("mean must be > 0")
    return float(100.0 * v.std() / mean)


def mape_percent(values) -> float:
    """Mean over ordered pairs ``i != j`` of ``100 |v_i - v_j| / v_j``."""
    v = _values(values, need_positive=True)
    diff = np.abs(v[:, None] - v[None, :]) / v[None, :]
    n = v.size
    return float(100.0 * diff.sum() / (n * (n - 1)))


def mean_abs_diff(values) -> float:
    """Mean absolute difference over ordered pairs ``i != j``."""
    v = _values(values)
    n = v.size
    return float(np.abs(v[:, None] - v[None, :]).sum() / (n * (n - 1)))


def bland_altman(pairs) -> BlandAltmanStats:
    """Bias and 1.96-SD limits of agreement for ``(measured, reference)`` pairs."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise ValueError("need at least 2 (measured, reference) pairs")
    m, r = arr[:, 0], arr[:, 1]
    d = m - r
    bias = float(d.mean())
    sd = float(d.std())
    pts = tuple((float(a), float(b)) for a, b in zip((m + r) / 2, d))
    return BlandAltmanStats(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, pts)


def write_bland_altman_csv(path, groups: dict) -> None:
    """``groups`` maps ``(method, n_te)`` to ``(labels, pairs)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_te", "roi", "mean_ms", "difference_ms", "bias_ms", "loa_low_ms", "loa_high_ms"])
        for (method, n_te), (labels, pairs) in sorted(groups.items()):
            ba = bland_altman(pairs)
            for label, (mean, diff) in zip(labels, ba.points):
                w.writerow([method, n_te, label, f"{mean:.6f}", f"{diff:.6f}",
                            f"{ba.bias:.6f}", f"{ba.loa_low:.6f}", f"{ba.loa_high:.6f}"])


def write_relative_error_csv(path, rows) -> None:
    """``rows``: iterable of ``(method, n_te, roi, measured, reference)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n_te", "roi", "measured_ms", "reference_ms", "relative_error_percent"])
        for method, n_te, roi, meas, ref in rows:
            w.writerow([method, n_te, roi, f"{meas:.6f}", f"{ref:.6f}", f"{relative_error(meas, ref):.6f}"])

