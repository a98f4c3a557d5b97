"""Digital stand-in for the relaxometry phantom ROI: cylindrical vials in a plate.

The plate lies in the world x-z plane (normal along y) and is centered on the
world origin, so coronal slices (normal y) cut the vials as disks. A vial
center ``(u, v)`` is the world ``(x, z)`` position of its axis.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .volgrid import Grid3D, Volume3D


@dataclass(frozen=True)
class Vial:
    center: tuple[float, float]
    radius: float
    t2: float
    m0: float
    label: str = ""

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"vial radius must be > 0, got {self.radius}")
        if not self.t2 > 0:
            raise ValueError(f"vial t2 must be > 0, got {self.t2}")
        if self.m0 < 0:
            raise ValueError(f"vial m0 must be >= 0, got {self.m0}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


@dataclass(frozen=True)
class PhantomSpec:
    vials: tuple[Vial, ...]
    plate_thickness: float = 10.0
    background_m0: float = 100.0
    background_t2: float = 50.0
    field_of_view: tuple[float, float] = (96.0, 96.0)

    def __post_init__(self):
        vials = tuple(self.vials)
        object.__setattr__(self, "vials", vials)
        if not self.plate_thickness > 0:
            raise ValueError("plate_thickness must be > 0")
        if not self.background_t2 > 0 or self.background_m0 < 0:
            raise ValueError("background needs t2 > 0 and m0 >= 0")
        half = np.asarray(self.field_of_view, dtype=float) / 2
        for i, v in enumerate(vials):
            if np.any(np.abs(v.center) + v.radius > half):
                raise ValueError(f"vial {v.label or i} extends outside the field of view")
            for w in vials[i + 1:]:
                if np.hypot(*np.subtract(v.center, w.center)) <= v.radius + w.radius:
                    raise ValueError(f"vials {v.label} and {w.label} overlap")

    def vial(self, label: str) -> Vial:
        for v in self.vials:
            if v.label == label:
                return v
        raise KeyError(label)


REFERENCE_T2 = {"a": 428.3, "b": 258.4, "c": 186.1}


def default_phantom() -> PhantomSpec:
    """Three vials (a), (b), (c) on a horizontal line, 24 mm apart."""
    vials = tuple(
        Vial(center=(x, 0.0), radius=8.0, t2=t2, m0=1000.0, label=label)
        for x, (label, t2) in zip((-24.0, 0.0, 24.0), REFERENCE_T2.items())
    )
    return PhantomSpec(vials=vials)


def membership(spec: PhantomSpec, points: np.ndarray) -> np.ndarray:
    """Index of the vial containing each world point, -1 for background."""
    points = np.asarray(points, dtype=float)
    out = np.full(points.shape[:-1], -1, dtype=np.int64)
    in_plate = np.abs(points[..., 1]) <= spec.plate_thickness / 2
    for i, v in enumerate(spec.vials):
        du = points[..., 0] - v.center[0]
        dv = points[..., 2] - v.center[1]
        out[in_plate & (du * du + dv * dv <= v.radius * v.radius)] = i
    return out


def rasterize(spec: PhantomSpec, grid: Grid3D, supersample: int = 4) -> tuple[Volume3D, Volume3D]:
    """Sample (m0, t2) on ``grid``, averaging ``supersample**3`` points per voxel.

    Sub-samples sit at the centers of a regular ``s x s x s`` subdivision of
    each voxel. Partial-volume voxels get the plain average of the sub-sample
    (m0, t2) values; voxels whose sub-samples agree get the exact table value.
    """
    s = int(supersample)
    if not 1 <= s <= 8:
        raise ValueError(f"supersample must be in [1, 8], got {supersample}")
    m0_table = np.array([v.m0 for v in spec.vials] + [spec.background_m0])
    t2_table = np.array([v.t2 for v in spec.vials] + [spec.background_t2])

    idx = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in grid.dims], indexing="ij"), axis=-1)
    centers = grid.index_to_world(idx.reshape(-1, 3))
    label = membership(spec, centers)
    m0 = m0_table[label]
    t2 = t2_table[label]

    # Sub-samples lie within half a voxel diagonal of the center, so voxels
    # farther than that from every rim and plate face are uniform.
    reach = 0.5 * float(np.linalg.norm(grid.spacing))
    near = np.abs(np.abs(centers[:, 1]) - spec.plate_thickness / 2) <= reach
    for v in spec.vials:
        rho = np.hypot(centers[:, 0] - v.center[0], centers[:, 2] - v.center[1])
        near |= np.abs(rho - v.radius) <= reach
    near &= np.abs(centers[:, 1]) <= spec.plate_thickness / 2 + reach
    if s > 1 and near.any():
        base = idx.reshape(-1, 3)[near]
        counts = np.zeros((base.shape[0], len(m0_table)), dtype=np.int64)
        offsets = (np.arange(s) + 0.5) / s - 0.5
        rows = np.arange(base.shape[0])
        for o in itertools.product(offsets, repeat=3):
            which = membership(spec, grid.index_to_world(base + np.array(o)))
            counts[rows, which] += 1
        n = s ** 3
        m0[near] = counts @ m0_table / n
        t2[near] = counts @ t2_table / n
        uniform = counts.max(axis=1) == n
        pure = np.argmax(counts, axis=1)[uniform]
        m0[np.flatnonzero(near)[uniform]] = m0_table[pure]
        t2[np.flatnonzero(near)[uniform]] = t2_table[pure]
    return (
        Volume3D(grid, m0.reshape(grid.dims), "a.u."),
        Volume3D(grid, t2.reshape(grid.dims), "ms"),
    )


def vial_center_index(grid: Grid3D, vial: Vial, slice_axis: int = 1) -> np.ndarray:
    """Continuous voxel index of a vial axis, dropping ``slice_axis``."""
    world = np.array([vial.center[0], 0.0, vial.center[1]])
    idx = grid.world_to_index(world)
    return np.delete(idx, slice_axis)


def to_config(spec: PhantomSpec, prefix: str = "phantom") -> dict[str, str]:
    """Key-value block describing ``spec`` (see :func:`from_config`)."""
    out = {
        f"{prefix}.plate_thickness": repr(spec.plate_thickness),
        f"{prefix}.background_m0": repr(spec.background_m0),
        f"{prefix}.background_t2": repr(spec.background_t2),
        f"{prefix}.field_of_view": ", ".join(repr(float(f)) for f in spec.field_of_view),
    }
    for v in spec.vials:
        out[f"{prefix}.vial.{v.label}"] = ", ".join(
            repr(float(x)) for x in (*v.center, v.radius, v.t2, v.m0)
        )
    return out


def from_config(values: dict[str, str], prefix: str = "phantom", base: PhantomSpec | None = None) -> PhantomSpec:
    """Inverse of :func:`to_config`. Vial lines read ``u, v, radius, t2, m0``.

    Keys absent from ``values`` fall back to ``base`` (default phantom).
    If any vial key is present, the vial list is replaced wholesale.
    """
    base = base or default_phantom()
    kw = {}
    scalars = {"plate_thickness", "background_m0", "background_t2"}
    vials = []
    for key, raw in values.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name in scalars:
            kw[name] = float(raw)
        elif name == "field_of_view":
            kw[name] = tuple(float(x) for x in raw.split(","))
        elif name.startswith("vial."):
            nums = [float(x) for x in raw.split(",")]
            if len(nums) != 5:
                raise ValueError(f"{key}: expected 'u, v, radius, t2, m0'")
            vials.append(Vial((nums[0], nums[1]), nums[2], nums[3], nums[4], label=name[5:]))
        else:
            raise KeyError(f"unknown phantom key {key!r}")
    spec = dict(
        vials=tuple(vials) if vials else base.vials,
        plate_thickness=base.plate_thickness,
        background_m0=base.background_m0,
        background_t2=base.background_t2,
        field_of_view=base.field_of_view,
    )
    spec.update(kw)
    return PhantomSpec(**spec)
