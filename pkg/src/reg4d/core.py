"""Core grid, volume, field, and landmark types shared by every other module.

Conventions, fixed once for the whole package:

* Axis order is ``(z, y, x)``, slowest to fastest in memory. File readers
  map whatever the source order is into this layout.
* Displacement vectors are stored component-major as ``(3, D, H, W)`` with
  component order ``(dz, dy, dx)``, in voxel units of the field's own grid
  at the original resolution. Physical spacing enters only at evaluation
  time (TRE in mm), never during warping or composition.
* The transformation belonging to a field is always ``T(x) = D(x) + x``;
  only displacements are ever stored.
* All types are immutable after construction and therefore safe to share
  across threads. Constructors reject non-finite values so downstream code
  can assume finiteness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ZERO_BASED = "zero-based"
ONE_BASED = "one-based"


def _freeze(a: np.ndarray) -> np.ndarray:
    """Return a read-only copy of ``a`` (shared as-is if already read-only)."""
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class Grid3:
    """A 3D voxel lattice: dims ``(D, H, W)`` and spacing ``(sz, sy, sx)`` in mm.

    Two grids are compatible for warping iff their dims are equal; spacing
    may differ and only matters for converting errors to millimetres.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise ValueError("Grid3 needs 3 dims and 3 spacings")
        if any(d < 2 for d in dims):
            raise ValueError(f"all dims must be >= 2, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def num_voxels(self) -> int:
        d, h, w = self.dims
        return d * h * w

    def compatible(self, other: "Grid3") -> bool:
        return self.dims == other.dims


@dataclass(frozen=True, eq=False)
class Volume:
    """A scalar 3D image on a :class:`Grid3`; ``data`` has shape ``(D, H, W)``."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.shape != self.grid.dims:
            raise ValueError(f"data shape {a.shape} does not match grid dims {self.grid.dims}")
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        _require_finite(a, "volume data")
        object.__setattr__(self, "data", _freeze(a))

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(self.grid, data)


def make_volume(dims: Sequence[int], spacing: Sequence[float], data: np.ndarray) -> Volume:
    """Build a Volume from flat or shaped data, validating every invariant."""
    grid = Grid3(tuple(dims), tuple(spacing))
    a = np.asarray(data)
    if a.size != grid.num_voxels:
        raise ValueError(f"expected {grid.num_voxels} voxels for dims {grid.dims}, got {a.size}")
    return Volume(grid, a.reshape(grid.dims))


@dataclass(frozen=True, eq=False)
class ImageGroup:
    """Ordered phases of one 4D acquisition, all on a single grid.

    Phase order is temporal order; the cyclic loss depends on it.
    """

    volumes: tuple[Volume, ...]
    phase_labels: tuple[str, ...] = ()

    def __post_init__(self):
        vols = tuple(self.volumes)
        if len(vols) < 2:
            raise ValueError("an image group needs at least 2 phases")
        g0 = vols[0].grid
        for i, v in enumerate(vols):
            if v.grid.dims != g0.dims:
                raise ValueError(f"phase {i} dims {v.grid.dims} differ from phase 0 dims {g0.dims}")
        labels = tuple(self.phase_labels) or tuple(f"P{i:02d}" for i in range(len(vols)))
        if len(labels) != len(vols):
            raise ValueError("phase_labels length must match number of volumes")
        object.__setattr__(self, "volumes", vols)
        object.__setattr__(self, "phase_labels", labels)

    @property
    def num_phases(self) -> int:
        return len(self.volumes)

    @property
    def grid(self) -> Grid3:
        return self.volumes[0].grid

    def stacked(self) -> np.ndarray:
        """All phases as one ``(N, D, H, W)`` array."""
        return np.stack([v.data for v in self.volumes])


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement vectors ``(3, D, H, W)``, order ``(dz, dy, dx)``.

    Components are in voxel units of this field's own grid.
    """

    grid: Grid3
    vectors: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.vectors)
        if a.shape != (3, *self.grid.dims):
            raise ValueError(f"vectors shape {a.shape}, expected {(3, *self.grid.dims)}")
        if not np.issubdtype(a.dtype, np.floating):
            a = a.astype(np.float64)
        _require_finite(a, "displacement vectors")
        object.__setattr__(self, "vectors", _freeze(a))

    @classmethod
    def zeros(cls, grid: Grid3, dtype=np.float64) -> "DisplacementField":
        return cls(grid, np.zeros((3, *grid.dims), dtype=dtype))


@dataclass(frozen=True, eq=False)
class FieldSet:
    """One displacement field per phase of the group it registers."""

    fields: tuple[DisplacementField, ...]

    def __post_init__(self):
        fs = tuple(self.fields)
        if not fs:
            raise ValueError("empty field set")
        g0 = fs[0].grid
        for i, f in enumerate(fs):
            if f.grid.dims != g0.dims:
                raise ValueError(f"field {i} dims {f.grid.dims} differ from field 0 dims {g0.dims}")
        object.__setattr__(self, "fields", fs)

    def __len__(self) -> int:
        return len(self.fields)

    def __getitem__(self, i: int) -> DisplacementField:
        return self.fields[i]

    @property
    def grid(self) -> Grid3:
        return self.fields[0].grid

    def stacked(self) -> np.ndarray:
        """All fields as one ``(N, 3, D, H, W)`` array."""
        return np.stack([f.vectors for f in self.fields])

    @classmethod
    def for_group(cls, group: ImageGroup, stacked: np.ndarray) -> "FieldSet":
        """Build from an ``(N, 3, D, H, W)`` array, checking N against the group."""
        if stacked.shape[0] != group.num_phases:
            raise ValueError(
                f"{stacked.shape[0]} fields for a group of {group.num_phases} phases"
            )
        return cls(tuple(DisplacementField(group.grid, v) for v in stacked))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """K corresponding points in continuous voxel coordinates, order ``(z, y, x)``.

    ``convention`` records whether coordinates count from 0 or from 1; all
    internal math requires zero-based sets (see :func:`convert_landmarks`).
    """

    points: np.ndarray
    convention: str = ZERO_BASED
    axis_order: str = "zyx"

    def __post_init__(self):
        a = np.asarray(self.points, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 3:
            raise ValueError(f"points must be (K, 3), got {a.shape}")
        _require_finite(a, "landmark points")
        if self.convention not in (ZERO_BASED, ONE_BASED):
            raise ValueError(f"unknown convention {self.convention!r}")
        if self.axis_order != "zyx":
            raise ValueError("internal landmark sets are always stored in (z, y, x) order")
        object.__setattr__(self, "points", _freeze(a))

    def __len__(self) -> int:
        return self.points.shape[0]

    def inside(self, grid: Grid3) -> bool:
        lo = 0.0 if self.convention == ZERO_BASED else 1.0
        hi = np.asarray(grid.dims, dtype=np.float64) - (1.0 - lo)
        return bool((self.points >= lo).all() and (self.points <= hi).all())


def convert_landmarks(
    lm: LandmarkSet, target_convention: str, grid: Grid3 | None = None
) -> LandmarkSet:
    """Convert between one-based and zero-based indexing (idempotent on a match).

    When ``grid`` is given, raises if any converted point falls outside it.
    """
    if target_convention not in (ZERO_BASED, ONE_BASED):
        raise ValueError(f"unknown convention {target_convention!r}")
    if lm.convention == target_convention:
        out = lm
    else:
        shift = -1.0 if target_convention == ZERO_BASED else 1.0
        out = LandmarkSet(lm.points + shift, convention=target_convention)
    if grid is not None and not out.inside(grid):
        raise ValueError("landmark left the grid after convention conversion")
    return out


__all__ = [
    "Grid3",
    "Volume",
    "ImageGroup",
    "DisplacementField",
    "FieldSet",
    "LandmarkSet",
    "make_volume",
    "convert_landmarks",
    "ZERO_BASED",
    "ONE_BASED",
]
