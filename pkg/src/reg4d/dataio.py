"""Dataset ingestion, preprocessing, field serialization, and the phantom.

Raw volume files carry no header, so every case is described by a JSON
manifest holding dims, spacing, intensity convention, file paths, and the
landmark convention. Landmark text files are whitespace-separated triples;
the manifest says which axis order and index base they use.

The phantom generator synthesizes a group with analytically known motion:
every derived quantity (phase images, ground-truth fields, per-phase
landmark positions) is evaluated from closed-form expressions, never from
grid interpolation, so it can grade the rest of the pipeline.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core import (
    DisplacementField,
    FieldSet,
    Grid3,
    ImageGroup,
    LandmarkSet,
    ONE_BASED,
    Volume,
    ZERO_BASED,
    convert_landmarks,
)

DATA_ROOT_ENV = "REG4D_DATA_ROOT"


# ---------------------------------------------------------------------------
# case manifests and raw volumes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseMeta:
    case_id: str
    dims: tuple[int, int, int]              # (D, H, W)
    spacing: tuple[float, float, float]     # (sz, sy, sx) mm
    phase_files: tuple[str, ...]
    landmark_files: tuple[str, ...] = ()
    # phase index each landmark file annotates, aligned with landmark_files
    landmark_phases: tuple[int, ...] = ()
    landmark_convention: str = ONE_BASED
    landmark_axis_order: str = "xyz"
    intensity_offset: float = 0.0
    intensity_divisor: float = 1000.0
    crop_margin: int = 8

    def __post_init__(self):
        Grid3(self.dims, self.spacing)  # validates both
        if self.intensity_divisor == 0:
            raise ValueError("intensity_divisor must be nonzero")
        if self.landmark_axis_order not in ("xyz", "zyx"):
            raise ValueError(f"unknown landmark_axis_order {self.landmark_axis_order!r}")
        if self.landmark_phases and len(self.landmark_phases) != len(self.landmark_files):
            raise ValueError("landmark_phases must align with landmark_files")
        if self.crop_margin < 0:
            raise ValueError("crop_margin must be >= 0")


def load_manifest(path, data_root=None) -> CaseMeta:
    """Read a case manifest; relative file paths resolve against
    ``data_root`` (default: the manifest's own directory)."""
    with open(path) as f:
        raw = json.load(f)
    root = data_root or os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(root, p)

    return CaseMeta(
        case_id=raw["case_id"],
        dims=tuple(raw["dims"]),
        spacing=tuple(raw["spacing"]),
        phase_files=tuple(resolve(p) for p in raw["phase_files"]),
        landmark_files=tuple(resolve(p) for p in raw.get("landmark_files", ())),
        landmark_phases=tuple(raw.get("landmark_phases", ())),
        landmark_convention=raw.get("landmark_convention", ONE_BASED),
        landmark_axis_order=raw.get("landmark_axis_order", "xyz"),
        intensity_offset=float(raw.get("intensity_offset", 0.0)),
        intensity_divisor=float(raw.get("intensity_divisor", 1000.0)),
        crop_margin=int(raw.get("crop_margin", 8)),
    )


def _read_raw_volume(path, dims, spacing) -> Volume:
    expected = 2 * dims[0] * dims[1] * dims[2]
    actual = os.path.getsize(path)
    if actual != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for dims {tuple(dims)}, found {actual}"
        )
    data = np.fromfile(path, dtype="<i2").reshape(dims).astype(np.float32)
    return Volume(Grid3(dims, spacing), data)


def _read_landmarks(path, axis_order, convention) -> LandmarkSet:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, found {pts.shape[1]}")
    if axis_order == "xyz":
        pts = pts[:, ::-1]
    return LandmarkSet(pts.copy(), convention=convention)


def load_case(meta: CaseMeta):
    """Load all phases and landmark sets of one case.

    Returns the group with raw intensities (normalization is a separate,
    explicit step) and landmarks already converted to zero-based (z, y, x).
    """
    volumes = tuple(_read_raw_volume(p, meta.dims, meta.spacing)
                    for p in meta.phase_files)
    group = ImageGroup(volumes)
    landmarks = []
    for p in meta.landmark_files:
        lm = _read_landmarks(p, meta.landmark_axis_order, meta.landmark_convention)
        landmarks.append(convert_landmarks(lm, ZERO_BASED, grid=group.grid))
    return group, landmarks


def normalize(volume: Volume, divisor: float = 1000.0, offset: float = 0.0) -> Volume:
    """Affine intensity map v -> (v - offset) / divisor."""
    if divisor == 0:
        raise ValueError("divisor must be nonzero")
    return Volume(volume.grid, (volume.data - offset) / divisor)


def normalize_group(group: ImageGroup, divisor: float = 1000.0,
                    offset: float = 0.0) -> ImageGroup:
    return ImageGroup(tuple(normalize(v, divisor, offset) for v in group.volumes),
                      group.phase_labels)


def crop_to_landmarks(group: ImageGroup, landmark_sets, margin: int = 8):
    """Crop the group to the landmark bounding box plus a margin.

    The box is [floor(min) - margin, ceil(max) + margin] per axis over the
    union of all sets, clamped to the grid. Returns the cropped group, the
    landmark sets re-expressed in cropped coordinates, and the crop offset
    for mapping results back (original = cropped + offset).
    """
    pts = [lm.points for lm in landmark_sets if len(lm)]
    if not pts:
        raise ValueError("no landmarks to crop to")
    for lm in landmark_sets:
        if lm.convention != ZERO_BASED:
            raise ValueError("landmarks must be zero-based before cropping")
        if not lm.inside(group.grid):
            raise ValueError("landmark outside the grid")
    allpts = np.concatenate(pts)
    dims = np.asarray(group.grid.dims)
    lo = np.maximum(np.floor(allpts.min(axis=0)).astype(int) - margin, 0)
    hi = np.minimum(np.ceil(allpts.max(axis=0)).astype(int) + margin, dims - 1)
    new_dims = tuple(int(d) for d in hi - lo + 1)
    grid = Grid3(new_dims, group.grid.spacing)
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
    cropped = ImageGroup(
        tuple(Volume(grid, v.data[sl]) for v in group.volumes), group.phase_labels
    )
    shifted = [LandmarkSet(lm.points - lo, convention=ZERO_BASED)
               for lm in landmark_sets]
    return cropped, shifted, tuple(int(v) for v in lo)


# ---------------------------------------------------------------------------
# synthetic phantom with analytic ground truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    num_phases: int = 4
    max_amplitude: float = 4.0
    num_landmarks: int = 50
    seed: int = 0
    periodic: bool = True
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.num_phases < 2:
            raise ValueError("num_phases must be >= 2")
        if self.max_amplitude < 0:
            raise ValueError("max_amplitude must be >= 0")
        if self.max_amplitude >= min(self.dims) / 8:
            raise ValueError(
                f"max_amplitude {self.max_amplitude} too large for dims {self.dims}"
                f" (must stay under {min(self.dims) / 8})"
            )
        if self.num_landmarks < 1:
            raise ValueError("num_landmarks must be >= 1")
        Grid3(self.dims, self.spacing)


class _PhantomModel:
    """Closed-form base texture and motion, evaluable at any real coordinate."""

    # anisotropic motion direction; components <= 1 keep the derivative
    # bound at amplitude * pi / (min(dims) - 1)
    DIRECTION = np.array([0.6, 0.8, 1.0])

    def __init__(self, spec: PhantomSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        scale = float(np.mean(spec.dims))
        j = 12
        dirs = rng.normal(size=(j, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cycles = rng.uniform(2.0, 6.0, size=j)
        self._wavevec = dirs * (2 * np.pi * cycles / scale)[:, None]
        self._wamp = rng.uniform(0.3, 1.0, size=j)
        self._wphase = rng.uniform(0, 2 * np.pi, size=j)
        m = 6
        lo, hi = 0.2 * np.asarray(spec.dims), 0.8 * np.asarray(spec.dims)
        self._centers = rng.uniform(lo, hi, size=(m, 3))
        self._radii = rng.uniform(scale / 10, scale / 5, size=(m, 3))
        self._bamp = rng.uniform(0.8, 1.6, size=m) * rng.choice([-1.0, 1.0], size=m)

    def texture(self, p: np.ndarray) -> np.ndarray:
        """Base image at continuous coords p (..., 3)."""
        out = np.zeros(p.shape[:-1])
        for k, amp, ph in zip(self._wavevec, self._wamp, self._wphase):
            out += amp * np.sin(p @ k + ph)
        for c, r, amp in zip(self._centers, self._radii, self._bamp):
            out += amp * np.exp(-(((p - c) / r) ** 2).sum(axis=-1))
        return out

    def time_factor(self, n: int) -> float:
        spec = self.spec
        if spec.periodic:
            return float(np.sin(2 * np.pi * n / spec.num_phases))
        return n / (spec.num_phases - 1)

    def truth_field(self, n: int, p: np.ndarray) -> np.ndarray:
        """Ground-truth displacement of phase n at template coords p (..., 3)."""
        dims = np.asarray(self.spec.dims, dtype=float)
        envelope = np.prod(np.sin(np.pi * p / (dims - 1)), axis=-1)
        coeff = self.spec.max_amplitude * self.time_factor(n)
        return coeff * envelope[..., None] * self.DIRECTION

    def inverse_field(self, n: int, x: np.ndarray, sweeps: int = 60) -> np.ndarray:
        """Analytic fixed-point inverse of the truth field at coords x."""
        v = np.zeros_like(x)
        for _ in range(sweeps):
            v = -self.truth_field(n, x + v)
        return v


def make_phantom(spec: PhantomSpec):
    """Synthesize an image group with exactly known motion.

    Returns (group, truth fields, per-phase landmark sets). Phase n holds
    the base texture deformed so that warping it by the truth field
    recovers the base; landmark row k of every per-phase set tracks the
    same material point.
    """
    model = _PhantomModel(spec)
    grid = Grid3(spec.dims, spec.spacing)
    coords = np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.dims],
                    indexing="ij"),
        axis=-1,
    )  # (D, H, W, 3)

    volumes, fields = [], []
    for n in range(spec.num_phases):
        # I_n(x) = base(x + inverse(x)) makes base(t) = I_n(t + truth(t))
        inv = model.inverse_field(n, coords)
        volumes.append(Volume(grid, model.texture(coords + inv)))
        truth = model.truth_field(n, coords)  # (D, H, W, 3)
        fields.append(DisplacementField(grid, np.moveaxis(truth, -1, 0)))

    rng = np.random.default_rng(spec.seed + 1)
    margin = int(np.ceil(spec.max_amplitude)) + 2
    lo = np.full(3, margin, dtype=float)
    hi = np.asarray(spec.dims, dtype=float) - 1 - margin
    base_pts = rng.uniform(lo, hi, size=(spec.num_landmarks, 3))
    landmark_sets = [
        LandmarkSet(base_pts + model.truth_field(n, base_pts),
                    convention=ZERO_BASED)
        for n in range(spec.num_phases)
    ]
    return ImageGroup(tuple(volumes)), FieldSet(tuple(fields)), landmark_sets


# ---------------------------------------------------------------------------
# displacement-field files
# ---------------------------------------------------------------------------

_DVF_MAGIC = "DVF1"


def save_field(field: DisplacementField, path) -> None:
    """Write a field as a text header plus raw little-endian float32 payload.

    The payload is component-major: all dz values (C-order over D, H, W),
    then all dy, then all dx — 3*D*H*W floats. Exact layout in
    docs/file_formats.md.
    """
    d, h, w = field.grid.dims
    sz, sy, sx = field.grid.spacing
    header = (
        f"{_DVF_MAGIC}\n"
        f"dims: {d} {h} {w}\n"
        f"spacing: {sz!r} {sy!r} {sx!r}\n"
        f"components: dz dy dx\n"
        f"units: voxel\n"
        f"\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(field.vectors, dtype="<f4").tobytes())


def load_field(path) -> DisplacementField:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"\n\n")
    if not blob.startswith(_DVF_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a displacement-field file")
    fields = {}
    for line in blob[:end].decode("ascii").splitlines()[1:]:
        key, _, val = line.partition(":")
        fields[key.strip()] = val.strip()
    dims = tuple(int(v) for v in fields["dims"].split())
    spacing = tuple(float(v) for v in fields["spacing"].split())
    if fields.get("components") != "dz dy dx":
        raise ValueError(f"{path}: unsupported component order")
    payload = blob[end + 2:]
    expected = 4 * 3 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    vec = np.frombuffer(payload, dtype="<f4").reshape(3, *dims)
    return DisplacementField(Grid3(dims, spacing), vec.copy())


def save_fieldset(fieldset: FieldSet, out_dir, labels=None) -> None:
    """One .dvf per phase plus an index manifest."""
    os.makedirs(out_dir, exist_ok=True)
    labels = list(labels) if labels else [f"P{i:02d}" for i in range(len(fieldset))]
    names = [f"field_{lab}.dvf" for lab in labels]
    for f, name in zip(fieldset.fields, names):
        save_field(f, os.path.join(out_dir, name))
    index = {
        "num_fields": len(fieldset),
        "files": names,
        "dims": list(fieldset.grid.dims),
        "spacing": list(fieldset.grid.spacing),
    }
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, indent=2)
        f.write("\n")


def load_fieldset(in_dir) -> FieldSet:
    with open(os.path.join(in_dir, "index.json")) as f:
        index = json.load(f)
    return FieldSet(tuple(load_field(os.path.join(in_dir, name))
                          for name in index["files"]))


__all__ = [
    "DATA_ROOT_ENV",
    "CaseMeta",
    "PhantomSpec",
    "load_manifest",
    "load_case",
    "normalize",
    "normalize_group",
    "crop_to_landmarks",
    "make_phantom",
    "save_field",
    "load_field",
    "save_fieldset",
    "load_fieldset",
]
