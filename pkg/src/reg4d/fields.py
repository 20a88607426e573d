"""Displacement-field algebra: warping, rescaling, inversion, composition.

Everything here is a pure function. The public API works on the immutable
numpy-backed types from :mod:`reg4d.core`; the ``*_tensor`` variants work on
torch tensors and are differentiable, which is what the optimization loop
uses. Both share one trilinear sampling core so semantics cannot drift.

Sampling convention: coordinates are clamped to the valid range
``[0, size-1]`` per axis *before* interpolation (border clamp), so samples
never read outside the grid and a zero field reproduces the input bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    DisplacementField,
    FieldSet,
    Grid3,
    LandmarkSet,
    Volume,
    ZERO_BASED,
)


@dataclass(frozen=True)
class InversionParams:
    """Fixed-point inversion controls: stop when the max per-component
    update falls to ``tol`` voxels, or after ``max_iters`` sweeps."""

    max_iters: int = 50
    tol: float = 0.01

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True, eq=False)
class InversionResult:
    """A field plus the convergence record of the inversion that produced it.

    Non-convergence is reported here rather than raised; ``field`` is the
    best iterate either way. Field-consuming functions in this module accept
    an InversionResult anywhere a DisplacementField is expected.
    """

    field: DisplacementField
    converged: bool
    iterations: int
    max_residual: float


def _as_field(obj) -> DisplacementField:
    if isinstance(obj, InversionResult):
        return obj.field
    return obj


# ---------------------------------------------------------------------------
# tensor core
# ---------------------------------------------------------------------------

def identity_grid(dims, dtype=torch.float32, device=None) -> torch.Tensor:
    """Voxel-coordinate grid of shape (3, D, H, W), order (z, y, x)."""
    axes = [torch.arange(s, dtype=dtype, device=device) for s in dims]
    zz, yy, xx = torch.meshgrid(*axes, indexing="ij")
    return torch.stack([zz, yy, xx])


def trilinear_sample(values: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``values`` (C, D, H, W) at continuous ``coords`` (3, *S) -> (C, *S).

    Coordinates are border-clamped. Differentiable in both arguments.
    """
    C, D, H, W = values.shape
    out_shape = coords.shape[1:]

    z = coords[0].clamp(0, D - 1)
    y = coords[1].clamp(0, H - 1)
    x = coords[2].clamp(0, W - 1)

    # anchor cell so the +1 corner stays in range even at the far border
    z0 = z.detach().floor().clamp(0, max(D - 2, 0)).long()
    y0 = y.detach().floor().clamp(0, max(H - 2, 0)).long()
    x0 = x.detach().floor().clamp(0, max(W - 2, 0)).long()
    fz = z - z0
    fy = y - y0
    fx = x - x0

    flat = values.reshape(C, -1)
    base = (z0 * H + y0) * W + x0
    stride_z, stride_y = H * W, W

    out = torch.zeros((C, *out_shape), dtype=values.dtype, device=values.device)
    for dz in (0, 1):
        wz = fz if dz else 1 - fz
        for dy in (0, 1):
            wy = fy if dy else 1 - fy
            for dx in (0, 1):
                wx = fx if dx else 1 - fx
                idx = (base + dz * stride_z + dy * stride_y + dx).reshape(-1)
                corner = flat.index_select(1, idx).reshape(C, *out_shape)
                out = out + corner * (wz * wy * wx)
    return out


def warp_tensor(image: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Warp (D, H, W) or (C, D, H, W) image by a (3, D, H, W) field."""
    squeeze = image.dim() == 3
    vals = image[None] if squeeze else image
    coords = identity_grid(vals.shape[1:], dtype=field.dtype, device=field.device) + field
    out = trilinear_sample(vals, coords)
    return out[0] if squeeze else out


def warp_stack(images: torch.Tensor, fields: torch.Tensor) -> torch.Tensor:
    """Warp N phases at once: images (N, D, H, W), fields (N, 3, D, H, W)."""
    return torch.stack([warp_tensor(img, fld) for img, fld in zip(images, fields)])


def rescale_tensor(values: torch.Tensor, target_dims) -> torch.Tensor:
    """Trilinearly resample (C, D, H, W) onto new dims, corners aligned."""
    if tuple(values.shape[1:]) == tuple(target_dims):
        return values
    return F.interpolate(
        values[None], size=tuple(target_dims), mode="trilinear", align_corners=True
    )[0]


def _invert_tensor(field: torch.Tensor, params: InversionParams):
    coords = identity_grid(field.shape[1:], dtype=field.dtype, device=field.device)
    v = torch.zeros_like(field)
    iterations = 0
    for _ in range(params.max_iters):
        v_new = -trilinear_sample(field, coords + v)
        update = (v_new - v).abs().max().item()
        v = v_new
        iterations += 1
        if update <= params.tol:
            break
    residual = (trilinear_sample(field, coords + v) + v).abs().max().item()
    return v, residual <= params.tol, iterations, residual


def _compose_tensor(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    coords = identity_grid(inner.shape[1:], dtype=inner.dtype, device=inner.device)
    return trilinear_sample(outer, coords + inner) + inner


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.tensor(a, dtype=torch.float64)


# ---------------------------------------------------------------------------
# public API on core types
# ---------------------------------------------------------------------------

def warp(moving: Volume, field) -> Volume:
    """Resample ``moving`` at x + D(x): pulls the moving image onto the
    field's grid, border-clamped trilinear."""
    field = _as_field(field)
    if moving.grid.dims != field.grid.dims:
        raise ValueError(
            f"volume dims {moving.grid.dims} != field dims {field.grid.dims}"
        )
    out = warp_tensor(_to_tensor(moving.data), _to_tensor(field.vectors))
    return Volume(moving.grid, out.numpy())


def rescale_field(field, target_dims) -> DisplacementField:
    """Resample each vector component onto ``target_dims`` (corner-aligned).

    Component values pass through unchanged: they are expressed in voxel
    units of the original full-resolution grid no matter which resolution
    the field itself is stored at.
    """
    field = _as_field(field)
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 2:
        raise ValueError(f"target dims must be three values >= 2, got {target_dims}")
    # corner-to-corner physical extent is preserved across the resample
    sp = tuple(
        s * (sd - 1) / (td - 1)
        for s, sd, td in zip(field.grid.spacing, field.grid.dims, target_dims)
    )
    grid = Grid3(target_dims, sp)
    if target_dims == field.grid.dims:
        return DisplacementField(grid, field.vectors)
    out = rescale_tensor(_to_tensor(field.vectors), target_dims)
    return DisplacementField(grid, out.numpy())


def invert_field(field, params: InversionParams = InversionParams()) -> InversionResult:
    """Fixed-point inverse: iterate v <- -D(x + v) from v = 0.

    Returns the iterate once the update drops to ``params.tol`` voxels (or
    after ``max_iters``), together with the measured residual
    max |D(x + v) + v|. Non-convergence is flagged, never raised.
    """
    field = _as_field(field)
    v, converged, iters, residual = _invert_tensor(_to_tensor(field.vectors), params)
    return InversionResult(
        field=DisplacementField(field.grid, v.numpy()),
        converged=converged,
        iterations=iters,
        max_residual=residual,
    )


def compose(outer, inner) -> DisplacementField:
    """Displacement of outer∘inner: result(x) = D_out(x + D_in(x)) + D_in(x)."""
    outer, inner = _as_field(outer), _as_field(inner)
    if outer.grid.dims != inner.grid.dims:
        raise ValueError(f"dims mismatch: {outer.grid.dims} vs {inner.grid.dims}")
    out = _compose_tensor(_to_tensor(outer.vectors), _to_tensor(inner.vectors))
    return DisplacementField(inner.grid, out.numpy())


def pairwise_field(
    fieldset: FieldSet, m: int, n: int, params: InversionParams = InversionParams()
) -> InversionResult:
    """Field mapping phase-m coordinates to phase-n coordinates.

    Built from the per-phase template fields as compose(D_n, invert(D_m));
    the inversion's convergence record rides along in the result.
    """
    if not (0 <= m < len(fieldset) and 0 <= n < len(fieldset)):
        raise IndexError(f"phase index out of range for {len(fieldset)} fields")
    inv = invert_field(fieldset[m], params)
    composed = compose(fieldset[n], inv.field)
    return InversionResult(
        field=composed,
        converged=inv.converged,
        iterations=inv.iterations,
        max_residual=inv.max_residual,
    )


def transport_landmarks(lm: LandmarkSet, field) -> LandmarkSet:
    """Move each landmark by the field sampled at it: p -> p + D(p)."""
    field = _as_field(field)
    if lm.convention != ZERO_BASED:
        raise ValueError("landmarks must be zero-based before transport")
    if not lm.inside(field.grid):
        raise ValueError("landmark outside the field's grid")
    coords = _to_tensor(lm.points.T)  # (3, K)
    disp = trilinear_sample(_to_tensor(field.vectors), coords)  # (3, K)
    return LandmarkSet(lm.points + disp.numpy().T, convention=ZERO_BASED)


__all__ = [
    "InversionParams",
    "InversionResult",
    "identity_grid",
    "trilinear_sample",
    "warp_tensor",
    "warp_stack",
    "rescale_tensor",
    "warp",
    "rescale_field",
    "invert_field",
    "compose",
    "pairwise_field",
    "transport_landmarks",
]
