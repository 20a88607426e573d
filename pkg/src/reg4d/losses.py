"""The three training losses and their weighted sum.

* similarity: mean negative local NCC between every warped phase and the
  group-mean template,
* smoothness: L1 norm of forward-difference field gradients, attenuated
  where the template itself has strong gradients,
* cyclic: RMS of the per-voxel sum of all phase displacements, which pins
  the implicit template to the center of the group's motion.

Every function has two entry modes sharing one implementation: pass the
immutable numpy-backed core types and get plain floats back, or pass torch
tensors (volumes ``(D, H, W)``, groups ``(N, D, H, W)``, field stacks
``(N, 3, D, H, W)``) and get differentiable 0-dim tensors back.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import FieldSet, ImageGroup, Volume

# added inside the NCC denominator sqrt so flat patches stay finite
NCC_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective; defaults follow the reference setting."""

    lambda0: float = 1e-3   # smoothness
    lambda1: float = 1e-2   # cyclic
    ncc_window: int = 5

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Per-term values plus their weighted total.

    Entries are floats or 0-dim tensors depending on how the loss was
    evaluated; ``total`` is always exactly
    ``similarity + lambda0 * smoothness + lambda1 * cyclic``.
    """

    similarity: object
    smoothness: object
    cyclic: object
    total: object

    def as_floats(self) -> "LossBreakdown":
        def f(x):
            return float(x.detach()) if torch.is_tensor(x) else float(x)

        return LossBreakdown(
            f(self.similarity), f(self.smoothness), f(self.cyclic), f(self.total))


def _vol_tensor(v) -> torch.Tensor:
    if torch.is_tensor(v):
        return v
    if isinstance(v, Volume):
        return torch.tensor(v.data, dtype=torch.float64)
    raise TypeError(f"expected Volume or tensor, got {type(v).__name__}")


def _group_tensor(g) -> torch.Tensor:
    if torch.is_tensor(g):
        return g
    if isinstance(g, ImageGroup):
        return torch.tensor(g.stacked(), dtype=torch.float64)
    raise TypeError(f"expected ImageGroup or tensor, got {type(g).__name__}")


def _fields_tensor(f) -> torch.Tensor:
    if torch.is_tensor(f):
        return f
    if isinstance(f, FieldSet):
        return torch.tensor(f.stacked(), dtype=torch.float64)
    raise TypeError(f"expected FieldSet or tensor, got {type(f).__name__}")


def _box_sum(x: torch.Tensor, window: int) -> torch.Tensor:
    """Sum of x over the n^3 cube around each voxel, zeros outside the grid."""
    mean = F.avg_pool3d(
        x[:, None], window, stride=1, padding=window // 2, count_include_pad=True
    )[:, 0]
    return mean * window ** 3


def _ncc_map(f: torch.Tensor, g: torch.Tensor, window: int) -> torch.Tensor:
    """Per-voxel local NCC of stacked volumes (N, D, H, W) -> (N, D, H, W)."""
    n3 = window ** 3
    sf, sg = _box_sum(f, window), _box_sum(g, window)
    mf, mg = sf / n3, sg / n3
    cross = _box_sum(f * g, window) - n3 * mf * mg
    # windowed sums of squared deviations; clamp guards float cancellation
    var_f = (_box_sum(f * f, window) - n3 * mf * mf).clamp(min=0)
    var_g = (_box_sum(g * g, window) - n3 * mg * mg).clamp(min=0)
    return cross / torch.sqrt(var_f * var_g + NCC_EPS)


def local_ncc_map(f, g, window: int = 5):
    """Per-voxel local NCC as an array/tensor of the input shape.

    Border windows read zeros outside the grid but keep the full n^3
    normalization count, so the value is deterministic everywhere. Note
    the padding zeros do NOT follow intensity offsets: adding a constant
    to one image shifts border-window values, so affine invariance holds
    exactly only for windows fully inside the grid (pure rescaling is
    invariant everywhere).
    """
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    tensors = torch.is_tensor(f)
    ft, gt = _vol_tensor(f), _vol_tensor(g)
    if ft.shape != gt.shape:
        raise ValueError(f"dims mismatch: {tuple(ft.shape)} vs {tuple(gt.shape)}")
    out = _ncc_map(ft[None], gt[None], window)[0]
    return out if tensors else out.numpy()


def local_ncc(f, g, window: int = 5):
    """Mean local normalized cross-correlation over the whole grid."""
    tensors = torch.is_tensor(f)
    val = local_ncc_map(f, g, window)
    val = val.mean() if tensors else float(val.mean())
    return val


def similarity_loss(warped, template, window: int = 5):
    """Negative mean NCC of every phase against the template."""
    tensors = torch.is_tensor(warped)
    wt, tt = _group_tensor(warped), _vol_tensor(template)
    if wt.shape[1:] != tt.shape:
        raise ValueError(f"dims mismatch: {tuple(wt.shape[1:])} vs {tuple(tt.shape)}")
    val = -_ncc_map(wt, tt[None].expand_as(wt), window).mean()
    return val if tensors else float(val)


def _fwd_diff(t: torch.Tensor, axis: int) -> torch.Tensor:
    """Forward difference along a spatial axis, zero at the last index."""
    d = torch.diff(t, dim=axis)
    pad = [0, 0] * (t.dim() - 1 - axis) + [0, 1]
    return F.pad(d, pad)


def smoothness_loss(fields, template, block_template_gradient: bool = False):
    """Gradient-magnitude penalty on the fields, relaxed at template edges.

    For each axis the L1 norm of the field's forward difference is scaled
    by exp(-|forward difference of the template|) and averaged over axes,
    phases, and voxels. With ``block_template_gradient`` the template enters
    as a constant instead of participating in differentiation.
    """
    tensors = torch.is_tensor(fields)
    ft, tt = _fields_tensor(fields), _vol_tensor(template)
    if ft.shape[2:] != tt.shape:
        raise ValueError(f"dims mismatch: {tuple(ft.shape[2:])} vs {tuple(tt.shape)}")
    if block_template_gradient:
        tt = tt.detach()
    n_phases = ft.shape[0]
    total = None
    for axis in range(3):
        w = torch.exp(-_fwd_diff(tt, axis).abs())
        grad_l1 = _fwd_diff(ft, axis + 2).abs().sum(dim=1)  # over vector components
        term = (grad_l1 * w[None]).sum()
        total = term if total is None else total + term
    val = total / (3 * n_phases * tt.numel())
    return val if tensors else float(val)


def cyclic_loss(fields):
    """RMS per-voxel sum of all phase displacements; zero iff they cancel."""
    tensors = torch.is_tensor(fields)
    ft = _fields_tensor(fields)
    s = ft.sum(dim=0)  # (3, D, H, W)
    val = torch.sqrt((s ** 2).sum() / s.numel())
    return val if tensors else float(val)


def total_loss(warped, template, fields, weights: LossWeights = LossWeights(),
               block_template_gradient: bool = False) -> LossBreakdown:
    """All three terms and their weighted sum as one LossBreakdown."""
    sim = similarity_loss(warped, template, weights.ncc_window)
    smo = smoothness_loss(fields, template, block_template_gradient)
    cyc = cyclic_loss(fields)
    total = sim + weights.lambda0 * smo + weights.lambda1 * cyc
    return LossBreakdown(sim, smo, cyc, total)


__all__ = [
    "NCC_EPS",
    "LossWeights",
    "LossBreakdown",
    "local_ncc",
    "local_ncc_map",
    "similarity_loss",
    "smoothness_loss",
    "cyclic_loss",
    "total_loss",
]
