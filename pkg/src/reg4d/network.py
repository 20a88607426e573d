"""Displacement-predicting convolutional network.

A U-Net-shaped encoder-decoder with four departures from the vanilla
design: resolution changes are plain trilinear interpolation layers (no
max-pooling, no transposed convolutions), batch normalization is replaced
by instance normalization (the batch size here is one group), each level
has exactly ONE conv-norm-activation block, and activations are leaky
rectifications. The input is the whole phase stack as channels, downscaled
to ``inference_scale``; the output is 3 displacement channels per phase,
rescaled back to the original dims. All vector values are in voxel units
of the original-resolution grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import FieldSet, ImageGroup
from .fields import rescale_tensor


@dataclass(frozen=True)
class NetConfig:
    num_phases: int
    num_downscales: int = 3
    base_channels: int = 32
    inference_scale: float = 0.5
    leaky_slope: float = 0.2
    kernel_size: int = 3

    def __post_init__(self):
        if self.num_phases < 2:
            raise ValueError("num_phases must be >= 2")
        if self.num_downscales < 1:
            raise ValueError("num_downscales must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if not 0 < self.inference_scale <= 1:
            raise ValueError("inference_scale must be in (0, 1]")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")


class NonFiniteError(RuntimeError):
    """A forward pass produced NaN/Inf; carries the offending layer."""

    def __init__(self, layer_index: int, layer_name: str):
        super().__init__(f"non-finite values after layer {layer_index} ({layer_name})")
        self.layer_index = layer_index
        self.layer_name = layer_name


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _block(in_ch: int, out_ch: int, cfg: NetConfig) -> nn.Sequential:
    # one conv-norm-activation unit per level
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, cfg.kernel_size, padding=cfg.kernel_size // 2),
        nn.InstanceNorm3d(out_ch, eps=1e-5, affine=True),
        nn.LeakyReLU(cfg.leaky_slope),
    )


class DisplacementNet(nn.Module):
    """Maps a stacked phase group (N, D, H, W) to N displacement fields."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        n, base, levels = config.num_phases, config.base_channels, config.num_downscales

        chans = [base * 2 ** k for k in range(levels + 1)]
        self.enc = nn.ModuleList(
            [_block(n, chans[0], config)]
            + [_block(chans[k - 1], chans[k], config) for k in range(1, levels + 1)]
        )
        self.dec = nn.ModuleList(
            [_block(chans[k + 1] + chans[k], chans[k], config)
             for k in reversed(range(levels))]
        )
        self.out = nn.Conv3d(
            chans[0], 3 * n, config.kernel_size, padding=config.kernel_size // 2
        )

    def _check(self, t: torch.Tensor, index: int, name: str) -> torch.Tensor:
        if not torch.isfinite(t).all():
            raise NonFiniteError(index, name)
        return t

    def internal_dims(self, dims) -> tuple[int, int, int]:
        """Working resolution: round-half-up of dims x inference_scale."""
        return tuple(_round_half_up(d * self.config.inference_scale) for d in dims)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """stack (N, D, H, W) -> displacement fields (N, 3, D, H, W)."""
        cfg = self.config
        if stack.shape[0] != cfg.num_phases:
            raise ValueError(f"expected {cfg.num_phases} phases, got {stack.shape[0]}")
        orig_dims = tuple(stack.shape[1:])

        # per-level working resolutions, halving with round-half-up
        dims = [self.internal_dims(orig_dims)]
        for _ in range(cfg.num_downscales):
            dims.append(tuple(_round_half_up(d / 2) for d in dims[-1]))
        if any(d < 2 for d in dims[-1]):
            raise ValueError(
                f"input dims {orig_dims} too small: coarsest level would be {dims[-1]}"
            )

        t = rescale_tensor(stack, dims[0])[None]  # (1, N, d, h, w)
        layer = 0
        skips = []
        for k, block in enumerate(self.enc):
            if k > 0:
                t = F.interpolate(t, size=dims[k], mode="trilinear", align_corners=True)
            t = self._check(block(t), layer, f"enc{k}")
            layer += 1
            skips.append(t)

        t = skips.pop()
        for i, block in enumerate(self.dec):
            skip = skips.pop()
            t = F.interpolate(t, size=skip.shape[2:], mode="trilinear", align_corners=True)
            t = self._check(block(torch.cat([t, skip], dim=1)), layer, f"dec{i}")
            layer += 1

        y = self._check(self.out(t), layer, "out")[0]  # (3N, d, h, w)
        y = rescale_tensor(y, orig_dims)
        return y.reshape(cfg.num_phases, 3, *orig_dims)


def build_network(config: NetConfig, seed: int = 0) -> DisplacementNet:
    """Deterministically construct and initialize the network.

    All convolution kernels get variance-scaling (Kaiming) initialization
    matched to the leaky activation; all biases start at zero; the
    normalization affine parameters start at identity. Checks that depend
    on the input dims (coarsest level >= 2 voxels) run on the first forward.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = DisplacementNet(config)
        for m in net.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_uniform_(
                    m.weight, a=config.leaky_slope, nonlinearity="leaky_relu"
                )
                nn.init.zeros_(m.bias)
    return net


def predict_fields(net: DisplacementNet, group: ImageGroup) -> FieldSet:
    """Run the network on an image group and package the output fields."""
    dtype = next(net.parameters()).dtype
    stack = torch.tensor(group.stacked(), dtype=dtype)
    with torch.no_grad():
        out = net(stack)
    return FieldSet.for_group(group, out.numpy())


def save_weights(net: DisplacementNet, path) -> None:
    """Archive all parameters plus the config as one .npz file.

    Keys are the layer-qualified parameter names; the config rides along as
    a JSON string under ``__config__``.
    """
    arrays = {k: v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    arrays["__config__"] = np.frombuffer(
        json.dumps(asdict(net.config)).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_weights(path) -> DisplacementNet:
    """Rebuild a network from a weight archive written by save_weights."""
    with np.load(path) as z:
        cfg = NetConfig(**json.loads(bytes(z["__config__"]).decode()))
        state = {k: torch.tensor(z[k]) for k in z.files if k != "__config__"}
    net = DisplacementNet(cfg)
    net.load_state_dict(state)
    return net


__all__ = [
    "NetConfig",
    "NonFiniteError",
    "DisplacementNet",
    "build_network",
    "predict_fields",
    "save_weights",
    "load_weights",
]
