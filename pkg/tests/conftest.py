import sys
import os

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))  # make oracles importable

from reg4d.core import DisplacementField, FieldSet, Grid3, ImageGroup, Volume


def zero_final_layer(net) -> None:
    """Test fixture helper: a zeroed output convolution makes the network
    emit exactly zero fields regardless of input."""
    with torch.no_grad():
        net.out.weight.zero_()
        net.out.bias.zero_()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(Grid3(dims, spacing), rng.normal(size=dims))


def random_group(rng, dims, n, spacing=(1.0, 1.0, 1.0)) -> ImageGroup:
    return ImageGroup(tuple(random_volume(rng, dims, spacing) for _ in range(n)))


def smooth_field(rng, dims, amplitude, cycles=1.0) -> DisplacementField:
    """Band-limited random field with max |component| <= amplitude and
    spatial derivative bounded by amplitude * 2*pi*cycles / min(dims)."""
    grid = Grid3(dims)
    axes = [np.arange(s, dtype=np.float64) for s in dims]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    comps = []
    for _ in range(3):
        phase = rng.uniform(0, 2 * np.pi, size=3)
        w = 2 * np.pi * cycles / np.asarray(dims)
        comp = (np.sin(w[0] * zz + phase[0])
                * np.sin(w[1] * yy + phase[1])
                * np.sin(w[2] * xx + phase[2]))
        comps.append(amplitude * comp)
    return DisplacementField(grid, np.stack(comps))


def constant_field(dims, vec) -> DisplacementField:
    v = np.zeros((3, *dims))
    for c in range(3):
        v[c] = vec[c]
    return DisplacementField(Grid3(dims), v)


def as_fieldset(*fields) -> FieldSet:
    return FieldSet(tuple(fields))
