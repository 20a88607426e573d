import numpy as np
import pytest

from reg4d.core import DisplacementField, FieldSet, Grid3, LandmarkSet, Volume
from reg4d.fields import (
    InversionParams,
    compose,
    invert_field,
    pairwise_field,
    rescale_field,
    transport_landmarks,
    warp,
)

from conftest import constant_field, random_volume, smooth_field
from oracles import linear_axis_interp_reference, trilinear_reference


def interior(a, band):
    return a[..., band:-band, band:-band, band:-band]


class TestWarp:
    def test_zero_field_identity_bitwise(self, rng):
        v = random_volume(rng, (5, 6, 7))
        out = warp(v, DisplacementField.zeros(v.grid))
        assert np.array_equal(out.data, v.data)

    def test_ramp_clamps_at_border(self):
        # f(z,y,x) = x shifted by +2 saturates at the last column
        g = Grid3((2, 2, 8))
        ramp = Volume(g, np.tile(np.arange(8.0), (2, 2, 1)))
        out = warp(ramp, constant_field(g.dims, (0, 0, 2)))
        expected = np.minimum(np.arange(8.0) + 2, 7.0)
        assert np.allclose(out.data, expected[None, None, :], atol=1e-12)

    def test_constant_volume_invariant(self, rng):
        g = Grid3((8, 8, 8))
        c = Volume(g, np.full(g.dims, 2.5))
        fld = smooth_field(rng, g.dims, amplitude=1.5)
        assert np.allclose(warp(c, fld).data, 2.5, atol=1e-12)

    def test_dims_mismatch(self, rng):
        v = random_volume(rng, (4, 4, 4))
        with pytest.raises(ValueError):
            warp(v, DisplacementField.zeros(Grid3((4, 4, 5))))

    def test_matches_pointwise_reference(self, rng):
        v = random_volume(rng, (6, 6, 6))
        fld = smooth_field(rng, (6, 6, 6), amplitude=1.2)
        out = warp(v, fld)
        for z, y, x in [(0, 0, 0), (2, 3, 4), (5, 5, 5), (1, 4, 2)]:
            want = trilinear_reference(
                v.data,
                z + fld.vectors[0, z, y, x],
                y + fld.vectors[1, z, y, x],
                x + fld.vectors[2, z, y, x],
            )
            assert out.data[z, y, x] == pytest.approx(want, abs=1e-12)


class TestRescale:
    def test_constant_preserved(self):
        fld = constant_field((8, 8, 8), (1.0, 2.0, 3.0))
        up = rescale_field(fld, (16, 16, 16))
        assert up.grid.dims == (16, 16, 16)
        for c, v in enumerate((1.0, 2.0, 3.0)):
            assert np.allclose(up.vectors[c], v, atol=1e-6)

    def test_zero_any_scale(self):
        z = DisplacementField.zeros(Grid3((6, 6, 6)))
        assert not rescale_field(z, (9, 11, 5)).vectors.any()

    def test_linear_field_against_reference(self):
        # dx(x) = x/8, varying along x only
        vec = np.zeros((3, 8, 8, 8))
        vec[2] = np.arange(8.0) / 8.0
        up = rescale_field(DisplacementField(Grid3((8, 8, 8)), vec), (8, 8, 16))
        want = linear_axis_interp_reference(np.arange(8.0) / 8.0, 8, 16)
        assert np.allclose(up.vectors[2][0, 0], want, atol=1e-6)
        assert np.allclose(up.vectors[0], 0.0, atol=1e-9)

    def test_same_dims_identity(self, rng):
        fld = smooth_field(rng, (6, 7, 8), amplitude=1.0)
        out = rescale_field(fld, (6, 7, 8))
        assert np.allclose(out.vectors, fld.vectors, atol=1e-6)

    def test_degenerate_target(self):
        fld = DisplacementField.zeros(Grid3((6, 6, 6)))
        with pytest.raises(ValueError):
            rescale_field(fld, (6, 6, 1))


class TestInversion:
    def test_params_validation(self):
        with pytest.raises(ValueError):
            InversionParams(max_iters=0)
        with pytest.raises(ValueError):
            InversionParams(tol=0.0)

    def test_zero_field(self):
        res = invert_field(DisplacementField.zeros(Grid3((6, 6, 6))))
        assert res.converged
        assert res.iterations == 1
        assert res.max_residual == 0.0
        assert not res.field.vectors.any()

    def test_constant_translation_interior(self):
        fld = constant_field((24, 24, 24), (0, 0, 3))
        res = invert_field(fld)
        assert res.converged
        inner = interior(res.field.vectors, 4)
        assert np.allclose(inner[2], -3.0, atol=1e-6)
        assert np.allclose(inner[:2], 0.0, atol=1e-6)

    def test_smooth_field_residual(self, rng):
        # max |component| 2 voxels, max derivative < 0.5
        fld = smooth_field(rng, (32, 32, 32), amplitude=2.0)
        res = invert_field(fld)
        composed = compose(fld, res.field)
        assert np.abs(interior(composed.vectors, 3)).max() < 0.1

    def test_double_inversion(self, rng):
        fld = smooth_field(rng, (32, 32, 32), amplitude=0.5)
        params = InversionParams(max_iters=50, tol=0.01)
        twice = invert_field(invert_field(fld, params), params)
        err = np.abs(interior(twice.field.vectors - fld.vectors, 3)).max()
        assert err < 2 * params.tol

    def test_non_convergence_flagged(self, rng):
        fld = smooth_field(rng, (16, 16, 16), amplitude=2.0)
        res = invert_field(fld, InversionParams(max_iters=1, tol=1e-9))
        assert not res.converged
        assert res.iterations == 1
        assert res.max_residual > 1e-9


class TestCompose:
    def test_zero_zero(self):
        z = DisplacementField.zeros(Grid3((6, 6, 6)))
        assert not compose(z, z).vectors.any()

    def test_translations_add_in_interior(self):
        a = constant_field((20, 20, 20), (1.0, 2.0, 0.0))
        b = constant_field((20, 20, 20), (0.0, 0.0, 1.5))
        out = compose(a, b)
        inner = interior(out.vectors, 4)
        assert np.allclose(inner[0], 1.0, atol=1e-12)
        assert np.allclose(inner[1], 2.0, atol=1e-12)
        assert np.allclose(inner[2], 1.5, atol=1e-12)

    def test_inverse_then_forward_is_identity(self, rng):
        fld = smooth_field(rng, (24, 24, 24), amplitude=1.5)
        inv = invert_field(fld)
        out = compose(inv, fld)  # InversionResult accepted directly
        assert np.abs(interior(out.vectors, 3)).max() < 0.1

    def test_associativity(self, rng):
        dims = (24, 24, 24)
        a = smooth_field(rng, dims, amplitude=1.0)
        b = smooth_field(rng, dims, amplitude=1.0)
        c = smooth_field(rng, dims, amplitude=1.0)
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        diff = np.abs(interior(left.vectors - right.vectors, 3)).max()
        assert diff < 0.05

    def test_dims_mismatch(self):
        with pytest.raises(ValueError):
            compose(DisplacementField.zeros(Grid3((4, 4, 4))),
                    DisplacementField.zeros(Grid3((4, 4, 5))))


class TestPairwise:
    def test_same_phase_is_identity(self, rng):
        fields = FieldSet(tuple(smooth_field(rng, (20, 20, 20), amplitude=1.0)
                                for _ in range(3)))
        res = pairwise_field(fields, 1, 1)
        assert np.abs(interior(res.field.vectors, 3)).max() < 0.05

    def test_all_zero(self):
        z = DisplacementField.zeros(Grid3((8, 8, 8)))
        res = pairwise_field(FieldSet((z, z, z)), 0, 2)
        assert not res.field.vectors.any()
        assert res.converged

    def test_translations(self):
        dims = (24, 24, 24)
        t = [(0.0, 0.0, 0.0), (1.0, 0.5, -1.0), (-0.5, 1.0, 2.0)]
        fields = FieldSet(tuple(constant_field(dims, v) for v in t))
        res = pairwise_field(fields, 1, 2)
        want = np.asarray(t[2]) - np.asarray(t[1])
        inner = interior(res.field.vectors, 5)
        for c in range(3):
            assert np.allclose(inner[c], want[c], atol=2e-2)

    def test_bad_index(self):
        z = DisplacementField.zeros(Grid3((8, 8, 8)))
        with pytest.raises(IndexError):
            pairwise_field(FieldSet((z, z)), 0, 2)


class TestTransport:
    def test_zero_field(self):
        lm = LandmarkSet(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
        out = transport_landmarks(lm, DisplacementField.zeros(Grid3((6, 6, 6))))
        assert np.array_equal(out.points, lm.points)

    def test_integer_landmark_constant_shift(self):
        lm = LandmarkSet(np.array([[2.0, 2.0, 2.0]]))
        out = transport_landmarks(lm, constant_field((6, 6, 6), (0, 0, 2)))
        assert np.array_equal(out.points, [[2.0, 2.0, 4.0]])

    def test_subvoxel_interpolation(self):
        # dx along x: value 1 at x=2 and 3 at x=3 -> 2 halfway between
        vec = np.zeros((3, 2, 2, 8))
        vec[2, :, :, 2] = 1.0
        vec[2, :, :, 3] = 3.0
        fld = DisplacementField(Grid3((2, 2, 8)), vec)
        out = transport_landmarks(LandmarkSet(np.array([[0.0, 0.0, 2.5]])), fld)
        assert np.allclose(out.points, [[0.0, 0.0, 4.5]], atol=1e-12)

    def test_outside_grid_rejected(self):
        lm = LandmarkSet(np.array([[5.5, 0.0, 0.0]]))
        with pytest.raises(ValueError):
            transport_landmarks(lm, DisplacementField.zeros(Grid3((6, 6, 6))))

    def test_commutes_with_convention_conversion(self, rng):
        from reg4d.core import ONE_BASED, ZERO_BASED, convert_landmarks

        vec = rng.integers(-2, 3, size=(3, 8, 8, 8)).astype(np.float64)
        fld = DisplacementField(Grid3((8, 8, 8)), vec)
        one_based = LandmarkSet(
            rng.integers(3, 7, size=(5, 3)).astype(np.float64),
            convention=ONE_BASED)
        moved = transport_landmarks(
            convert_landmarks(one_based, ZERO_BASED), fld)
        back = convert_landmarks(moved, ONE_BASED)
        assert np.array_equal(back.points, moved.points + 1.0)
        assert back.convention == ONE_BASED
