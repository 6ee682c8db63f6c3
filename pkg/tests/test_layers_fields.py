import math

import numpy as np
import pytest

from steerpose import so3
from steerpose.errors import ValidationError
from steerpose.fields import IrrepField, transform_field
from steerpose.layers import EquivariantConv, Gate, InstanceNorm, MeanPool, NormPool, correlate

FEATS = so3.RepSpec.parse("2x0e + 1x0o + 2x1o + 1x1e + 1x2e")


def rel(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


def random_field(rng, rep, n=8):
    return IrrepField(rng.standard_normal((rep.dim, n, n, n)), rep)


class TestTransformField:
    def test_identity_bitwise(self, rng):
        f = random_field(rng, FEATS)
        g = transform_field(f, np.eye(3))
        np.testing.assert_array_equal(g.data, f.data)
        assert not g.approximate

    def test_quarter_turn_is_array_permutation(self, rng):
        vol = rng.standard_normal((6, 6, 6))
        r = so3.axis_angle([0, 0, 1], math.pi / 2)
        r = np.rint(r)
        out = transform_field(IrrepField.scalar(vol), r).data[0]
        # x' = R x: (x, y) -> (-y, x), so out[i, j] = vol[j, n-1-i]
        np.testing.assert_array_equal(out, np.rot90(vol, k=1, axes=(0, 1)))

    def test_inversion_flips_constant_vector(self):
        rep = so3.RepSpec.parse("1x1o")
        data = np.zeros((3, 4, 4, 4))
        data[0] = 1.0
        out = transform_field(IrrepField(data, rep), so3.INVERSION).data
        np.testing.assert_array_equal(out[0], -1.0)
        np.testing.assert_array_equal(out[1:], 0.0)

    def test_composition(self, rng):
        f = random_field(rng, FEATS, 6)
        g1, g2 = so3.octahedral_group()[7], so3.octahedral_group()[30]
        a = transform_field(transform_field(f, g2), g1).data
        b = transform_field(f, g1 @ g2).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_non_grid_rotation_marked_approximate(self, rng):
        f = random_field(rng, FEATS, 6)
        assert transform_field(f, so3.sample_rotation(rng)).approximate

    def test_channel_mismatch(self):
        with pytest.raises(ValidationError):
            IrrepField(np.zeros((2, 4, 4, 4)), so3.RepSpec.parse("1x1o"))


class TestConv:
    def test_zero_in_zero_out(self, rng):
        conv = EquivariantConv(FEATS, FEATS)
        w = conv.init_params(rng)
        out, _ = conv.forward(np.zeros((FEATS.dim, 6, 6, 6)), w)
        np.testing.assert_array_equal(out, 0.0)

    def test_delta_imprints_kernel(self):
        rep_in, rep_out = so3.RepSpec.parse("1x0e"), so3.RepSpec.parse("1x1o")
        conv = EquivariantConv(rep_in, rep_out, size=5, level=3)
        w = np.zeros(conv.n_params)
        w[2] = 1.0
        x = np.zeros((1, 9, 9, 9))
        x[0, 4, 4, 4] = 1.0
        out, _ = conv.forward(x, w)
        k = conv.kernel(w)
        # correlation with a delta gives the flipped kernel around it
        np.testing.assert_allclose(out[:, 2:7, 2:7, 2:7], k[:, 0, ::-1, ::-1, ::-1], atol=1e-15)

    def test_correlate_matches_loop(self, rng):
        x = rng.standard_normal((2, 5, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3, 3))
        out = correlate(x, k)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        ref = np.zeros((3, 5, 5, 5))
        for i, j, l in np.ndindex(5, 5, 5):
            ref[:, i, j, l] = np.einsum("oiabc,iabc->o", k, xp[:, i:i + 3, j:j + 3, l:l + 3])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_equivariance_all_octahedral(self, rng):
        conv = EquivariantConv(FEATS, FEATS, size=5, level=3)
        w = conv.init_params(rng)
        f = random_field(rng, FEATS)
        base = IrrepField(conv.forward(f.data, w)[0], FEATS)
        for g in so3.octahedral_group():
            lhs = conv.forward(transform_field(f, g).data, w)[0]
            rhs = transform_field(base, g).data
            assert rel(lhs, rhs) < 1e-10

    def test_fault_breaks_equivariance(self, rng):
        conv = EquivariantConv(FEATS, FEATS)
        w = conv.init_params(rng)
        conv.inject_fault(rng, 0.1)
        f = random_field(rng, FEATS)
        g = so3.octahedral_group(proper_only=True)[5]
        lhs = conv.forward(transform_field(f, g).data, w)[0]
        rhs = transform_field(IrrepField(conv.forward(f.data, w)[0], FEATS), g).data
        assert rel(lhs, rhs) > 1e-3


class TestGate:
    def test_zeros(self):
        gate = Gate(FEATS)
        out, _ = gate.forward(np.zeros((gate.rep_in.dim, 3, 3, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_scalar_activations(self, rng):
        gate = Gate(FEATS)
        x = rng.standard_normal((gate.rep_in.dim, 3, 3, 3))
        out, _ = gate.forward(x)
        np.testing.assert_array_equal(out[0:2], np.maximum(x[0:2], 0))
        # layout of rep_in: 0e block (2 features + gates) comes first, then 0o
        n0e = 2 + gate.n_gates
        np.testing.assert_allclose(out[2], np.tanh(x[n0e]))

    def test_higher_order_scales_linearly(self, rng):
        gate = Gate(FEATS)
        x = rng.standard_normal((gate.rep_in.dim, 3, 3, 3))
        y = x.copy()
        hi_in = [sl for _, ir, sl in gate.rep_in.slices() if ir.l > 0]
        for sl in hi_in:
            y[sl] *= 2.5
        a, _ = gate.forward(x)
        b, _ = gate.forward(y)
        hi_out = [sl for _, ir, sl in FEATS.slices() if ir.l > 0]
        for sl in hi_out:
            np.testing.assert_allclose(b[sl], 2.5 * a[sl], atol=1e-14)

    def test_equivariance(self, rng):
        gate = Gate(FEATS)
        f = random_field(rng, gate.rep_in)
        base = IrrepField(gate.forward(f.data)[0], FEATS)
        for g in so3.octahedral_group():
            lhs = gate.forward(transform_field(f, g).data)[0]
            assert rel(lhs, transform_field(base, g).data) < 1e-10


class TestNormPool:
    def test_constant_field(self):
        rep = so3.RepSpec.parse("1x0e + 1x1o")
        x = np.ones((4, 4, 4, 4))
        out, _ = NormPool(rep, 2).forward(x)
        assert out.shape == (4, 2, 2, 2)
        np.testing.assert_array_equal(out, 1.0)

    def test_selects_largest_vector(self):
        rep = so3.RepSpec.parse("1x1o")
        x = np.zeros((3, 2, 2, 2))
        x[:, 0, 0, 0] = [1.0, 0.0, 0.0]
        x[:, 1, 1, 0] = [0.0, -3.0, 0.0]
        out, _ = NormPool(rep, 2).forward(x)
        np.testing.assert_array_equal(out[:, 0, 0, 0], [0.0, -3.0, 0.0])

    def test_equivariance(self, rng):
        pool = NormPool(FEATS, 2)
        f = random_field(rng, FEATS)
        base = IrrepField(pool.forward(f.data)[0], FEATS)
        for g in so3.octahedral_group():
            lhs = pool.forward(transform_field(f, g).data)[0]
            assert rel(lhs, transform_field(base, g).data) < 1e-10

    def test_indivisible_grid(self):
        with pytest.raises(ValidationError):
            NormPool(FEATS, 2).forward(np.zeros((FEATS.dim, 5, 4, 4)))


class TestInstanceNorm:
    def test_scalar_statistics(self, rng):
        norm = InstanceNorm(FEATS, eps=0.0)
        x = 3.0 + 2.0 * rng.standard_normal((FEATS.dim, 6, 6, 6))
        out, _ = norm.forward(x)
        np.testing.assert_allclose(out[0:3].mean(axis=(1, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out[0:3].std(axis=(1, 2, 3)), 1.0, atol=1e-12)

    def test_vector_rms_norm(self, rng):
        norm = InstanceNorm(FEATS, eps=0.0)
        out, _ = norm.forward(rng.standard_normal((FEATS.dim, 6, 6, 6)))
        for mult, ir, sl in FEATS.slices():
            if ir.l > 0:
                v = out[sl].reshape((mult, ir.dim, -1))
                np.testing.assert_allclose((v ** 2).sum(axis=1).mean(axis=1), 1.0, atol=1e-12)

    def test_equivariance(self, rng):
        norm = InstanceNorm(FEATS)
        f = random_field(rng, FEATS)
        base = IrrepField(norm.forward(f.data)[0], FEATS)
        for g in so3.octahedral_group():
            lhs = norm.forward(transform_field(f, g).data)[0]
            assert rel(lhs, transform_field(base, g).data) < 1e-10


@pytest.mark.parametrize("make", [
    lambda: (Gate(FEATS), Gate(FEATS).rep_in.dim),
    lambda: (InstanceNorm(FEATS), FEATS.dim),
    lambda: (NormPool(FEATS, 2), FEATS.dim),
    lambda: (MeanPool(), FEATS.dim),
])
def test_layer_backward_matches_finite_differences(make):
    layer, c = make()
    rng = np.random.default_rng(8)
    x = rng.standard_normal((c, 4, 4, 4))
    out, cache = layer.forward(x)
    gout = rng.standard_normal(out.shape)
    gx, _ = layer.backward(gout, cache)
    eps = 1e-6
    for _ in range(20):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (np.sum(layer.forward(xp)[0] * gout) - np.sum(layer.forward(xm)[0] * gout)) / (2 * eps)
        assert gx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-7)
