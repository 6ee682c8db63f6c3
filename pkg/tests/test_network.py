import math

import numpy as np
import pytest

from steerpose import so3
from steerpose.errors import DegenerateOutput, FormatError, ValidationError
from steerpose.fields import IrrepField, transform_field
from steerpose.network import (EquivariantNet, LevelSpec, NetworkSpec, backward, desk_spec, forward,
                               load_checkpoint, full_spec, save_checkpoint)
from steerpose.pose import PoseParametrization, rho_h
from steerpose.train import ToyDataset

from .conftest import smooth_volume


def head_volume(size=16, seed=0):
    data = ToyDataset(1, seed=seed, size=size)
    return data.sample(0, so3.sample_rotation(np.random.default_rng(seed)))[0]


class TestSpec:
    def test_desk_layout(self, desk_net):
        assert desk_net.n_params == 841
        assert str(desk_net.out_rep) == "1x1e + 2x1o"

    def test_head_modes(self):
        assert str(EquivariantNet(desk_spec("no_pseudovector")).out_rep) == "3x1o"
        assert str(EquivariantNet(desk_spec("two_vector")).out_rep) == "2x1o"

    def test_full_scale_config_constructible(self):
        spec = full_spec()
        assert len(spec.levels) == 4 and spec.input_size == 64
        assert spec.levels[0].even == (8, 4, 2) and spec.levels[3].odd == (64, 32, 16)

    def test_hash_tracks_changes(self):
        assert desk_spec().hash() == desk_spec().hash()
        assert desk_spec().hash() != desk_spec(input_size=32).hash()

    def test_stride_must_divide_input(self):
        with pytest.raises(ValidationError):
            NetworkSpec(input_size=18)

    def test_seeded_init(self, desk_net):
        np.testing.assert_array_equal(desk_net.init_params(3), desk_net.init_params(3))
        assert np.all(np.isfinite(desk_net.init_params(3)))


class TestForward:
    def test_unit_outputs(self, desk_net):
        p = desk_net.forward(head_volume(), desk_net.init_params(0))
        for v in p.vectors():
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9
        assert p.raw is not None

    def test_module_level_forward(self, desk_net):
        x = head_volume()
        w = desk_net.init_params(0)
        np.testing.assert_array_equal(forward(IrrepField.scalar(x), w, desk_net).as_array(),
                                      desk_net.forward(x, w).as_array())

    def test_zero_volume_degenerate(self, desk_net):
        with pytest.raises(DegenerateOutput) as exc:
            desk_net.forward(np.zeros((16, 16, 16)), desk_net.init_params(0))
        np.testing.assert_array_equal(exc.value.raw, 0.0)

    def test_rejects_non_finite(self, desk_net):
        x = head_volume()
        x[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            desk_net.forward(x, desk_net.init_params(0))

    def test_proper_grid_rotations(self, desk_net):
        x = head_volume()
        w = desk_net.init_params(1)
        h = desk_net.run(x, w)
        for g in so3.octahedral_group(proper_only=True):
            hg = desk_net.run(transform_field(IrrepField.scalar(x), g).data, w)
            assert np.linalg.norm(hg - rho_h(g) @ h) / np.linalg.norm(h) < 1e-9

    def test_improper_parity_split(self, desk_net):
        x = head_volume()
        w = desk_net.init_params(2)
        h = desk_net.run(x, w)
        for g in so3.octahedral_group():
            if np.linalg.det(g) > 0:
                continue
            hg = desk_net.run(transform_field(IrrepField.scalar(x), g).data, w)
            scale = np.linalg.norm(h)
            # pseudovector picks up det(g) = -1 on top of the rotation -g
            np.testing.assert_allclose(hg[:3], -g @ h[:3], atol=1e-9 * scale)
            np.testing.assert_allclose(hg[3:6], g @ h[3:6], atol=1e-9 * scale)
            np.testing.assert_allclose(hg[6:], g @ h[6:], atol=1e-9 * scale)

    def test_translation_invariance(self):
        net = EquivariantNet(desk_spec(input_size=48))
        w = net.init_params(4)
        # the object plus its receptive field must stay clear of the zero-padded border
        x = np.zeros((48, 48, 48))
        x[20:28, 20:28, 20:28] = head_volume(8)
        h = net.run(x, w)
        for shift in [(4, 0, 0), (0, -4, 4), (-4, 4, -4)]:
            hs = net.run(np.roll(x, shift, axis=(0, 1, 2)), w)
            assert np.abs(hs - h).max() < 1e-8

    @pytest.mark.xfail(strict=True, reason="kernel discretisation error at desk scale; see README")
    def test_continuous_rotation_deviation(self):
        from steerpose.pose import project_to_rotation
        net = EquivariantNet(desk_spec(input_size=32))
        w = net.init_params(0)
        data = ToyDataset(4, seed=0, size=32)
        rng = np.random.default_rng(0)
        worst = 0.0
        for i in range(4):
            x = data.sample(i, np.eye(3))[0]
            r0 = project_to_rotation(net.forward(x, w))
            g = so3.sample_rotation(rng)
            xg = transform_field(IrrepField.scalar(x), g, exact=False).data
            r1 = project_to_rotation(net.forward(xg, w))
            worst = max(worst, math.degrees(so3.geodesic_distance(r1, g @ r0)))
        assert worst < 5.0


class TestBackward:
    def test_finite_differences(self, tiny_net):
        rng = np.random.default_rng(0)
        x = smooth_volume(rng, 8)
        w = tiny_net.init_params(0)
        adj = rng.standard_normal(9)
        _, grad = tiny_net.value_and_grad(x, w, adj)
        eps = 1e-4
        for i in range(tiny_net.n_params):
            wp, wm = w.copy(), w.copy()
            wp[i] += eps
            wm[i] -= eps
            fd = (tiny_net.forward(x, wp).as_array() @ adj - tiny_net.forward(x, wm).as_array() @ adj) / (2 * eps)
            assert abs(grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-6)

    def test_zero_adjoint(self, tiny_net):
        x = smooth_volume(np.random.default_rng(1), 8)
        g = backward(x, tiny_net.init_params(1), np.zeros(9), tiny_net)
        np.testing.assert_array_equal(g, 0.0)

    def test_non_finite_names_layer(self, tiny_net):
        x = smooth_volume(np.random.default_rng(1), 8)
        tape = []
        tiny_net.run(x, tiny_net.init_params(1), tape)
        with pytest.raises(FloatingPointError, match="head.conv"):
            tiny_net.backward_tape(tape, np.full(9, np.nan))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, desk_net):
        w = desk_net.init_params(5)
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, desk_net.spec, w, seed=5)
        back, seed, digest = load_checkpoint(path, desk_net.spec)
        np.testing.assert_array_equal(back, w)
        assert seed == 5 and digest == desk_net.spec.hash()

    def test_spec_mismatch(self, tmp_path, desk_net):
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, desk_net.spec, desk_net.init_params(0), seed=0)
        with pytest.raises(ValidationError):
            load_checkpoint(path, desk_spec("two_vector"))

    def test_truncated(self, tmp_path, desk_net):
        path = tmp_path / "w.ckpt"
        save_checkpoint(path, desk_net.spec, desk_net.init_params(0), seed=0)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError) as exc:
            load_checkpoint(path)
        assert exc.value.missing == 8
