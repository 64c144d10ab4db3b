import numpy as np
import pytest

from pointvector import nnops, vecenc
from pointvector.errors import ConfigError
from pointvector.nnops import GradTape, Tensor


class TestRotate3d:
    def test_zero_angles_point_up(self):
        assert np.allclose(vecenc.rotate3d(1.0, 0.0, 0.0), [0.0, 0.0, 1.0])

    def test_beta_quarter_turn(self):
        assert np.allclose(vecenc.rotate3d(1.0, 0.0, np.pi / 2), [0.0, 1.0, 0.0],
                           atol=1e-15)

    def test_both_quarter_turns(self):
        assert np.allclose(vecenc.rotate3d(2.0, np.pi / 2, np.pi / 2),
                           [-2.0, 0.0, 0.0], atol=1e-15)

    def test_norm_is_abs_zx(self):
        rng = np.random.default_rng(0)
        zx = rng.standard_normal(100000)
        a = rng.uniform(0, 2 * np.pi, 100000)
        b = rng.uniform(0, 2 * np.pi, 100000)
        out = vecenc.rotate3d(zx, a, b)
        norms = np.linalg.norm(out, axis=-1)
        assert np.abs(norms - np.abs(zx)).max() < 1e-12

    def test_matches_matrix_action(self):
        rng = np.random.default_rng(1)
        zx = rng.standard_normal(50)
        a = rng.uniform(-5, 5, 50)
        b = rng.uniform(-5, 5, 50)
        rot = vecenc.rotation_matrix(a, b)
        lifted = np.zeros((50, 3))
        lifted[:, 1] = zx
        expected = np.einsum("nij,nj->ni", rot, lifted)
        assert np.abs(vecenc.rotate3d(zx, a, b) - expected).max() < 1e-12


class TestRotationMatrix:
    def test_orthogonal_and_special(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-7, 7, 200)
        b = rng.uniform(-7, 7, 200)
        rot = vecenc.rotation_matrix(a, b)
        eye = np.einsum("nij,nik->njk", rot, rot)
        assert np.abs(eye - np.eye(3)).max() < 1e-12
        det = np.linalg.det(rot)
        assert np.abs(det - 1.0).max() < 1e-12


class TestRotate2d:
    def test_zero_angle(self):
        assert np.allclose(vecenc.rotate2d(1.0, 0.0), [0.0, 1.0])

    def test_quarter_turn(self):
        assert np.allclose(vecenc.rotate2d(1.0, np.pi / 2), [-1.0, 0.0], atol=1e-15)

    def test_isometry(self):
        rng = np.random.default_rng(3)
        zx = rng.standard_normal(100000)
        a = rng.uniform(0, 2 * np.pi, 100000)
        norms = np.linalg.norm(vecenc.rotate2d(zx, a), axis=-1)
        assert np.abs(norms - np.abs(zx)).max() < 1e-12


class TestMixFeatures:
    def test_zero_position_weights(self):
        rng = np.random.default_rng(4)
        rel_feat = Tensor(rng.standard_normal((2, 3, 4)))
        rel_pos = Tensor(rng.standard_normal((2, 3, 3)))
        p = nnops.LayerParams(weight=nnops.parameter(np.zeros((3, 4))),
                              bias=nnops.parameter(np.zeros(4)))
        fp = vecenc.mix_features(rel_feat, rel_pos, p)
        assert np.allclose(fp.data, np.maximum(rel_feat.data, 0.0))

    def test_zero_features_pass_position_encoding(self):
        rng = np.random.default_rng(5)
        rel_feat = Tensor(np.zeros((2, 3, 3)))
        rel_pos = Tensor(rng.standard_normal((2, 3, 3)))
        p = nnops.LayerParams(weight=nnops.parameter(np.eye(3)),
                              bias=nnops.parameter(np.zeros(3)))
        fp = vecenc.mix_features(rel_feat, rel_pos, p)
        assert np.allclose(fp.data, np.maximum(rel_pos.data, 0.0))

    def test_matches_loop(self):
        rng = np.random.default_rng(6)
        rel_feat = rng.standard_normal((2, 4, 5))
        rel_pos = rng.standard_normal((2, 4, 3))
        w = rng.standard_normal((3, 5))
        b = rng.standard_normal(5)
        p = nnops.LayerParams(weight=nnops.parameter(w), bias=nnops.parameter(b))
        fp = vecenc.mix_features(Tensor(rel_feat), Tensor(rel_pos), p)
        for i in range(2):
            for j in range(4):
                expected = np.maximum(rel_feat[i, j] + rel_pos[i, j] @ w + b, 0.0)
                assert np.allclose(fp.data[i, j], expected)


def random_fp(rng, shape=(2, 3, 4, 6)):
    return Tensor(np.abs(rng.standard_normal(shape)) + 0.05)


class TestEncodeRotation:
    def test_zero_zx_weights_zero_field(self):
        rng = np.random.default_rng(7)
        fp = random_fp(rng)
        p = vecenc.rotation_encoder_params(rng, 6, 3)
        p.zx.weight.data = np.zeros_like(p.zx.weight.data)
        field = vecenc.encode_rotation(fp, p, 3)
        assert np.all(field.values.data == 0.0)

    def test_m1_is_bitwise_scalar_path(self):
        rng = np.random.default_rng(8)
        fp = random_fp(rng)
        p = vecenc.rotation_encoder_params(rng, 6, 1)
        field = vecenc.encode_rotation(fp, p, 1)
        zx = nnops.linear(fp, p.zx)
        assert field.values.data.shape == fp.data.shape + (1,)
        assert np.array_equal(field.values.data[..., 0], zx.data)

    def test_norm_equals_abs_zx(self):
        rng = np.random.default_rng(9)
        fp = random_fp(rng)
        p = vecenc.rotation_encoder_params(rng, 6, 3)
        field = vecenc.encode_rotation(fp, p, 3, "train")
        zx = nnops.linear(fp, p.zx)
        norms = np.linalg.norm(field.values.data, axis=-1)
        assert np.abs(norms - np.abs(zx.data)).max() < 1e-9

    def test_angles_nonnegative(self):
        rng = np.random.default_rng(10)
        fp = random_fp(rng)
        p = vecenc.rotation_encoder_params(rng, 6, 3)
        inputs = vecenc.rotation_inputs(fp, p, 3, "train")
        assert inputs.alpha.data.min() >= 0.0
        assert inputs.beta.data.min() >= 0.0

    def test_bad_dimension_rejected(self):
        rng = np.random.default_rng(11)
        p = vecenc.rotation_encoder_params(rng, 6, 3)
        with pytest.raises(ConfigError):
            vecenc.encode_rotation(random_fp(rng), p, 4)


class TestEncodeMLP:
    def test_zero_second_layer_zero_field(self):
        rng = np.random.default_rng(12)
        fp = random_fp(rng)
        p = vecenc.mlp_encoder_params(rng, 6, 3)
        p.out.weight.data = np.zeros_like(p.out.weight.data)
        field = vecenc.encode_mlp(fp, p, 3)
        assert np.all(field.values.data == 0.0)

    def test_matches_loop(self):
        rng = np.random.default_rng(13)
        fp = random_fp(rng, (2, 5, 4))
        p = vecenc.mlp_encoder_params(rng, 4, 2)
        field = vecenc.encode_mlp(fp, p, 2, "eval")
        h = np.maximum(
            (fp.data @ p.hidden.weight.data - p.hidden.running_mean)
            / np.sqrt(p.hidden.running_var + nnops.BN_EPS)
            * p.hidden.norm_gamma.data + p.hidden.norm_beta.data, 0.0)
        flat = h @ p.out.weight.data + p.out.bias.data
        assert np.allclose(field.values.data, flat.reshape(2, 5, 4, 2))


class TestEncodeDirection:
    def test_zero_modulus_zero_field(self):
        rng = np.random.default_rng(14)
        fp = random_fp(rng)
        p = vecenc.direction_encoder_params(rng, 6, 3)
        p.modulus.weight.data = np.zeros_like(p.modulus.weight.data)
        p.modulus.bias.data = np.zeros_like(p.modulus.bias.data)
        field = vecenc.encode_direction(fp, p, 3)
        assert np.abs(field.values.data).max() == 0.0

    def test_unit_normalization(self):
        x = Tensor(np.array([[3.0, 0.0, 0.0]]))
        unit = nnops.unit_normalize(x)
        assert np.allclose(unit.data, [[1.0, 0.0, 0.0]], atol=1e-7)

    def test_field_norm_equals_abs_modulus(self):
        rng = np.random.default_rng(15)
        fp = random_fp(rng)
        p = vecenc.direction_encoder_params(rng, 6, 3)
        field = vecenc.encode_direction(fp, p, 3, "train")
        modulus = nnops.linear(fp, p.modulus)
        norms = np.linalg.norm(field.values.data, axis=-1)
        assert np.abs(norms - np.abs(modulus.data)).max() < 1e-6


class TestEncoderGradients:
    def test_rotation_field_gradcheck(self):
        from pointvector import gradcheck
        assert gradcheck.run_case("rotate_field3", 0) < 1e-5
        assert gradcheck.run_case("rotate_field2", 0) < 1e-5

    def test_all_encoders_gradcheck(self):
        from pointvector import gradcheck
        for case in ("encode_rotation", "encode_rotation_2d", "encode_mlp",
                     "encode_direction"):
            assert gradcheck.run_case(case, 1) < 1e-5
