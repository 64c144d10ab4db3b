"""Scalar-to-vector feature encoders.

Each channel of a mixed relative feature is lifted to an m-dimensional vector
(m in {1, 2, 3}). The rotation encoder predicts a modulus and up to two
independent angles and applies the closed-form composition of an x-axis and a
z-axis rotation; the mlp and direction encoders are the ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops
from .errors import ConfigError
from .nnops import LayerParams, Tensor, custom_op


@dataclass
class VectorField:
    """Per-neighbor, per-channel m-vectors: values [..., C, m]."""

    values: Tensor
    m: int


@dataclass
class RotationInputs:
    """Modulus pre-image and rotation angles, each [..., C]; angles are radians."""

    zx: Tensor
    alpha: Tensor | None = None
    beta: Tensor | None = None


@dataclass
class RotationEncoderParams:
    zx: LayerParams
    angles: LayerParams | None  # absent for m=1


@dataclass
class MLPEncoderParams:
    hidden: LayerParams
    out: LayerParams


@dataclass
class DirectionEncoderParams:
    modulus: LayerParams
    dir_hidden: LayerParams
    dir_out: LayerParams


def rotation_matrix(alpha, beta) -> np.ndarray:
    """Composite matrix Rot_z(alpha) @ Rot_x applied to the vector lift.

    The x-rotation uses the sin/cos arrangement whose action on (0, zx, 0)
    yields (-zx sin(a) sin(b), zx cos(a) sin(b), zx cos(b)). Shapes broadcast;
    output is [..., 3, 3].
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sa, ca = np.sin(alpha), np.cos(alpha)
    sb, cb = np.sin(beta), np.cos(beta)
    zero = np.zeros_like(sa * sb)
    one = np.ones_like(zero)
    rows = [
        np.stack([ca * one, -sa * sb, sa * cb], axis=-1),
        np.stack([sa * one, ca * sb, -ca * cb], axis=-1),
        np.stack([zero, cb * one, sb * one], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def rotate3d(zx, alpha, beta) -> np.ndarray:
    """Closed-form rotation of the axis-aligned lift (0, zx, 0), shape [..., 3]."""
    zx = np.asarray(zx, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    sa, ca = np.sin(alpha), np.cos(alpha)
    sb, cb = np.sin(beta), np.cos(beta)
    return np.stack([-zx * sa * sb, zx * ca * sb, zx * cb], axis=-1)


def rotate2d(zx, alpha) -> np.ndarray:
    """Single-angle analogue of rotate3d: (-zx sin(a), zx cos(a))."""
    zx = np.asarray(zx, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.stack([-zx * np.sin(alpha), zx * np.cos(alpha)], axis=-1)


def rotate_field3(zx: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Differentiable rotate3d over channel arrays: [..., C] -> [..., C, 3]."""
    z, a, b = zx.data, alpha.data, beta.data
    sa, ca = np.sin(a), np.cos(a)
    sb, cb = np.sin(b), np.cos(b)
    out = np.stack([-z * sa * sb, z * ca * sb, z * cb], axis=-1)

    def grad_fn(g):
        g0, g1, g2 = g[..., 0], g[..., 1], g[..., 2]
        dz = -g0 * sa * sb + g1 * ca * sb + g2 * cb
        da = z * (-g0 * ca * sb - g1 * sa * sb)
        db = z * (-g0 * sa * cb + g1 * ca * cb - g2 * sb)
        return dz, da, db

    return custom_op(out, (zx, alpha, beta), grad_fn)


def rotate_field2(zx: Tensor, alpha: Tensor) -> Tensor:
    """Differentiable rotate2d over channel arrays: [..., C] -> [..., C, 2]."""
    z, a = zx.data, alpha.data
    sa, ca = np.sin(a), np.cos(a)
    out = np.stack([-z * sa, z * ca], axis=-1)

    def grad_fn(g):
        g0, g1 = g[..., 0], g[..., 1]
        return -g0 * sa + g1 * ca, z * (-g0 * ca - g1 * sa)

    return custom_op(out, (zx, alpha), grad_fn)


def mix_features(rel_feat: Tensor, rel_pos: Tensor, p: LayerParams) -> Tensor:
    """Mixed relative feature: relu(rel_feat + linear(rel_pos))."""
    return nnops.relu(nnops.add(rel_feat, nnops.linear(rel_pos, p)))


def rotation_inputs(fp: Tensor, p: RotationEncoderParams, m: int,
                    mode: str = "train") -> RotationInputs:
    """Predict modulus and angles from the mixed feature per the angle pipeline."""
    c = fp.shape[-1]
    zx = nnops.linear(fp, p.zx)
    if m == 1:
        return RotationInputs(zx=zx)
    ang = nnops.relu(nnops.batchnorm(nnops.linear(fp, p.angles), p.angles, mode))
    if m == 2:
        return RotationInputs(zx=zx, alpha=ang)
    alpha = nnops.slice_last(ang, 0, c)
    beta = nnops.slice_last(ang, c, 2 * c)
    return RotationInputs(zx=zx, alpha=alpha, beta=beta)


def encode_rotation(fp: Tensor, p: RotationEncoderParams, m: int,
                    mode: str = "train") -> VectorField:
    """Rotation-based scalar-to-vector expansion.

    m=3 applies rotate_field3, m=2 rotate_field2, and m=1 is the identity
    expansion (the plain scalar path, bit for bit).
    """
    if m not in (1, 2, 3):
        raise ConfigError(f"vector dimension must be 1, 2, or 3, got {m}")
    inputs = rotation_inputs(fp, p, m, mode)
    if m == 1:
        values = nnops.reshape(inputs.zx, inputs.zx.shape + (1,))
    elif m == 2:
        values = rotate_field2(inputs.zx, inputs.alpha)
    else:
        values = rotate_field3(inputs.zx, inputs.alpha, inputs.beta)
    return VectorField(values=values, m=m)


def encode_mlp(fp: Tensor, p: MLPEncoderParams, m: int, mode: str = "train") -> VectorField:
    """Two-layer map C -> C*m, reshaped to per-channel m-vectors."""
    if m not in (1, 2, 3):
        raise ConfigError(f"vector dimension must be 1, 2, or 3, got {m}")
    c = fp.shape[-1]
    h = nnops.relu(nnops.batchnorm(nnops.linear(fp, p.hidden), p.hidden, mode))
    flat = nnops.linear(h, p.out)
    values = nnops.reshape(flat, fp.shape[:-1] + (c, m))
    return VectorField(values=values, m=m)


def encode_direction(fp: Tensor, p: DirectionEncoderParams, m: int,
                     mode: str = "train") -> VectorField:
    """Modulus from a linear map times a unit direction from a small MLP."""
    if m not in (1, 2, 3):
        raise ConfigError(f"vector dimension must be 1, 2, or 3, got {m}")
    c = fp.shape[-1]
    modulus = nnops.linear(fp, p.modulus)
    h = nnops.relu(nnops.batchnorm(nnops.linear(fp, p.dir_hidden), p.dir_hidden, mode))
    raw = nnops.reshape(nnops.linear(h, p.dir_out), fp.shape[:-1] + (c, m))
    unit = nnops.unit_normalize(raw, eps=1e-8)
    values = nnops.mul(nnops.reshape(modulus, modulus.shape + (1,)), unit)
    return VectorField(values=values, m=m)


def rotation_encoder_params(rng: np.random.Generator, channels: int,
                            m: int) -> RotationEncoderParams:
    zx = nnops.linear_params(rng, channels, channels, bias=True)
    angles = None
    if m >= 2:
        angles = nnops.linear_params(rng, channels, (m - 1) * channels,
                                     bias=False, norm=True)
    return RotationEncoderParams(zx=zx, angles=angles)


def mlp_encoder_params(rng: np.random.Generator, channels: int, m: int) -> MLPEncoderParams:
    hidden = nnops.linear_params(rng, channels, channels, bias=False, norm=True)
    out = nnops.linear_params(rng, channels, channels * m, bias=True)
    return MLPEncoderParams(hidden=hidden, out=out)


def direction_encoder_params(rng: np.random.Generator, channels: int,
                             m: int) -> DirectionEncoderParams:
    modulus = nnops.linear_params(rng, channels, channels, bias=True)
    dir_hidden = nnops.linear_params(rng, channels, channels, bias=False, norm=True)
    dir_out = nnops.linear_params(rng, channels, channels * m, bias=True)
    return DirectionEncoderParams(modulus=modulus, dir_hidden=dir_hidden, dir_out=dir_out)


ENCODERS = {
    "rotation": (encode_rotation, rotation_encoder_params),
    "mlp": (encode_mlp, mlp_encoder_params),
    "direction": (encode_direction, direction_encoder_params),
}


def make_encoder_params(name: str, rng: np.random.Generator, channels: int, m: int):
    if name not in ENCODERS:
        raise ConfigError(f"unknown encoder {name!r}; choose from {sorted(ENCODERS)}")
    return ENCODERS[name][1](rng, channels, m)


def encode(name: str, fp: Tensor, params, m: int, mode: str = "train") -> VectorField:
    if name not in ENCODERS:
        raise ConfigError(f"unknown encoder {name!r}; choose from {sorted(ENCODERS)}")
    return ENCODERS[name][0](fp, params, m, mode)
