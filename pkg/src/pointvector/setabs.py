"""Composed point-set blocks: set abstraction, vector-oriented set abstraction,
feature propagation, and the aggregation-variant matrix.

Blocks are pure functions of (input batch, config, params); batchnorm running
statistics are the only state they update, and only in train mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry, nnops, vecenc
from .errors import ConfigError, SizeError
from .geometry import NeighborIndex, PointSetBatch
from .nnops import LayerParams, Tensor, custom_op

AGGREGATION_MODES = (
    "sum_groupconv", "max_groupconv", "sum_fc", "max_fc", "conv", "groupconv")

# slot-kernel modes need a canonical neighbor order
_ORDERED_MODES = ("conv", "groupconv")


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    k_neighbors: int
    radius: float | None = None  # None selects knn grouping
    stride: int = 1
    reduction: str = "sum"
    vector_dim: int = 3
    encoder: str = "rotation"
    aggregation: str = "sum_groupconv"
    sa_layers: int = 1           # depth of the shared MLP in SA blocks

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.k_neighbors < 1:
            raise ConfigError(f"k_neighbors must be >= 1, got {self.k_neighbors}")
        if self.sa_layers < 1:
            raise ConfigError(f"sa_layers must be >= 1, got {self.sa_layers}")
        if self.reduction not in ("sum", "max"):
            raise ConfigError(f"reduction must be sum or max, got {self.reduction!r}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(
                f"aggregation must be one of {AGGREGATION_MODES}, got {self.aggregation!r}")


@dataclass
class SABlockParams:
    mlp: list  # shared MLP layers; the first consumes [f_j, p_j - p_i]


@dataclass
class VPSABlockParams:
    pos: LayerParams                 # [3, Cin]
    encoder: object                  # one of the vecenc *EncoderParams
    res: LayerParams                 # [Cin, Cout]
    post_norm: LayerParams           # norm over Cout, applied before the residual
    proj: LayerParams | None = None  # [Cin, m] grouped kernel
    mix: LayerParams | None = None   # [Cin, Cout] channel mixing
    slot: LayerParams | None = None  # [Cin, K, m] per-slot kernels
    fc: LayerParams | None = None    # [Cin*m, Cout]
    conv: LayerParams | None = None  # [K*Cin*m, Cout]


@dataclass
class FPParams:
    mlp1: LayerParams
    mlp2: LayerParams


def sa_block_params(rng: np.random.Generator, cfg: BlockConfig) -> SABlockParams:
    widths = [cfg.in_channels + 3] + [cfg.out_channels] * cfg.sa_layers
    layers = [nnops.linear_params(rng, widths[i], widths[i + 1], bias=False, norm=True)
              for i in range(cfg.sa_layers)]
    return SABlockParams(mlp=layers)


def vpsa_block_params(rng: np.random.Generator, cfg: BlockConfig) -> VPSABlockParams:
    cin, cout, m = cfg.in_channels, cfg.out_channels, cfg.vector_dim
    p = VPSABlockParams(
        pos=nnops.linear_params(rng, 3, cin, bias=True),
        encoder=vecenc.make_encoder_params(cfg.encoder, rng, cin, m),
        res=nnops.linear_params(rng, cin, cout, bias=True),
        post_norm=nnops.attach_norm(LayerParams(), cout),
    )
    mode = cfg.aggregation
    if mode in ("sum_groupconv", "max_groupconv"):
        p.proj = nnops.grouped_params(rng, cin, m)
        p.mix = nnops.linear_params(rng, cin, cout, bias=False)
    elif mode == "groupconv":
        k = cfg.k_neighbors
        bound = 1.0 / math.sqrt(k * m)
        p.slot = LayerParams(
            weight=nnops.parameter(
                rng.uniform(-bound, bound, size=(cin, k, m)).astype(nnops.default_dtype())),
            bias=nnops.parameter(np.zeros(cin, dtype=nnops.default_dtype())))
        p.mix = nnops.linear_params(rng, cin, cout, bias=False)
    elif mode in ("sum_fc", "max_fc"):
        p.fc = nnops.linear_params(rng, cin * m, cout, bias=False)
    elif mode == "conv":
        p.conv = nnops.linear_params(rng, cfg.k_neighbors * cin * m, cout, bias=False)
    return p


def fp_params(rng: np.random.Generator, coarse_channels: int, skip_channels: int,
              out_channels: int) -> FPParams:
    return FPParams(
        mlp1=nnops.linear_params(rng, coarse_channels + skip_channels, out_channels,
                                 bias=False, norm=True),
        mlp2=nnops.linear_params(rng, out_channels, out_channels, bias=False, norm=True))


# ---------------------------------------------------------------------------
# aggregation variants


def _mask_padded(v: Tensor, pad: np.ndarray | None) -> Tensor:
    """Zero out padded neighbor slots so fixed slot kernels ignore them."""
    if pad is None or not pad.any():
        return v
    keep = (~pad).astype(v.data.dtype).reshape(pad.shape + (1,) * (v.ndim - 3))
    return nnops.mul(v, Tensor(keep))


def _fused_sum_groupconv(v: Tensor, p: LayerParams, pad: np.ndarray | None) -> Tensor:
    """Single einsum over neighbors and vector components with a shared kernel."""
    w = p.weight
    c, m = w.data.shape
    if v.data.shape[-2:] != (c, m):
        raise SizeError(f"expected trailing dims ({c},{m}), got {v.data.shape}")
    data = v.data
    if pad is not None and pad.any():
        data = data * (~pad).astype(data.dtype).reshape(pad.shape + (1, 1))
    out = np.einsum("bikcd,cd->bic", data, w.data)
    if p.bias is not None:
        out = out + p.bias.data
    inputs = (v, w) if p.bias is None else (v, w, p.bias)
    w_data = w.data
    keep = None if pad is None else (~pad).astype(data.dtype)

    def grad_fn(g):
        gv = g[:, :, None, :, None] * w_data
        if keep is not None:
            gv = gv * keep[..., None, None]
        gw = np.einsum("bikcd,bic->cd", data, g)
        if p.bias is None:
            return gv, gw
        return gv, gw, g.sum(axis=(0, 1))

    return custom_op(out, inputs, grad_fn)


def slot_projection(v: Tensor, p: LayerParams, pad: np.ndarray | None = None) -> Tensor:
    """Independent kernel per neighbor slot: out[..,c] = sum_kd v[..,k,c,d] W[c,k,d] + b[c]."""
    w = p.weight
    c, k, m = w.data.shape
    if v.data.shape[2:] != (k, c, m):
        raise SizeError(
            f"slot_projection expects [B,M,{k},{c},{m}], got {v.data.shape}")
    v = _mask_padded(v, pad)
    data = v.data
    out = np.einsum("bikcd,ckd->bic", data, w.data)
    if p.bias is not None:
        out = out + p.bias.data
    inputs = (v, w) if p.bias is None else (v, w, p.bias)
    w_data = w.data

    def grad_fn(g):
        gv = np.einsum("bic,ckd->bikcd", g, w_data)
        gw = np.einsum("bikcd,bic->ckd", data, g)
        if p.bias is None:
            return gv, gw
        return gv, gw, g.sum(axis=(0, 1))

    return custom_op(out, inputs, grad_fn)


def aggregation_variant(v, mode: str, p: VPSABlockParams,
                        pad: np.ndarray | None = None) -> Tensor:
    """Aggregate a vector field [B,M,K,C,m] over neighbors.

    sum/max_groupconv return the per-channel projection [B,M,C] (channel
    mixing stays outside); fc and conv modes fold the channel mixing into
    their dense map and return [B,M,Cout]. conv and groupconv consume the
    neighbor slots in the order given, so callers sort them canonically.
    """
    if isinstance(v, vecenc.VectorField):
        v = v.values
    if mode not in AGGREGATION_MODES:
        raise ConfigError(
            f"aggregation must be one of {AGGREGATION_MODES}, got {mode!r}")
    b, mm, k, c, m = v.data.shape
    if mode == "sum_groupconv":
        return _fused_sum_groupconv(v, p.proj, pad)
    if mode == "max_groupconv":
        return nnops.grouped_projection(nnops.neighbor_reduce(v, "max", pad), p.proj)
    if mode == "groupconv":
        return slot_projection(v, p.slot, pad)
    if mode in ("sum_fc", "max_fc"):
        reduced = nnops.neighbor_reduce(v, mode.split("_")[0], pad)
        return nnops.linear(nnops.reshape(reduced, (b, mm, c * m)), p.fc)
    # conv: dense kernel over neighbor slots and channels
    flat = nnops.reshape(_mask_padded(v, pad), (b, mm, k * c * m))
    return nnops.linear(flat, p.conv)


# ---------------------------------------------------------------------------
# blocks


def _select_centers(x: PointSetBatch, stride: int, fps_start) -> np.ndarray:
    b, n = x.batch_size, x.num_points
    if stride == 1:
        return np.broadcast_to(np.arange(n, dtype=np.int64), (b, n)).copy()
    m = math.ceil(n / stride)
    return geometry.farthest_point_sample(x, m, fps_start)


def _group(x: PointSetBatch, centers: np.ndarray, cfg: BlockConfig) -> NeighborIndex:
    if cfg.k_neighbors > x.num_points:
        raise SizeError(
            f"k={cfg.k_neighbors} exceeds cloud size {x.num_points}")
    if cfg.radius is None:
        return geometry.knn(centers, x, cfg.k_neighbors)
    return geometry.ball_query(centers, x, cfg.radius, cfg.k_neighbors)


def _as_feature_tensor(x: PointSetBatch) -> Tensor:
    f = x.features
    if isinstance(f, Tensor):
        return f
    return nnops.input_tensor(x.features_array())


def sa_block(x: PointSetBatch, cfg: BlockConfig, p: SABlockParams,
             mode: str = "train", fps_start=0) -> PointSetBatch:
    """Set abstraction: subsample, group, shared MLP on [f_j, p_j - p_i], max-reduce."""
    centers = _select_centers(x, cfg.stride, fps_start)
    nbr = _group(x, centers, cfg)
    f = _as_feature_tensor(x)
    nbr_feat = nnops.gather_neighbors(f, nbr.indices)
    rel_pos = nnops.input_tensor(geometry.relative_positions(x.positions, nbr))
    h = nnops.concat_last([nbr_feat, rel_pos])
    for layer in p.mlp:
        h = nnops.dense(h, layer, mode)
    pad = nbr.pad_mask if nbr.pad_mask.any() else None
    reduced = nnops.neighbor_reduce(h, "max", pad)
    batch = np.arange(x.batch_size)[:, None]
    return PointSetBatch(positions=x.positions[batch, centers], features=reduced)


def vpsa_block(x: PointSetBatch, cfg: BlockConfig, p: VPSABlockParams,
               mode: str = "train", fps_start=0) -> PointSetBatch:
    """Vector-oriented set abstraction.

    Mixed relative features are lifted to per-channel m-vectors, aggregated
    over the neighborhood, projected back to channel scalars, mixed across
    channels, normalized, and fused with a linear residual of the center
    feature through a ReLU.
    """
    centers = _select_centers(x, cfg.stride, fps_start)
    nbr = _group(x, centers, cfg)
    if cfg.aggregation in _ORDERED_MODES:
        nbr = geometry.sort_neighbors_by_distance(x.positions, nbr)
    f = _as_feature_tensor(x)
    b, n, cin = f.data.shape
    if cin != cfg.in_channels:
        raise SizeError(f"expected {cfg.in_channels} input channels, got {cin}")

    ctr_feat = nnops.gather_points(f, centers)
    nbr_feat = nnops.gather_neighbors(f, nbr.indices)
    m_centers = centers.shape[1]
    rel_feat = nnops.sub(nbr_feat, nnops.reshape(ctr_feat, (b, m_centers, 1, cin)))
    rel_pos = nnops.input_tensor(geometry.relative_positions(x.positions, nbr))
    fp = vecenc.mix_features(rel_feat, rel_pos, p.pos)

    field = vecenc.encode(cfg.encoder, fp, p.encoder, cfg.vector_dim, mode)
    pad = nbr.pad_mask if nbr.pad_mask.any() else None
    main = aggregation_variant(field, cfg.aggregation, p, pad)
    if p.mix is not None:
        main = nnops.linear(main, p.mix)
    main = nnops.batchnorm(main, p.post_norm, mode)
    skip = nnops.linear(ctr_feat, p.res)
    if skip.data.shape != main.data.shape:
        raise ConfigError(
            f"residual width {skip.data.shape} does not match main path "
            f"{main.data.shape}")
    out = nnops.residual_fuse(main, skip)
    batch = np.arange(x.batch_size)[:, None]
    return PointSetBatch(positions=x.positions[batch, centers], features=out)


def feature_propagate(coarse: PointSetBatch, fine_positions: np.ndarray,
                      skip_features: Tensor, p: FPParams,
                      mode: str = "train") -> Tensor:
    """Interpolate coarse features to fine positions and fuse with skip features.

    Inverse-squared-distance weights over the 3 nearest coarse points
    (eps 1e-8, normalized), concatenated with the skip features, then a
    two-layer shared MLP.
    """
    if coarse.features is None:
        raise SizeError("feature_propagate needs coarse features")
    num = min(3, coarse.num_points)
    idx = geometry.knn_points(fine_positions, coarse, num)
    batch = np.arange(coarse.batch_size)[:, None, None]
    diff = (fine_positions[:, :, None, :].astype(np.float64)
            - coarse.positions[batch, idx].astype(np.float64))
    d2 = np.einsum("bnkc,bnkc->bnk", diff, diff)
    w = 1.0 / (d2 + 1e-8)
    w = w / w.sum(axis=2, keepdims=True)
    coarse_f = coarse.features if isinstance(coarse.features, Tensor) \
        else nnops.input_tensor(coarse.features_array())
    interp = nnops.weighted_gather(coarse_f, idx, w.astype(coarse_f.data.dtype))
    h = nnops.concat_last([interp, skip_features])
    h = nnops.dense(h, p.mlp1, mode)
    return nnops.dense(h, p.mlp2, mode)
