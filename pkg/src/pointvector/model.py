"""Hierarchical encoder/decoder assembly and named presets.

A model is an embedding MLP, stages of [SA x S_i, VPSA x V_i] blocks with
channel width doubling at each downsampling stage, and either a
feature-propagation decoder with a per-point head (segmentation) or a global
aggregation head (classification).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry, nnops, setabs
from .errors import CheckpointError, ConfigError
from .geometry import PointSetBatch
from .nnops import LayerParams, Tensor
from .setabs import BlockConfig, FPParams, SABlockParams, VPSABlockParams

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    embed_channels: int = 32
    sa_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    vpsa_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    strides: list = field(default_factory=lambda: [4, 4, 4, 4])
    k_sa: int = 32
    k_vpsa: int = 8
    sa_layers: int = 1
    task: str = "segmentation"
    num_classes: int = 13
    reduction: str | None = None      # None -> sum for segmentation, max for classification
    encoder: str = "rotation"
    vector_dim: int = 3
    aggregation: str | None = None    # None -> "<reduction>_groupconv"
    radii: list | None = None         # per-stage ball-query radii; None -> knn
    input_features: str = "pos_height"
    given_channels: int = 0           # feature width when input_features="given"
    gravity_dim: int = 2              # z is up: invariant under z-axis rotation
    stable_fps: bool = True           # geometric FPS start (permutation-stable)

    def __post_init__(self):
        if self.embed_channels < 1:
            raise ConfigError("embed_channels must be >= 1")
        n = len(self.sa_per_stage)
        if not (len(self.vpsa_per_stage) == len(self.strides) == n):
            raise ConfigError(
                "sa_per_stage, vpsa_per_stage and strides must have equal length, got "
                f"{len(self.sa_per_stage)}/{len(self.vpsa_per_stage)}/{len(self.strides)}")
        if n == 0:
            raise ConfigError("at least one stage is required")
        if self.radii is not None and len(self.radii) != n:
            raise ConfigError("radii must list one radius per stage")
        if self.task not in ("segmentation", "classification"):
            raise ConfigError(f"task must be segmentation or classification, got {self.task!r}")
        if self.vector_dim not in (1, 2, 3):
            raise ConfigError(f"vector_dim must be 1, 2, or 3, got {self.vector_dim}")
        for i, (s, v) in enumerate(zip(self.sa_per_stage, self.vpsa_per_stage)):
            if s == 0 and v == 0:
                raise ConfigError(f"stage {i} has neither SA nor VPSA blocks")

    @property
    def num_stages(self) -> int:
        return len(self.sa_per_stage)

    def resolved_reduction(self) -> str:
        if self.reduction is not None:
            return self.reduction
        return "sum" if self.task == "segmentation" else "max"

    def resolved_aggregation(self) -> str:
        if self.aggregation is not None:
            return self.aggregation
        return f"{self.resolved_reduction()}_groupconv"

    def stage_width(self, i: int) -> int:
        return self.embed_channels * (2 ** (i + 1))

    def input_channels(self) -> int:
        if self.input_features == "given":
            return self.given_channels
        if self.input_features == "height":
            return 1
        if self.input_features == "pos_height":
            return 4
        raise ConfigError(f"unknown input_features mode {self.input_features!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Block:
    kind: str  # "sa" | "vpsa"
    cfg: BlockConfig
    params: object


class Model:
    """Parameter container plus forward logic for one ModelConfig."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9e3779b9]))
        c_in = cfg.input_channels()
        if c_in < 1:
            raise ConfigError(
                "input_features='given' requires given_channels >= 1 in the config")
        red = cfg.resolved_reduction()
        agg = cfg.resolved_aggregation()

        self.embed = nnops.linear_params(rng, c_in, cfg.embed_channels,
                                         bias=False, norm=True)
        self.stages: list[list[Block]] = []
        width = cfg.embed_channels
        for i in range(cfg.num_stages):
            out_w = cfg.stage_width(i)
            radius = None if cfg.radii is None else cfg.radii[i]
            blocks: list[Block] = []
            n_sa = cfg.sa_per_stage[i]
            n_vpsa = cfg.vpsa_per_stage[i]
            stride_owner_is_sa = n_sa >= 1
            for j in range(n_sa):
                bc = BlockConfig(
                    in_channels=width if j == 0 else out_w,
                    out_channels=out_w,
                    k_neighbors=cfg.k_sa,
                    radius=radius,
                    stride=cfg.strides[i] if j == 0 else 1,
                    reduction="max",
                    vector_dim=cfg.vector_dim,
                    encoder=cfg.encoder,
                    aggregation=agg,
                    sa_layers=cfg.sa_layers)
                blocks.append(Block("sa", bc, setabs.sa_block_params(rng, bc)))
            for j in range(n_vpsa):
                first = (not stride_owner_is_sa) and j == 0
                bc = BlockConfig(
                    in_channels=width if first else out_w,
                    out_channels=out_w,
                    k_neighbors=cfg.k_vpsa,
                    radius=radius,
                    stride=cfg.strides[i] if first else 1,
                    reduction=red,
                    vector_dim=cfg.vector_dim,
                    encoder=cfg.encoder,
                    aggregation=agg)
                blocks.append(Block("vpsa", bc, setabs.vpsa_block_params(rng, bc)))
            self.stages.append(blocks)
            width = out_w

        if cfg.task == "segmentation":
            self.decoder: list[FPParams] = []
            for i in range(cfg.num_stages - 1, -1, -1):
                coarse_w = cfg.stage_width(i)
                skip_w = cfg.embed_channels if i == 0 else cfg.stage_width(i - 1)
                self.decoder.append(setabs.fp_params(rng, coarse_w, skip_w, skip_w))
            self.head_hidden = nnops.linear_params(
                rng, cfg.embed_channels, cfg.embed_channels, bias=False, norm=True)
            self.head_out = nnops.linear_params(
                rng, cfg.embed_channels, cfg.num_classes, bias=True)
            self.global_sa = None
        else:
            self.decoder = []
            glob_w = 2 * width
            self.global_sa = nnops.linear_params(rng, width + 3, glob_w,
                                                 bias=False, norm=True)
            self.head_hidden = nnops.linear_params(rng, glob_w, width,
                                                   bias=False, norm=True)
            self.head_out = nnops.linear_params(rng, width, cfg.num_classes, bias=True)

    # -- parameter bookkeeping ------------------------------------------------

    def layer_map(self) -> dict[str, LayerParams]:
        """All LayerParams keyed by their module path."""
        out: dict[str, LayerParams] = {}
        _collect_layers("embed", self.embed, out)
        for i, blocks in enumerate(self.stages):
            counters = {"sa": 0, "vpsa": 0}
            for block in blocks:
                j = counters[block.kind]
                counters[block.kind] += 1
                _collect_layers(f"stage{i}.{block.kind}{j}", block.params, out)
        for i, fp in enumerate(self.decoder):
            _collect_layers(f"decoder.fp{i}", fp, out)
        if self.global_sa is not None:
            _collect_layers("global_sa", self.global_sa, out)
        _collect_layers("head.hidden", self.head_hidden, out)
        _collect_layers("head.out", self.head_out, out)
        return out

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for path, layer in self.layer_map().items():
            for slot, tensor in layer.tensors():
                out[f"{path}.{slot}"] = tensor
        return out

    def named_running(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for path, layer in self.layer_map().items():
            if layer.running_mean is not None:
                out[f"{path}.running_mean"] = layer.running_mean
                out[f"{path}.running_var"] = layer.running_var
        return out

    # -- forward ---------------------------------------------------------------

    def _input_features(self, batch: PointSetBatch) -> np.ndarray:
        cfg = self.cfg
        if cfg.input_features == "given":
            return batch.features_array()
        pos = batch.positions
        height = pos[..., cfg.gravity_dim:cfg.gravity_dim + 1]
        if cfg.input_features == "height":
            return height
        return np.concatenate([pos, height], axis=-1)

    def _fps_start(self, cloud: PointSetBatch):
        if self.cfg.stable_fps:
            return geometry.geometric_start(cloud)
        return 0

    def _run_encoder(self, batch: PointSetBatch, mode: str):
        """Embedding plus all stages; returns per-resolution outputs."""
        feats = nnops.input_tensor(self._input_features(batch))
        embedded = nnops.dense(feats, self.embed, mode)
        current = PointSetBatch(positions=batch.positions, features=embedded)
        skips = [current]
        for i, blocks in enumerate(self.stages):
            for j, block in enumerate(blocks):
                start = self._fps_start(current) if block.cfg.stride > 1 else 0
                if block.kind == "sa":
                    current = setabs.sa_block(current, block.cfg, block.params,
                                              mode, fps_start=start)
                else:
                    current = setabs.vpsa_block(current, block.cfg, block.params,
                                                mode, fps_start=start)
                nnops.check_finite(current.features, f"stage{i}.{block.kind}{j}")
            skips.append(current)
        return skips

    def forward_seg(self, batch: PointSetBatch, mode: str = "train") -> Tensor:
        if self.cfg.task != "segmentation":
            raise ConfigError("forward_seg on a classification model")
        skips = self._run_encoder(batch, mode)
        current = skips[-1]
        for d, fp in enumerate(self.decoder):
            target = skips[len(skips) - 2 - d]
            fused = setabs.feature_propagate(
                current, target.positions, target.features, fp, mode)
            current = PointSetBatch(positions=target.positions, features=fused)
            nnops.check_finite(current.features, f"decoder.fp{d}")
        h = nnops.dense(current.features, self.head_hidden, mode)
        logits = nnops.linear(h, self.head_out)
        return nnops.check_finite(logits, "head.out")

    def forward_cls(self, batch: PointSetBatch, mode: str = "train") -> Tensor:
        if self.cfg.task != "classification":
            raise ConfigError("forward_cls on a segmentation model")
        skips = self._run_encoder(batch, mode)
        current = skips[-1]
        pos = current.positions
        centroid = pos.mean(axis=1, keepdims=True)
        rel = nnops.input_tensor(pos - centroid)
        h = nnops.dense(nnops.concat_last([current.features, rel]),
                        self.global_sa, mode)
        b, n, c = h.data.shape
        pooled = nnops.neighbor_reduce(nnops.reshape(h, (b, 1, n, c)), "max")
        pooled = nnops.reshape(pooled, (b, c))
        h = nnops.dense(pooled, self.head_hidden, mode)
        logits = nnops.linear(h, self.head_out)
        return nnops.check_finite(logits, "head.out")


def _collect_layers(prefix: str, obj, out: dict) -> None:
    if obj is None:
        return
    if isinstance(obj, LayerParams):
        out[prefix] = obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _collect_layers(f"{prefix}.{i}", item, out)
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            _collect_layers(f"{prefix}.{f.name}", getattr(obj, f.name), out)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def forward_seg(model: Model, batch: PointSetBatch, mode: str = "train") -> Tensor:
    """Per-point logits [B, N, num_classes]."""
    return model.forward_seg(batch, mode)


def forward_cls(model: Model, batch: PointSetBatch, mode: str = "train") -> Tensor:
    """Per-cloud logits [B, num_classes]."""
    return model.forward_cls(batch, mode)


def param_count(obj) -> int:
    """Number of learnable scalars in a model, params container, or list."""
    if obj is None:
        return 0
    if isinstance(obj, Model):
        return sum(t.data.size for t in obj.named_params().values())
    if isinstance(obj, Tensor):
        return obj.data.size
    if isinstance(obj, LayerParams):
        return sum(t.data.size for _, t in obj.tensors())
    if dataclasses.is_dataclass(obj):
        return sum(param_count(getattr(obj, f.name)) for f in dataclasses.fields(obj))
    if isinstance(obj, (list, tuple)):
        return sum(param_count(x) for x in obj)
    return 0


# ---------------------------------------------------------------------------
# presets


def preset_config(name: str, num_classes: int = 13, **overrides) -> ModelConfig:
    """Named architecture presets; extra keyword arguments override fields."""
    presets = {
        "pointvector-s": dict(
            embed_channels=32, sa_per_stage=[0, 0, 0, 0], vpsa_per_stage=[1, 1, 1, 1],
            strides=[4, 4, 4, 4], task="segmentation"),
        "pointvector-l": dict(
            embed_channels=32, sa_per_stage=[1, 1, 1, 1], vpsa_per_stage=[2, 4, 2, 2],
            strides=[4, 4, 4, 4], task="segmentation"),
        "pointvector-xl": dict(
            embed_channels=64, sa_per_stage=[1, 1, 1, 1], vpsa_per_stage=[3, 6, 3, 3],
            strides=[4, 4, 4, 4], task="segmentation"),
        "pointvector-s-cls": dict(
            embed_channels=32, sa_per_stage=[0, 0, 0, 0], vpsa_per_stage=[1, 1, 1, 1],
            strides=[2, 2, 2, 2], task="classification"),
        "toy-seg": dict(
            embed_channels=16, sa_per_stage=[1, 1], vpsa_per_stage=[1, 1],
            strides=[2, 2], k_sa=16, k_vpsa=8, sa_layers=2, task="segmentation"),
        "toy-seg-ball": dict(
            embed_channels=16, sa_per_stage=[1, 1], vpsa_per_stage=[1, 1],
            strides=[2, 2], k_sa=16, k_vpsa=8, sa_layers=2, radii=[0.3, 0.6],
            task="segmentation"),
        "toy-cls": dict(
            embed_channels=16, sa_per_stage=[0, 0], vpsa_per_stage=[1, 1],
            strides=[2, 2], k_vpsa=8, task="classification"),
    }
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    params = dict(presets[name])
    params["num_classes"] = num_classes
    params.update(overrides)
    return ModelConfig(**params)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write parameters and running statistics with a JSON header; bit-exact."""
    arrays = {}
    for name, t in model.named_params().items():
        arrays[f"param/{name}"] = t.data
    for name, arr in model.named_running().items():
        arrays[f"running/{name}"] = arr
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "extra": extra or {},
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                           dtype=np.uint8)
    np.savez(path, __meta__=header, **arrays)


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra metadata)."""
    try:
        data = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in data:
        raise CheckpointError(f"checkpoint {path} has no metadata header")
    try:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode("utf-8"))
    except Exception as exc:
        raise CheckpointError(f"corrupt metadata header in {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('format_version')}")
    try:
        cfg = ModelConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc
    model = Model(cfg, seed=0)
    for name, t in model.named_params().items():
        key = f"param/{name}"
        if key not in data:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        arr = data[key]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, model {t.data.shape}")
        t.data = arr
    layers = model.layer_map()
    for path_name, layer in layers.items():
        if layer.running_mean is None:
            continue
        for stat in ("running_mean", "running_var"):
            key = f"running/{path_name}.{stat}"
            if key not in data:
                raise CheckpointError(f"checkpoint missing statistic {key}")
            arr = data[key]
            if arr.shape != getattr(layer, stat).shape:
                raise CheckpointError(f"shape mismatch for {key}")
            setattr(layer, stat, arr)
    return model, meta.get("extra", {})
