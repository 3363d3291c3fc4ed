"""Model assembly: configuration, parameter init, the encoder->decoder->loss
composition with its hand-composed backward pass, and checkpoint io.

Checkpoints are flat npz archives of named little-endian float32 tensors plus
an embedded JSON config; see docs/formats.md for the name->shape manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import DecoderConfig, decode_backward, decode_forward, init_decoder_params
from .encoder import (
    EncoderConfig,
    encode_queries,
    encode_scene_forward,
    encoder_backward,
    init_encoder_params,
    query_backward,
)
from .geometry import PointCloud
from .losses import LossWeights, SupervisionTargets, total_loss, total_loss_grads
from .sampling import ClickSet


@dataclass
class ModelConfig:
    level_dims: tuple = (32, 64, 128, 256)
    voxel_sizes: tuple = (0.02, 0.05, 0.12, 0.3)
    d_model: int = 256
    ffn_hidden: int = 512
    pe_bands: int = 6
    attr_dim: int = 0
    n_classes: int = 8
    n_prototypes: int = 8
    stages: int = 4
    soft_pooling: bool = False
    activation: str = "gelu"
    pe_max_bands: int = 8
    k_lookup: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        self.level_dims = tuple(self.level_dims)
        self.voxel_sizes = tuple(self.voxel_sizes)
        if self.stages != len(self.level_dims):
            raise ValueError(
                f"stage count {self.stages} != encoder scales {len(self.level_dims)}"
            )

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            level_dims=self.level_dims,
            voxel_sizes=self.voxel_sizes,
            out_dim=self.d_model,
            pe_bands=self.pe_bands,
            attr_dim=self.attr_dim,
            activation=self.activation,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            d_model=self.d_model,
            ffn_hidden=self.ffn_hidden,
            n_classes=self.n_classes,
            n_prototypes=self.n_prototypes,
            stages=self.stages,
            soft_pooling=self.soft_pooling,
            activation=self.activation,
            pe_max_bands=self.pe_max_bands,
        )

    def stage_kv_dims(self) -> list:
        dims = list(self.level_dims)
        seq = [dims[len(dims) - i] for i in range(1, self.stages)]
        seq.append(self.d_model)
        return seq


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    version: str = "1"

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def astype(self, dtype) -> "ModelParams":
        cfg = ModelConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        return ModelParams(
            config=cfg,
            params={k: v.astype(dtype) for k, v in self.params.items()},
            version=self.version,
        )


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    dtype = config.np_dtype
    params = init_encoder_params(config.encoder_config(), rng, dtype)
    params.update(
        init_decoder_params(config.decoder_config(), config.stage_kv_dims(), rng, dtype)
    )
    for v in params.values():
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite parameter initialization")
    return ModelParams(config=config, params=params)


# ---------------------------------------------------------------------------
# forward / backward composition

def model_forward(model: ModelParams, cloud_norm: PointCloud, clicks_norm: ClickSet,
                  index=None, with_cache: bool = False):
    """Encoder pass + query lookup + full decode on a normalized scene.

    clicks_norm must be expressed in the normalized frame and snapped to
    scene points. Returns (feats, queries, stage_outputs[, cache]).
    """
    cfg = model.config
    feats, enc_cache = encode_scene_forward(cloud_norm, model.params, cfg.encoder_config())
    qf = encode_queries(clicks_norm, cloud_norm, feats, k=cfg.k_lookup, index=index)
    outputs, dec_cache = decode_forward(feats, qf, model.params, cfg.decoder_config())
    if with_cache:
        return feats, qf, outputs, {"enc": enc_cache, "dec": dec_cache, "qf": qf}
    return feats, qf, outputs


def loss_and_grads(model: ModelParams, cloud_norm: PointCloud, clicks_norm: ClickSet,
                   targets: SupervisionTargets, weights: LossWeights, index=None):
    """One training evaluation: total loss, per-stage breakdown, and the
    gradient dict (same keys as model.params)."""
    cfg = model.config
    feats, qf, outputs, cache = model_forward(
        model, cloud_norm, clicks_norm, index=index, with_cache=True
    )
    loss, breakdown = total_loss(outputs, targets, weights)
    d_masks, d_classes = total_loss_grads(outputs, targets, weights)
    grads: dict = {}
    dq0, d_full, d_level = decode_backward(
        model.params, cfg.decoder_config(), cache["dec"], d_masks, d_classes, grads
    )
    query_backward(qf, dq0, d_full)
    encoder_backward(model.params, cfg.encoder_config(), cache["enc"], d_full, d_level, grads)
    for name in model.params:
        if name not in grads:
            grads[name] = np.zeros_like(model.params[name])
    return loss, breakdown, grads, outputs


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: ModelParams, path) -> None:
    """Flat npz archive: each parameter as little-endian float32 with shape
    headers, plus config/version JSON under reserved keys."""
    arrays = {name: arr.astype("<f4") for name, arr in model.params.items()}
    meta = {"config": asdict(model.config), "version": model.version}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        cfg = ModelConfig(**{**meta["config"],
                             "level_dims": tuple(meta["config"]["level_dims"]),
                             "voxel_sizes": tuple(meta["config"]["voxel_sizes"])})
        dtype = cfg.np_dtype
        params = {
            name: np.ascontiguousarray(data[name]).astype(dtype)
            for name in data.files
            if name != "__meta__"
        }
    model = ModelParams(config=cfg, params=params, version=meta["version"])
    _validate_shapes(model)
    return model


def checkpoint_manifest(model: ModelParams) -> dict:
    """name -> shape listing of every tensor in a checkpoint."""
    return {name: tuple(arr.shape) for name, arr in sorted(model.params.items())}


def _validate_shapes(model: ModelParams) -> None:
    reference = init_model(model.config, seed=0)
    ref_shapes = checkpoint_manifest(reference)
    got_shapes = checkpoint_manifest(model)
    if ref_shapes != got_shapes:
        missing = set(ref_shapes) ^ set(got_shapes)
        bad = {
            k for k in set(ref_shapes) & set(got_shapes) if ref_shapes[k] != got_shapes[k]
        }
        raise ValueError(f"checkpoint shape mismatch: missing/extra={missing}, bad={bad}")
