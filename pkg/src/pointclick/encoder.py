"""Hierarchical scene encoder and click-query initialization.

A stand-in for a heavyweight pretrained point transformer: each level voxel
downsamples the previous one and aggregates child features through a small
MLP; the coarsest features are then propagated back to full resolution
through the parent-map chain (fusing each finer level on the way) and
projected to the query dimension. The full-resolution map drives the mask
head, the query lookup, and the final decoder stage.

Forward functions return caches consumed by the matching backward functions;
gradients accumulate into a flat name->array dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, build_index, knn, parent_inverse, voxel_downsample
from .numerics import (
    MlpParams,
    fourier_pe,
    gelu_backward,
    gelu_forward,
    mlp_backward,
    mlp_forward,
)
from .sampling import ClickSet


@dataclass
class EncoderConfig:
    level_dims: tuple = (32, 64, 128, 256)
    voxel_sizes: tuple = (0.02, 0.05, 0.12, 0.3)
    out_dim: int = 256
    pe_bands: int = 6
    attr_dim: int = 0          # per-point attribute channels (e.g. 3 for rgb)
    activation: str = "gelu"

    def __post_init__(self):
        if len(self.level_dims) != len(self.voxel_sizes):
            raise ValueError("level_dims and voxel_sizes must align")
        if len(self.level_dims) < 1:
            raise ValueError("need at least one encoder level")

    @property
    def n_levels(self) -> int:
        return len(self.level_dims)

    @property
    def raw_dim(self) -> int:
        # constant 1 + xyz + attributes
        return 4 + self.attr_dim


@dataclass
class MultiScaleFeatures:
    """Per-scale features: scale 0 is the raw input, scales 1..L the voxel
    hierarchy, full_res the unpooled full-resolution map F used by heads."""

    positions: list                     # scale i -> (N_i, 3) float64
    features: list                      # scale i -> (N_i, D_i)
    parent_maps: list                   # i -> coarse->fine index lists (scale i -> i+1)
    inverses: list                      # i -> fine->coarse array (scale i -> i+1)
    full_res: np.ndarray                # (N, out_dim)

    @property
    def n_scales(self) -> int:
        return len(self.positions)


@dataclass
class QueryFeatures:
    q: np.ndarray                       # (K, D_q)
    click_positions: np.ndarray         # (K, 3)
    instance_group: np.ndarray          # (K,)
    point_indices: np.ndarray = field(default=None)  # (K, k) lookup rows


# ---------------------------------------------------------------------------
# parameter initialization

def _he(rng, fan_in, fan_out, dtype):
    return (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))).astype(dtype)


def init_encoder_params(cfg: EncoderConfig, rng, dtype=np.float64) -> dict:
    p = {}
    in_dim = cfg.raw_dim + 3   # child features + centroid-relative offset
    for k, d in enumerate(cfg.level_dims, start=1):
        p[f"enc.level{k}.W0"] = _he(rng, in_dim, d, dtype)
        p[f"enc.level{k}.b0"] = np.zeros(d, dtype=dtype)
        p[f"enc.level{k}.W1"] = _he(rng, d, d, dtype)
        p[f"enc.level{k}.b1"] = np.zeros(d, dtype=dtype)
        in_dim = d + 3
    dims = cfg.level_dims
    for k in range(cfg.n_levels - 1, 0, -1):   # fuse level k with carry from k+1
        fin = dims[k - 1] + dims[k]
        p[f"enc.unpool{k}.W"] = _he(rng, fin, dims[k - 1], dtype)
        p[f"enc.unpool{k}.b"] = np.zeros(dims[k - 1], dtype=dtype)
    fin = cfg.raw_dim + 6 * cfg.pe_bands + dims[0]
    p["enc.out.W0"] = _he(rng, fin, cfg.out_dim, dtype)
    p["enc.out.b0"] = np.zeros(cfg.out_dim, dtype=dtype)
    p["enc.out.W1"] = _he(rng, cfg.out_dim, cfg.out_dim, dtype)
    p["enc.out.b1"] = np.zeros(cfg.out_dim, dtype=dtype)
    return p


def _level_mlp(params, cfg, k):
    return MlpParams(
        weights=[params[f"enc.level{k}.W0"], params[f"enc.level{k}.W1"]],
        biases=[params[f"enc.level{k}.b0"], params[f"enc.level{k}.b1"]],
        activation=cfg.activation,
    )


def _out_mlp(params, cfg):
    return MlpParams(
        weights=[params["enc.out.W0"], params["enc.out.W1"]],
        biases=[params["enc.out.b0"], params["enc.out.b1"]],
        activation=cfg.activation,
    )


# ---------------------------------------------------------------------------
# segment reductions (argsort + reduceat; ufunc.at is too slow at 50k points)

def scatter_mean(values, inv, n_coarse):
    counts = np.bincount(inv, minlength=n_coarse)
    sums = scatter_sum(values, inv, n_coarse, counts=counts)
    return sums / counts[:, None].astype(values.dtype), counts


def scatter_sum(values, inv, n_coarse, counts=None):
    if counts is None:
        counts = np.bincount(inv, minlength=n_coarse)
    if np.any(counts == 0):
        out = np.zeros((n_coarse, values.shape[1]), dtype=values.dtype)
        np.add.at(out, inv, values)
        return out
    order = np.argsort(inv, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.add.reduceat(values[order], starts, axis=0)


# ---------------------------------------------------------------------------
# forward / backward

def raw_features(cloud: PointCloud, cfg: EncoderConfig, dtype):
    cols = [np.ones((cloud.n_points, 1)), cloud.positions]
    if cfg.attr_dim:
        if cloud.attributes is None or cloud.attributes.shape[1] != cfg.attr_dim:
            raise ValueError("cloud attributes do not match encoder attr_dim")
        cols.append(cloud.attributes)
    return np.concatenate(cols, axis=1).astype(dtype)


def encode_scene_forward(cloud: PointCloud, params: dict, cfg: EncoderConfig):
    """Full multi-scale encoding of a normalized cloud. Returns (feats, cache)."""
    dtype = params["enc.out.W0"].dtype
    raw = raw_features(cloud, cfg, dtype)
    positions = [cloud.positions]
    features = [raw]
    parent_maps, inverses = [], []
    level_caches = []
    cur = cloud
    feats = raw
    for k, (d, vs) in enumerate(zip(cfg.level_dims, cfg.voxel_sizes), start=1):
        coarse, pmap = voxel_downsample(cur, vs)
        if coarse.n_points == 1 and cloud.n_points > 1:
            raise ValueError(
                f"degenerate hierarchy: level {k} (voxel {vs}) collapsed to one point"
            )
        inv = parent_inverse(pmap, cur.n_points)
        rel = ((cur.positions - coarse.positions[inv]) / vs).astype(dtype)
        mlp_in = np.concatenate([feats, rel], axis=1)
        h, mlp_cache = mlp_forward(mlp_in, _level_mlp(params, cfg, k))
        pooled, counts = scatter_mean(h, inv, coarse.n_points)
        positions.append(coarse.positions)
        features.append(pooled)
        parent_maps.append(pmap)
        inverses.append(inv)
        level_caches.append((mlp_cache, inv, counts, feats.shape[1]))
        cur = coarse
        feats = pooled

    H = cfg.n_levels
    u = features[H]
    unpool_caches = []
    for k in range(H - 1, 0, -1):
        carry = u[inverses[k]]
        fuse_in = np.concatenate([features[k], carry], axis=1)
        z = fuse_in @ params[f"enc.unpool{k}.W"] + params[f"enc.unpool{k}.b"]
        u, act_cache = gelu_forward(z)
        unpool_caches.append((k, fuse_in, act_cache))

    carry0 = u[inverses[0]]
    pe = fourier_pe(cloud.positions, cfg.pe_bands, 6 * cfg.pe_bands).astype(dtype)
    out_in = np.concatenate([raw, pe, carry0], axis=1)
    full, out_cache = mlp_forward(out_in, _out_mlp(params, cfg))

    feats_obj = MultiScaleFeatures(
        positions=positions,
        features=features,
        parent_maps=parent_maps,
        inverses=inverses,
        full_res=full,
    )
    cache = {
        "level_caches": level_caches,
        "unpool_caches": unpool_caches,
        "out_cache": out_cache,
        "out_in_split": (cfg.raw_dim, 6 * cfg.pe_bands),
        "feats": feats_obj,
    }
    return feats_obj, cache


def encode_scene(cloud: PointCloud, params: dict, cfg: EncoderConfig) -> MultiScaleFeatures:
    feats, _ = encode_scene_forward(cloud, params, cfg)
    return feats


def encoder_backward(params, cfg: EncoderConfig, cache, d_full, d_level_feats, grads):
    """Backpropagate d(full_res) plus per-scale feature grads into `grads`.

    d_level_feats maps scale index (1..L) to an (N_i, D_i) gradient from the
    decoder's cross-attention; missing scales contribute nothing.
    """
    feats = cache["feats"]
    H = cfg.n_levels
    dfeat = [None] * (H + 1)
    for k in range(1, H + 1):
        g = d_level_feats.get(k)
        dfeat[k] = (
            np.zeros_like(feats.features[k]) if g is None else g.astype(feats.features[k].dtype)
        )

    # output MLP
    dout_in, dWs, dbs = mlp_backward(_out_mlp(params, cfg), cache["out_cache"], d_full)
    _acc(grads, "enc.out.W0", dWs[0]); _acc(grads, "enc.out.b0", dbs[0])
    _acc(grads, "enc.out.W1", dWs[1]); _acc(grads, "enc.out.b1", dbs[1])
    raw_d, pe_d = cache["out_in_split"]
    dcarry0 = dout_in[:, raw_d + pe_d:]
    du = scatter_sum(dcarry0, feats.inverses[0], feats.features[1].shape[0])

    # unpool chain, reversed (forward ran k = H-1 .. 1)
    for k, fuse_in, act_cache in reversed(cache["unpool_caches"]):
        dz = gelu_backward(act_cache, du)
        _acc(grads, f"enc.unpool{k}.W", fuse_in.T @ dz)
        _acc(grads, f"enc.unpool{k}.b", dz.sum(axis=0))
        dfuse_in = dz @ params[f"enc.unpool{k}.W"].T
        dk = feats.features[k].shape[1]
        dfeat[k] += dfuse_in[:, :dk]
        dcarry = dfuse_in[:, dk:]
        du = scatter_sum(dcarry, feats.inverses[k], feats.features[k + 1].shape[0])
    dfeat[H] += du

    # pooling levels, top down
    for k in range(H, 0, -1):
        mlp_cache, inv, counts, child_dim = cache["level_caches"][k - 1]
        dh = dfeat[k][inv] / counts[inv][:, None].astype(dfeat[k].dtype)
        dmlp_in, dWs, dbs = mlp_backward(_level_mlp(params, cfg, k), mlp_cache, dh)
        _acc(grads, f"enc.level{k}.W0", dWs[0]); _acc(grads, f"enc.level{k}.b0", dbs[0])
        _acc(grads, f"enc.level{k}.W1", dWs[1]); _acc(grads, f"enc.level{k}.b1", dbs[1])
        if k > 1:
            dfeat[k - 1] += dmlp_in[:, :child_dim]


def _acc(grads: dict, name: str, g):
    if name in grads:
        grads[name] += g
    else:
        grads[name] = g.copy() if isinstance(g, np.ndarray) else g


# ---------------------------------------------------------------------------
# query encoding

def encode_queries(
    clicks: ClickSet,
    scene: PointCloud,
    feats: MultiScaleFeatures,
    k: int = 1,
    index=None,
) -> QueryFeatures:
    """Initialize one query row per click from the full-resolution features.

    Each row is the mean of the k nearest feature rows to the click (k=1 is
    an exact row copy since clicks are snapped to scene points).
    """
    n = feats.full_res.shape[0]
    if k > n:
        raise ValueError(f"insufficient points: k={k} > N={n}")
    if index is None:
        index = build_index(PointCloud(positions=feats.positions[0]))
    rows = np.stack([knn(index, c, k) for c in clicks.clicks])
    q = feats.full_res[rows].mean(axis=1)
    return QueryFeatures(
        q=q,
        click_positions=clicks.clicks.copy(),
        instance_group=clicks.instance_group.copy(),
        point_indices=rows,
    )


def query_backward(qf: QueryFeatures, dq, d_full):
    """Scatter query-init gradients back into the full-resolution map."""
    k = qf.point_indices.shape[1]
    per = dq / k
    for row_ids, g in zip(qf.point_indices, per):
        d_full[row_ids] += g
