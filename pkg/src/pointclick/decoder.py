"""Multi-stage mask decoder.

Each stage runs a transformer block over the click queries — cross-attention
to one encoder scale (coarsest first, full-resolution map last), then query
self-attention and a feed-forward layer, all pre-normalized with residuals —
followed by a conditioned query adaptor: a mask head and a prototype class
head predict the stage's segmentation, and the query is refreshed by fusing
it with a mask-pooled spatial embedding and the selected prototype row.

The mask/class/fusion MLPs and the prototype table are shared across stages;
attention, FFN, and normalization weights are per stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .encoder import MultiScaleFeatures, QueryFeatures, _acc
from .numerics import (
    MlpParams,
    attention_backward,
    attention_forward,
    fourier_pe,
    layer_norm_backward,
    layer_norm_forward,
    mlp_backward,
    mlp_forward,
)


@dataclass
class DecoderConfig:
    d_model: int = 256
    ffn_hidden: int = 512
    n_classes: int = 8
    n_prototypes: int = 8
    stages: int = 4
    soft_pooling: bool = False
    activation: str = "gelu"
    pe_max_bands: int = 8

    def __post_init__(self):
        if self.n_classes > self.n_prototypes:
            raise ValueError(
                f"n_classes {self.n_classes} exceeds n_prototypes {self.n_prototypes}"
            )
        if self.stages < 1:
            raise ValueError("need at least one decoder stage")


@dataclass
class StageOutput:
    mask_logits: np.ndarray     # (N, K)
    class_logits: np.ndarray    # (N_c, K)
    q_t: np.ndarray             # (K, d)
    q_a: np.ndarray             # (K, d)


def _xavier(rng, fan_in, fan_out, dtype):
    s = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, s, size=(fan_in, fan_out)).astype(dtype)


def init_decoder_params(
    cfg: DecoderConfig, kv_dims: list, rng, dtype=np.float64
) -> dict:
    """kv_dims: feature dim consumed by each stage (coarsest level ... out_dim)."""
    if len(kv_dims) != cfg.stages:
        raise ValueError("one kv dim per stage required")
    d = cfg.d_model
    p = {}
    for i, dk in enumerate(kv_dims, start=1):
        s = f"dec.stage{i}"
        for blk, din in (("c2s", dk), ("c2c", d)):
            p[f"{s}.{blk}.ln.g"] = np.ones(d, dtype=dtype)
            p[f"{s}.{blk}.ln.b"] = np.zeros(d, dtype=dtype)
            p[f"{s}.{blk}.wq"] = _xavier(rng, d, d, dtype)
            p[f"{s}.{blk}.bq"] = np.zeros(d, dtype=dtype)
            p[f"{s}.{blk}.wk"] = _xavier(rng, din, d, dtype)
            p[f"{s}.{blk}.bk"] = np.zeros(d, dtype=dtype)
            p[f"{s}.{blk}.wv"] = _xavier(rng, din, d, dtype)
            p[f"{s}.{blk}.bv"] = np.zeros(d, dtype=dtype)
            p[f"{s}.{blk}.wo"] = _xavier(rng, d, d, dtype)
            p[f"{s}.{blk}.bo"] = np.zeros(d, dtype=dtype)
        p[f"{s}.ffn.ln.g"] = np.ones(d, dtype=dtype)
        p[f"{s}.ffn.ln.b"] = np.zeros(d, dtype=dtype)
        p[f"{s}.ffn.W0"] = _xavier(rng, d, cfg.ffn_hidden, dtype)
        p[f"{s}.ffn.b0"] = np.zeros(cfg.ffn_hidden, dtype=dtype)
        p[f"{s}.ffn.W1"] = _xavier(rng, cfg.ffn_hidden, d, dtype)
        p[f"{s}.ffn.b1"] = np.zeros(d, dtype=dtype)
    for name, din, dout in (
        ("phi_m", d, d),
        ("phi_c", d, d),
        ("phi_q", 3 * d, d),
    ):
        p[f"dec.{name}.W0"] = _xavier(rng, din, dout, dtype)
        p[f"dec.{name}.b0"] = np.zeros(dout, dtype=dtype)
        p[f"dec.{name}.W1"] = _xavier(rng, dout, dout, dtype)
        p[f"dec.{name}.b1"] = np.zeros(dout, dtype=dtype)
    p["dec.prototypes"] = rng.normal(
        0.0, 1.0 / np.sqrt(d), size=(cfg.n_prototypes, d)
    ).astype(dtype)
    return p


def _phi(params, cfg, name):
    return MlpParams(
        weights=[params[f"dec.{name}.W0"], params[f"dec.{name}.W1"]],
        biases=[params[f"dec.{name}.b0"], params[f"dec.{name}.b1"]],
        activation=cfg.activation,
    )


def _ffn(params, stage):
    s = f"dec.stage{stage}.ffn"
    return s


# ---------------------------------------------------------------------------
# attention sublayer (projections + residual, pre-normalized)

def _attn_sublayer_forward(params, prefix, q_in, kv_in):
    g, b = params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"]
    q_ln, ln_cache = layer_norm_forward(q_in, g, b)
    qp = q_ln @ params[f"{prefix}.wq"] + params[f"{prefix}.bq"]
    kp = kv_in @ params[f"{prefix}.wk"] + params[f"{prefix}.bk"]
    vp = kv_in @ params[f"{prefix}.wv"] + params[f"{prefix}.bv"]
    att, att_cache = attention_forward(qp, kp, vp)
    out = q_in + att @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]
    return out, (ln_cache, att_cache, q_ln, kv_in, att)


def _attn_sublayer_backward(params, prefix, cache, dout, grads):
    """Returns (dq_in, dkv_in)."""
    ln_cache, att_cache, q_ln, kv_in, att = cache
    dq_in = dout.copy()
    datt = dout @ params[f"{prefix}.wo"].T
    _acc(grads, f"{prefix}.wo", att.T @ dout)
    _acc(grads, f"{prefix}.bo", dout.sum(axis=0))
    dqp, dkp, dvp = attention_backward(att_cache, datt)
    _acc(grads, f"{prefix}.wq", q_ln.T @ dqp)
    _acc(grads, f"{prefix}.bq", dqp.sum(axis=0))
    _acc(grads, f"{prefix}.wk", kv_in.T @ dkp)
    _acc(grads, f"{prefix}.bk", dkp.sum(axis=0))
    _acc(grads, f"{prefix}.wv", kv_in.T @ dvp)
    _acc(grads, f"{prefix}.bv", dvp.sum(axis=0))
    dkv_in = dkp @ params[f"{prefix}.wk"].T + dvp @ params[f"{prefix}.wv"].T
    dq_ln = dqp @ params[f"{prefix}.wq"].T
    dq, dg, db = layer_norm_backward(ln_cache, dq_ln)
    _acc(grads, f"{prefix}.ln.g", dg)
    _acc(grads, f"{prefix}.ln.b", db)
    dq_in += dq
    return dq_in, dkv_in


# ---------------------------------------------------------------------------
# transformer block

def transformer_block_forward(params, cfg: DecoderConfig, stage: int, q_prev, feat, pos):
    """One stage's query refinement: cross-attend to the scene scale, then
    self-attend among queries, then FFN; all pre-norm residual."""
    d_kv = feat.shape[1]
    if d_kv < 6:
        raise ValueError("scene feature dim must be >= 6 for positional encoding")
    bands = min(cfg.pe_max_bands, d_kv // 6)
    pe = fourier_pe(pos, bands, d_kv).astype(feat.dtype)
    kv_in = feat + pe

    s = f"dec.stage{stage}"
    q1, c2s_cache = _attn_sublayer_forward(params, f"{s}.c2s", q_prev, kv_in)
    q2, c2c_cache = _attn_sublayer_forward(params, f"{s}.c2c", q1, q1)

    g, b = params[f"{s}.ffn.ln.g"], params[f"{s}.ffn.ln.b"]
    q_ln, ln_cache = layer_norm_forward(q2, g, b)
    ffn_mlp = MlpParams(
        weights=[params[f"{s}.ffn.W0"], params[f"{s}.ffn.W1"]],
        biases=[params[f"{s}.ffn.b0"], params[f"{s}.ffn.b1"]],
        activation=cfg.activation,
    )
    f_out, mlp_cache = mlp_forward(q_ln, ffn_mlp)
    q_t = q2 + f_out
    return q_t, (c2s_cache, c2c_cache, ln_cache, mlp_cache, ffn_mlp)


def transformer_block(q_prev, feat, pos, params, cfg: DecoderConfig, stage: int):
    q_t, _ = transformer_block_forward(params, cfg, stage, q_prev, feat, pos)
    return q_t


def transformer_block_backward(params, cfg, stage, cache, dq_t, grads):
    """Returns (dq_prev, dfeat)."""
    c2s_cache, c2c_cache, ln_cache, mlp_cache, ffn_mlp = cache
    s = f"dec.stage{stage}"
    dq2 = dq_t.copy()
    dln_out, dWs, dbs = mlp_backward(ffn_mlp, mlp_cache, dq_t)
    _acc(grads, f"{s}.ffn.W0", dWs[0]); _acc(grads, f"{s}.ffn.b0", dbs[0])
    _acc(grads, f"{s}.ffn.W1", dWs[1]); _acc(grads, f"{s}.ffn.b1", dbs[1])
    dq, dg, db = layer_norm_backward(ln_cache, dln_out)
    _acc(grads, f"{s}.ffn.ln.g", dg); _acc(grads, f"{s}.ffn.ln.b", db)
    dq2 += dq

    # self-attention: queries and keys/values are the same tensor
    dq1, dq1_kv = _attn_sublayer_backward(params, f"{s}.c2c", c2c_cache, dq2, grads)
    dq1 += dq1_kv
    dq_prev, dkv_in = _attn_sublayer_backward(params, f"{s}.c2s", c2s_cache, dq1, grads)
    return dq_prev, dkv_in   # positional encoding carries no gradient


# ---------------------------------------------------------------------------
# heads and query adaptation

def mask_head(full_res, q_t, params, cfg: DecoderConfig):
    emb, _ = mlp_forward(q_t, _phi(params, cfg, "phi_m"))
    return full_res @ emb.T


def class_head(q_t, params, cfg: DecoderConfig):
    emb, _ = mlp_forward(q_t, _phi(params, cfg, "phi_c"))
    return params["dec.prototypes"][: cfg.n_classes] @ emb.T


def mask_pool(full_res, mask_logits, soft=False):
    """Spatial embedding per query: aggregate feature rows under the mask.

    Hard mode averages rows whose sigmoid probability exceeds 0.5 (empty
    selection -> zero row); soft mode weights rows by the probabilities.
    Returns (E_p, cache).
    """
    probs = expit(mask_logits)
    if soft:
        w = probs.astype(full_res.dtype)                      # (N, K)
        denom = w.sum(axis=0)                                 # (K,)
        ep = (w.T @ full_res) / denom[:, None]
        return ep, ("soft", w, denom, ep, probs)
    sel = (probs > 0.5).astype(full_res.dtype)
    counts = sel.sum(axis=0)
    safe = np.maximum(counts, 1.0)
    ep = (sel.T @ full_res) / safe[:, None]
    return ep, ("hard", sel, safe, None, None)


def mask_pool_backward(cache, full_res, dep):
    """Returns (d_full_res, d_mask_logits or None)."""
    kind = cache[0]
    if kind == "soft":
        _, w, denom, ep, probs = cache
        scaled = dep / denom[:, None]                          # (K, d)
        d_full = w @ scaled
        dw = full_res @ scaled.T - np.sum(ep * scaled, axis=1)[None, :]
        dlogits = dw * (probs * (1.0 - probs)).astype(full_res.dtype)
        return d_full, dlogits
    _, sel, safe, _, _ = cache
    scaled = dep / safe[:, None]
    d_full = sel @ scaled
    return d_full, None


def semantic_select(class_logits, params):
    """One prototype row per query, chosen by the predicted class."""
    cls = np.argmax(class_logits, axis=0)     # ties -> smaller class index
    return params["dec.prototypes"][cls], cls


def query_adapt(q_t, mask_logits, class_logits, full_res, params, cfg: DecoderConfig):
    ep, _ = mask_pool(full_res, mask_logits, soft=cfg.soft_pooling)
    es, _ = semantic_select(class_logits, params)
    cat = np.concatenate([q_t, ep, es], axis=1)
    q_a, _ = mlp_forward(cat, _phi(params, cfg, "phi_q"))
    return q_a


# ---------------------------------------------------------------------------
# full decode

def _stage_inputs(feats: MultiScaleFeatures, stages: int):
    n_levels = len(feats.features) - 1
    if stages != n_levels:
        raise ValueError(
            f"stage count {stages} != available scales {n_levels}"
        )
    seq = []
    for i in range(1, stages):
        lvl = n_levels - i + 1
        seq.append((lvl, feats.positions[lvl], feats.features[lvl]))
    seq.append((0, feats.positions[0], feats.full_res))
    return seq


def decode_forward(feats: MultiScaleFeatures, q0: QueryFeatures, params, cfg: DecoderConfig):
    """Run all stages; returns (stage outputs, cache)."""
    full = feats.full_res
    q = q0.q
    outputs, stage_caches = [], []
    for stage, (lvl, pos, feat) in enumerate(_stage_inputs(feats, cfg.stages), start=1):
        q_t, blk_cache = transformer_block_forward(params, cfg, stage, q, feat, pos)
        m_emb, phim_cache = mlp_forward(q_t, _phi(params, cfg, "phi_m"))
        mask_logits = full @ m_emb.T
        c_emb, phic_cache = mlp_forward(q_t, _phi(params, cfg, "phi_c"))
        class_logits = params["dec.prototypes"][: cfg.n_classes] @ c_emb.T
        ep, pool_cache = mask_pool(full, mask_logits, soft=cfg.soft_pooling)
        es, cls = semantic_select(class_logits, params)
        cat = np.concatenate([q_t, ep, es], axis=1)
        q_a, phiq_cache = mlp_forward(cat, _phi(params, cfg, "phi_q"))
        outputs.append(
            StageOutput(mask_logits=mask_logits, class_logits=class_logits, q_t=q_t, q_a=q_a)
        )
        stage_caches.append({
            "lvl": lvl,
            "blk": blk_cache,
            "phim": phim_cache,
            "m_emb": m_emb,
            "phic": phic_cache,
            "c_emb": c_emb,
            "pool": pool_cache,
            "cls": cls,
            "cat": cat,
            "phiq": phiq_cache,
            "q_t": q_t,
        })
        q = q_a
    return outputs, {"stages": stage_caches, "full": full}


def decode(feats: MultiScaleFeatures, q0: QueryFeatures, params, cfg: DecoderConfig):
    outputs, _ = decode_forward(feats, q0, params, cfg)
    return outputs


def decode_backward(params, cfg: DecoderConfig, cache, d_masks, d_classes, grads):
    """Backpropagate per-stage head gradients through the whole decoder.

    Returns (dq0, d_full, d_level_feats) where d_level_feats maps encoder
    scale -> gradient, for the cross-attended internal scales.
    """
    stage_caches = cache["stages"]
    full = cache["full"]
    d_full = np.zeros_like(full)
    d_level_feats = {}
    dq_a = None   # gradient flowing into the *output* query of the stage below
    d = cfg.d_model
    for i in reversed(range(len(stage_caches))):
        sc = stage_caches[i]
        stage = i + 1
        # adaptor backward
        if dq_a is None:
            dq_a = np.zeros_like(sc["q_t"])
        dcat, dWs, dbs = mlp_backward(_phi(params, cfg, "phi_q"), sc["phiq"], dq_a)
        _acc(grads, "dec.phi_q.W0", dWs[0]); _acc(grads, "dec.phi_q.b0", dbs[0])
        _acc(grads, "dec.phi_q.W1", dWs[1]); _acc(grads, "dec.phi_q.b1", dbs[1])
        dq_t = dcat[:, :d].copy()
        dep = dcat[:, d : 2 * d]
        des = dcat[:, 2 * d :]
        # semantic embedding: scatter into chosen prototype rows
        dproto = np.zeros_like(params["dec.prototypes"])
        np.add.at(dproto, sc["cls"], des)
        # spatial embedding
        dfull_pool, dmask_from_pool = mask_pool_backward(sc["pool"], full, dep)
        d_full += dfull_pool
        dmask = d_masks[i].astype(full.dtype)
        if dmask_from_pool is not None:
            dmask = dmask + dmask_from_pool
        # class head
        dclass = d_classes[i].astype(full.dtype)
        protos_nc = params["dec.prototypes"][: cfg.n_classes]
        dc_emb = dclass.T @ protos_nc
        dproto[: cfg.n_classes] += dclass @ sc["c_emb"]
        _acc(grads, "dec.prototypes", dproto)
        dq, dWs, dbs = mlp_backward(_phi(params, cfg, "phi_c"), sc["phic"], dc_emb)
        _acc(grads, "dec.phi_c.W0", dWs[0]); _acc(grads, "dec.phi_c.b0", dbs[0])
        _acc(grads, "dec.phi_c.W1", dWs[1]); _acc(grads, "dec.phi_c.b1", dbs[1])
        dq_t += dq
        # mask head
        dm_emb = dmask.T @ full
        d_full += dmask @ sc["m_emb"]
        dq, dWs, dbs = mlp_backward(_phi(params, cfg, "phi_m"), sc["phim"], dm_emb)
        _acc(grads, "dec.phi_m.W0", dWs[0]); _acc(grads, "dec.phi_m.b0", dbs[0])
        _acc(grads, "dec.phi_m.W1", dWs[1]); _acc(grads, "dec.phi_m.b1", dbs[1])
        dq_t += dq
        # transformer block
        dq_prev, dkv = transformer_block_backward(params, cfg, stage, sc["blk"], dq_t, grads)
        if sc["lvl"] == 0:
            d_full += dkv
        else:
            if sc["lvl"] in d_level_feats:
                d_level_feats[sc["lvl"]] += dkv
            else:
                d_level_feats[sc["lvl"]] = dkv
        dq_a = dq_prev
    return dq_a, d_full, d_level_feats
