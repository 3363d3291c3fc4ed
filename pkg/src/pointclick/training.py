"""Desk-scale training on synthetic scenes, plus the gradient-check harness.

One scene per step; clicks come from a pre-built candidate cache and a fresh
per-step subset draw, so the model sees varying click counts and positions.
Everything is reproducible from the config seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, build_index, normalize_cloud
from .losses import LossWeights, build_targets
from .model import ModelConfig, ModelParams, init_model, loss_and_grads, save_checkpoint
from .numerics import finite_diff_grad, relative_error
from .pipeline import snap_clicks
from .sampling import ClickSet, SamplerConfig, sample_click_candidates, training_subset


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    optimizer: str = "adam"          # adam | sgd
    momentum: float = 0.9            # sgd only
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0           # global-norm clip; 0 disables
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0        # 0 = only final/best
    out_dir: str | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: ModelParams
    curve: list                      # dicts: step, total, bce, dice, ce
    best_step: int
    best_loss: float


def precache_clicks(scenes: list, sampler_cfg: SamplerConfig) -> dict:
    """Per-scene click candidate pools, keyed by scene id.

    scenes: list of (cloud, instance_ids, class_ids). The per-scene seed is
    derived from (sampler seed, scene position) so the cache is byte-stable.
    """
    cache = {}
    for i, (cloud, instance_ids, _) in enumerate(scenes):
        cfg_i = SamplerConfig(**{
            **sampler_cfg.__dict__,
            "seed": int(np.random.default_rng((sampler_cfg.seed, i)).integers(2**63 - 1)),
        })
        cache[cloud.id] = sample_click_candidates(cloud, instance_ids, cfg_i)
    return cache


class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            params[name] -= c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)


class _Sgd:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.vel: dict = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            vel = self.vel.setdefault(name, np.zeros_like(params[name]))
            vel *= self.cfg.momentum
            vel += g
            params[name] -= self.cfg.lr * vel


def _clip_grads(grads: dict, max_norm: float):
    if max_norm <= 0:
        return
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def train(
    cfg: TrainConfig,
    scenes: list,
    cache: dict,
    model: ModelParams | None = None,
    model_config: ModelConfig | None = None,
) -> TrainResult:
    """Optimize the model on pre-generated scenes with pre-cached clicks."""
    if model is None:
        model = init_model(model_config or ModelConfig(), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(cfg) if cfg.optimizer == "adam" else _Sgd(cfg)
    dtype = model.config.np_dtype

    prepared = []
    for cloud, instance_ids, class_ids in scenes:
        if cloud.id not in cache:
            raise KeyError(f"scene {cloud.id!r} missing from click cache")
        cloud_norm, tf = normalize_cloud(cloud)
        index = build_index(cloud_norm)
        cand = cache[cloud.id]
        # candidate clicks are scene points; the same transform maps them
        # exactly onto normalized scene points
        cand_norm = ClickSet(
            clicks=tf.apply(cand.clicks),
            instance_group=cand.instance_group,
            source_instance=cand.source_instance,
        )
        prepared.append((cloud_norm, index, instance_ids, class_ids, cand_norm))

    curve = []
    best_loss, best_step = np.inf, -1
    best_params = None
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(cfg.steps):
        cloud_norm, index, instance_ids, class_ids, candidates = prepared[
            int(rng.integers(len(prepared)))
        ]
        clicks_norm = training_subset(candidates, cfg.sampler, seed=int(rng.integers(2**63 - 1)))
        targets = build_targets(clicks_norm, instance_ids, class_ids)
        loss, breakdown, grads, _ = loss_and_grads(
            model, cloud_norm, clicks_norm, targets, cfg.loss_weights, index=index
        )
        if not np.isfinite(loss):
            _dump_diagnostics(out_dir, step, curve, breakdown)
            raise RuntimeError(f"non-finite loss at step {step}: {loss}")
        _clip_grads(grads, cfg.grad_clip)
        opt.step(model.params, {k: v.astype(dtype) for k, v in grads.items()})

        mean_b = float(np.mean([b["bce"] for b in breakdown]))
        mean_d = float(np.mean([b["dice"] for b in breakdown]))
        mean_c = float(np.mean([b["ce"] for b in breakdown]))
        curve.append({"step": step, "total": float(loss),
                      "bce": mean_b, "dice": mean_d, "ce": mean_c})
        if loss < best_loss:
            best_loss, best_step = float(loss), step
            best_params = {k: v.copy() for k, v in model.params.items()}
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"step{step + 1:06d}.npz")

    if out_dir:
        save_checkpoint(model, out_dir / "final.npz")
        if best_params is not None:
            best = ModelParams(config=model.config, params=best_params, version=model.version)
            save_checkpoint(best, out_dir / "best.npz")
        write_loss_curve(curve, out_dir / "loss_curve.csv")
    return TrainResult(model=model, curve=curve, best_step=best_step, best_loss=best_loss)


def write_loss_curve(curve: list, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "total", "bce", "dice", "ce"])
        for row in curve:
            w.writerow([row["step"], row["total"], row["bce"], row["dice"], row["ce"]])


def _dump_diagnostics(out_dir, step, curve, breakdown):
    if not out_dir:
        return
    with open(Path(out_dir) / "abort_diagnostics.txt", "w") as f:
        f.write(f"aborted at step {step}\nlast breakdown: {breakdown}\n")
        for row in curve[-20:]:
            f.write(f"{row}\n")


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    groups: list                 # (name, rel_error) sorted by descending error
    tolerance: float
    passed: bool
    margins: dict                # diagnostic: min |mask logit|, min class margin

    def worst(self):
        return self.groups[0] if self.groups else ("", 0.0)


def grad_check(
    model: ModelParams,
    scene: PointCloud,
    clicks: ClickSet,
    instance_ids: np.ndarray,
    class_ids: np.ndarray,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    weights: LossWeights | None = None,
) -> GradCheckReport:
    """Analytic vs central-difference gradients for every parameter group.

    Requires a double-precision model. Hard mask pooling and prototype
    selection are piecewise constant, so the report includes the decision
    margins; with the bundled configs they sit far above the step size.
    """
    if model.config.np_dtype != np.float64:
        raise ValueError("grad_check requires a float64 model")
    weights = weights or LossWeights()
    cloud_norm, tf = normalize_cloud(scene)
    index = build_index(cloud_norm)
    clicks_norm, _ = snap_clicks(
        cloud_norm,
        ClickSet(
            clicks=tf.apply(clicks.clicks),
            instance_group=clicks.instance_group,
            source_instance=clicks.source_instance,
        ),
        index=index,
    )
    targets = build_targets(clicks_norm, instance_ids, class_ids)

    loss, _, analytic, outputs = loss_and_grads(
        model, cloud_norm, clicks_norm, targets, weights, index=index
    )
    margins = _decision_margins(outputs)

    results = []
    for name in sorted(model.params):
        base = model.params[name]

        def f(theta, name=name, base=base):
            model.params[name] = theta.reshape(base.shape)
            try:
                val, _, _, _ = loss_and_grads(
                    model, cloud_norm, clicks_norm, targets, weights, index=index
                )
            finally:
                model.params[name] = base
            return val

        numeric = finite_diff_grad(f, base.ravel(), h=h).reshape(base.shape)
        results.append((name, relative_error(analytic[name], numeric)))
    results.sort(key=lambda t: -t[1])
    passed = all(err <= tolerance for _, err in results)
    return GradCheckReport(groups=results, tolerance=tolerance, passed=passed, margins=margins)


def _decision_margins(outputs) -> dict:
    mask_margin = min(float(np.min(np.abs(o.mask_logits))) for o in outputs)
    class_margin = np.inf
    for o in outputs:
        z = np.sort(o.class_logits, axis=0)
        if z.shape[0] >= 2:
            class_margin = min(class_margin, float(np.min(z[-1] - z[-2])))
    return {"mask_logit_margin": mask_margin, "class_logit_margin": class_margin}
