"""Simulated user clicks: FPS and ablation sampling strategies.

Clicks are always snapped to actual scene points, so the downstream query
lookup is an exact feature-row fetch. All sampling is a pure function of
(inputs, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, voxel_downsample


@dataclass
class ClickSet:
    """User or simulated clicks, one instance-group tag per click.

    Clicks sharing a group id are treated as prompts for the same object and
    their predicted masks get unioned at post-processing.
    """

    clicks: np.ndarray                  # (K, 3) coordinates, scene frame
    instance_group: np.ndarray          # (K,) int group ids
    source_instance: np.ndarray | None = None   # (K,) gt instance ids (training)

    def __post_init__(self):
        self.clicks = np.asarray(self.clicks, dtype=np.float64).reshape(-1, 3)
        self.instance_group = np.asarray(self.instance_group, dtype=np.int64).reshape(-1)
        if self.clicks.shape[0] < 1:
            raise ValueError("a ClickSet must contain at least one click")
        if self.instance_group.shape[0] != self.clicks.shape[0]:
            raise ValueError("instance_group must align with clicks")
        if self.source_instance is not None:
            self.source_instance = np.asarray(self.source_instance, dtype=np.int64).reshape(-1)
            if self.source_instance.shape[0] != self.clicks.shape[0]:
                raise ValueError("source_instance must align with clicks")

    @property
    def n_clicks(self) -> int:
        return self.clicks.shape[0]

    def groups(self) -> np.ndarray:
        return np.unique(self.instance_group)


@dataclass
class AugmentationConfig:
    rotation_max: float = 2.0 * np.pi    # uniform rotation about gravity (z) axis
    jitter_std: float = 0.005            # in normalized units


@dataclass
class SamplerConfig:
    strategy: str = "fps"                # fps | random | voxel
    per_instance_min: int = 1
    per_instance_max: int = 15
    clicks_per_scene_min: int = 30
    clicks_per_scene_max: int = 50
    one_click_prob: float = 0.3          # fraction of steps trained one-click-per-instance
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    voxel_click_size: float = 0.1        # normalized units, voxel strategy only

    def __post_init__(self):
        if not (1 <= self.per_instance_min <= self.per_instance_max):
            raise ValueError("need 1 <= per_instance_min <= per_instance_max")
        if self.strategy not in ("fps", "random", "voxel"):
            raise ValueError(f"unknown strategy {self.strategy!r}")


def fps(positions: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Greedy farthest point sampling.

    The first index is drawn uniformly from the seed; each following pick
    maximizes distance to the selected set (ties -> smaller index). Selection
    is incremental, so fps(pos, k) is a prefix of fps(pos, k+1).
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if not (1 <= k <= n):
        raise ValueError(f"k must satisfy 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((pos - pos[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d2))   # argmax returns the first max: smaller index wins ties
        chosen[i] = nxt
        d2 = np.minimum(d2, np.sum((pos - pos[nxt]) ** 2, axis=1))
    return chosen


def _augment_for_distance(pos: np.ndarray, aug: AugmentationConfig, rng) -> np.ndarray:
    """Rotate about z and jitter; used only inside FPS distance computations."""
    theta = rng.uniform(0.0, aug.rotation_max)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    out = pos @ rot.T
    if aug.jitter_std > 0:
        extent = max(float(np.ptp(pos, axis=0).max()), 1e-12)
        out = out + rng.normal(0.0, aug.jitter_std * extent, size=pos.shape)
    return out


def _voxel_candidates(pos: np.ndarray, voxel_size: float) -> np.ndarray:
    """One candidate per occupied voxel: the member point nearest its centroid."""
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    extent = max(float((hi - lo).max()), 1e-12)
    norm = (pos - (lo + hi) / 2.0) / extent
    coarse, parent_map = voxel_downsample(PointCloud(positions=norm), voxel_size)
    picks = []
    for ci, members in enumerate(parent_map):
        d2 = np.sum((norm[members] - coarse.positions[ci]) ** 2, axis=1)
        picks.append(members[int(np.argmin(d2))])
    return np.asarray(picks, dtype=np.int64)


def sample_click_candidates(
    scene: PointCloud, instance_ids: np.ndarray, cfg: SamplerConfig
) -> ClickSet:
    """Per-instance click candidate pools.

    Each instance contributes between per_instance_min and per_instance_max
    candidates (all its points when smaller), drawn by cfg.strategy. For FPS
    the rotation/jitter augmentation perturbs coordinates only inside the
    distance computation; emitted clicks are exact scene points.
    """
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    labels = np.unique(instance_ids[instance_ids >= 0])
    if labels.size == 0:
        raise ValueError("scene has no labeled instances")
    rng = np.random.default_rng(cfg.seed)
    clicks, groups, sources = [], [], []
    for gi, inst in enumerate(labels):
        member_idx = np.flatnonzero(instance_ids == inst)
        pos = scene.positions[member_idx]
        n_avail = member_idx.size
        want = int(rng.integers(cfg.per_instance_min, cfg.per_instance_max + 1))
        count = min(want, n_avail)
        if cfg.strategy == "fps":
            aug_pos = _augment_for_distance(pos, cfg.augmentation, rng)
            local = fps(aug_pos, count, seed=int(rng.integers(2**63 - 1)))
        elif cfg.strategy == "random":
            local = rng.choice(n_avail, size=count, replace=False)
        else:  # voxel
            local = _voxel_candidates(pos, cfg.voxel_click_size)
            if local.size > cfg.per_instance_max:
                keep = rng.choice(local.size, size=cfg.per_instance_max, replace=False)
                local = local[np.sort(keep)]
        sel = member_idx[np.asarray(local, dtype=np.int64)]
        clicks.append(scene.positions[sel])
        groups.append(np.full(sel.size, gi, dtype=np.int64))
        sources.append(np.full(sel.size, inst, dtype=np.int64))
    return ClickSet(
        clicks=np.concatenate(clicks),
        instance_group=np.concatenate(groups),
        source_instance=np.concatenate(sources),
    )


def subset_clicks(candidates: ClickSet, n_per_instance, seed: int) -> ClickSet:
    """Retain min(n, available) clicks per instance group.

    n_per_instance is an int or "random" (per-group count uniform in
    [1, available]). Group tags and source instances are preserved.
    """
    rng = np.random.default_rng(seed)
    keep = []
    for g in candidates.groups():
        members = np.flatnonzero(candidates.instance_group == g)
        avail = members.size
        if n_per_instance == "random":
            n = int(rng.integers(1, avail + 1))
        else:
            n = min(int(n_per_instance), avail)
        if n >= avail:
            keep.append(members)
        else:
            keep.append(np.sort(rng.choice(members, size=n, replace=False)))
    keep = np.concatenate(keep)
    return ClickSet(
        clicks=candidates.clicks[keep],
        instance_group=candidates.instance_group[keep],
        source_instance=None
        if candidates.source_instance is None
        else candidates.source_instance[keep],
    )


def training_subset(candidates: ClickSet, cfg: SamplerConfig, seed: int) -> ClickSet:
    """Draw a per-step click subset.

    Most steps target a scene total in the configured 30-50 range (clamped
    by per-instance availability), distributed over instances as a random
    composition so individual counts vary; a one_click_prob fraction of
    steps trains the one-click-per-instance regime directly.
    """
    rng = np.random.default_rng(seed)
    groups = candidates.groups()
    if rng.uniform() < cfg.one_click_prob:
        return subset_clicks(candidates, 1, seed=int(rng.integers(2**63 - 1)))
    caps = np.array([
        min(int(np.count_nonzero(candidates.instance_group == g)), cfg.per_instance_max)
        for g in groups
    ])
    target = int(rng.integers(cfg.clicks_per_scene_min, cfg.clicks_per_scene_max + 1))
    target = int(np.clip(target, groups.size, caps.sum()))
    counts = np.ones(groups.size, dtype=np.int64)
    room = caps - 1
    for _ in range(target - groups.size):
        eligible = np.flatnonzero(room > 0)
        if eligible.size == 0:
            break
        g = int(rng.choice(eligible))
        counts[g] += 1
        room[g] -= 1
    keep = []
    for g, n in zip(groups, counts):
        members = np.flatnonzero(candidates.instance_group == g)
        if n >= members.size:
            keep.append(members)
        else:
            keep.append(np.sort(rng.choice(members, size=int(n), replace=False)))
    keep = np.concatenate(keep)
    return ClickSet(
        clicks=candidates.clicks[keep],
        instance_group=candidates.instance_group[keep],
        source_instance=None
        if candidates.source_instance is None
        else candidates.source_instance[keep],
    )
