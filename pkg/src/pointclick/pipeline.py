"""End-to-end single-pass segmentation and its post-processing.

segment() runs one encoder pass and one full decode; finalize() turns the
final stage's logits into mutually exclusive instance labels: a point whose
mask probabilities are all below 0.5 is background, otherwise it goes to the
argmax query, and queries sharing a click group have their masks unioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .decoder import StageOutput, decode_forward
from .encoder import encode_queries, encode_scene_forward
from .geometry import PointCloud, build_index, knn, normalize_cloud
from .model import ModelParams
from .numerics import softmax_rows
from .sampling import ClickSet


@dataclass
class SegmentationResult:
    point_instance: np.ndarray          # (N,) group id or -1 for background
    point_class: np.ndarray             # (N,) class id or -1 for background
    groups: np.ndarray                  # distinct click groups, sorted
    group_class: dict                   # group -> class id (highest-confidence member)
    group_confidence: dict              # group -> max class probability
    stage_outputs: list = field(default_factory=list)   # optional diagnostics

    def instance_mask(self, group: int) -> np.ndarray:
        return self.point_instance == group


def finalize(final_stage: StageOutput, clicks: ClickSet) -> SegmentationResult:
    """Argmax post-processing with the background rule and group union."""
    m = final_stage.mask_logits                     # (N, K)
    z = final_stage.class_logits                    # (N_c, K)
    if m.shape[1] != clicks.n_clicks:
        raise ValueError("stage output does not match click count")
    probs = expit(m)
    background = np.all(probs < 0.5, axis=1)
    winner = np.argmax(m, axis=1)                   # ties -> smaller query index
    groups_per_query = clicks.instance_group

    point_instance = np.where(background, -1, groups_per_query[winner])
    query_class = np.argmax(z, axis=0)              # (K,)
    point_class = np.where(background, -1, query_class[winner])

    class_probs = softmax_rows(z.T)                 # (K, N_c)
    query_conf = class_probs.max(axis=1)            # (K,)
    groups = np.unique(groups_per_query)
    group_class, group_confidence = {}, {}
    for g in groups:
        members = np.flatnonzero(groups_per_query == g)
        best = members[int(np.argmax(query_conf[members]))]
        group_class[int(g)] = int(query_class[best])
        group_confidence[int(g)] = float(query_conf[best])

    return SegmentationResult(
        point_instance=point_instance.astype(np.int64),
        point_class=point_class.astype(np.int64),
        groups=groups,
        group_class=group_class,
        group_confidence=group_confidence,
    )


def snap_clicks(scene: PointCloud, clicks: ClickSet, index=None) -> tuple[ClickSet, np.ndarray]:
    """Snap each click to its nearest scene point; returns (snapped, indices)."""
    if index is None:
        index = build_index(scene)
    idx = np.array([knn(index, c, 1)[0] for c in clicks.clicks], dtype=np.int64)
    snapped = ClickSet(
        clicks=scene.positions[idx],
        instance_group=clicks.instance_group.copy(),
        source_instance=None if clicks.source_instance is None
        else clicks.source_instance.copy(),
    )
    return snapped, idx


def segment(
    scene: PointCloud,
    clicks: ClickSet,
    model: ModelParams,
    keep_stages: bool = False,
) -> SegmentationResult:
    """One forward pass over the scene conditioned on all clicks jointly."""
    if clicks is None or clicks.n_clicks == 0:
        raise ValueError("at least one click required")
    cloud_norm, tf = normalize_cloud(scene)
    index = build_index(cloud_norm)
    snapped_norm = ClickSet(
        clicks=tf.apply(clicks.clicks),
        instance_group=clicks.instance_group,
        source_instance=clicks.source_instance,
    )
    snapped_norm, _ = snap_clicks(cloud_norm, snapped_norm, index=index)

    cfg = model.config
    feats, _ = encode_scene_forward(cloud_norm, model.params, cfg.encoder_config())
    qf = encode_queries(snapped_norm, cloud_norm, feats, k=cfg.k_lookup, index=index)
    outputs, _ = decode_forward(feats, qf, model.params, cfg.decoder_config())
    result = finalize(outputs[-1], snapped_norm)
    if keep_stages:
        result.stage_outputs = outputs
    return result
