"""Instance-segmentation metrics and the simulated-user click protocol.

Instances correspond to predictions through the clicks that generated them
(the interactive setting fixes identity, so there is no bipartite matching).
mAP follows detection practice: confidence-ranked greedy matching at an IoU
threshold, all-point interpolated area under the precision-recall curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from .pipeline import SegmentationResult
from .sampling import ClickSet, fps


@dataclass
class EvalProtocol:
    click_schedule: tuple = (1, 3, 5, 7, 10)
    noc_targets: tuple = (0.80, 0.85, 0.90)
    max_clicks: int = 20
    map_thresholds: tuple = (0.25, 0.5)
    seed: int = 0

    def __post_init__(self):
        if list(self.click_schedule) != sorted(set(self.click_schedule)):
            raise ValueError("click schedule must be strictly increasing")
        if self.max_clicks < max(self.click_schedule):
            raise ValueError("max_clicks must cover the schedule")


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; two empty masks count as perfect overlap."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError("mask length mismatch")
    union = np.count_nonzero(pred_mask | gt_mask)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(pred_mask & gt_mask) / union)


def class_averaged(values_by_class: dict) -> float:
    """Mean over classes of the mean value within each class."""
    if not values_by_class:
        return 0.0
    return float(np.mean([np.mean(v) for v in values_by_class.values()]))


def miou_at(
    result: SegmentationResult,
    gt_instance_ids: np.ndarray,
    gt_class_ids: np.ndarray,
    instance_to_group: dict,
) -> dict:
    """Click-anchored instance IoUs of one result.

    Returns {"miou": class-averaged IoU, "macc": class-averaged recall,
    "per_instance": {instance: iou}}.
    """
    gt_instance_ids = np.asarray(gt_instance_ids)
    ious_by_class, accs_by_class, per_instance = {}, {}, {}
    for inst, group in instance_to_group.items():
        gt_mask = gt_instance_ids == inst
        pred_mask = result.point_instance == group
        v = iou(pred_mask, gt_mask)
        per_instance[inst] = v
        cls = int(gt_class_ids[inst])
        ious_by_class.setdefault(cls, []).append(v)
        denom = max(int(np.count_nonzero(gt_mask)), 1)
        accs_by_class.setdefault(cls, []).append(
            float(np.count_nonzero(pred_mask & gt_mask) / denom)
        )
    return {
        "miou": class_averaged(ious_by_class),
        "macc": class_averaged(accs_by_class),
        "per_instance": per_instance,
    }


# ---------------------------------------------------------------------------
# mean average precision

def average_precision(matches: list, n_gt: int) -> float:
    """All-point interpolated AP from an ordered TP/FP sequence."""
    if n_gt == 0 or not matches:
        return 0.0
    tp = np.cumsum([1 if m else 0 for m in matches], dtype=np.float64)
    fp = np.cumsum([0 if m else 1 for m in matches], dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def map_at(predictions: list, gt_instance_ids: np.ndarray, gt_class_ids: np.ndarray,
           threshold: float) -> float:
    """predictions: (mask, class_id, confidence) triples for one scene.

    Greedy confidence-ranked matching per class against unmatched ground
    truth at the IoU threshold; mAP averages AP over classes present in gt.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    gt_instance_ids = np.asarray(gt_instance_ids)
    gt_by_class: dict = {}
    for inst in np.unique(gt_instance_ids[gt_instance_ids >= 0]):
        cls = int(gt_class_ids[inst])
        gt_by_class.setdefault(cls, []).append(gt_instance_ids == inst)
    aps = []
    for cls, gt_masks in sorted(gt_by_class.items()):
        preds = [(conf, i, mask) for i, (mask, c, conf) in enumerate(predictions) if c == cls]
        preds.sort(key=lambda t: (-t[0], t[1]))
        matched = [False] * len(gt_masks)
        outcomes = []
        for conf, _, mask in preds:
            best_iou, best_j = 0.0, -1
            for j, gt_mask in enumerate(gt_masks):
                if matched[j]:
                    continue
                v = iou(mask, gt_mask)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= threshold:
                matched[best_j] = True
                outcomes.append(True)
            else:
                outcomes.append(False)
        aps.append(average_precision(outcomes, len(gt_masks)))
    return float(np.mean(aps)) if aps else 0.0


def result_predictions(result: SegmentationResult) -> list:
    """(mask, class, confidence) triples, one per click group."""
    return [
        (result.point_instance == g, result.group_class[int(g)],
         result.group_confidence[int(g)])
        for g in result.groups
    ]


# ---------------------------------------------------------------------------
# simulated corrective clicks

def next_corrective_click(
    result: SegmentationResult,
    gt_instance_ids: np.ndarray,
    positions: np.ndarray,
    instance_to_group: dict,
):
    """Place one corrective click in the largest error region.

    The ground-truth instance with the most mislabeled points is selected;
    within it, the erroneous point farthest from the nearest correctly
    labeled point of that instance wins (ties -> smaller index). Returns
    (point_index, instance, group) or None when the prediction is perfect.
    """
    gt_instance_ids = np.asarray(gt_instance_ids)
    expected = np.array(
        [instance_to_group.get(int(i), -1) for i in gt_instance_ids], dtype=np.int64
    )
    wrong = expected != result.point_instance
    if not np.any(wrong):
        return None
    candidates = wrong & (gt_instance_ids >= 0)
    if not np.any(candidates):
        return None   # only background false positives remain; nothing clickable
    insts, counts = np.unique(gt_instance_ids[candidates], return_counts=True)
    inst = int(insts[np.argmax(counts)])   # ties -> smaller instance id (first max)
    err_idx = np.flatnonzero(candidates & (gt_instance_ids == inst))
    correct_same = np.flatnonzero(~wrong & (gt_instance_ids == inst))
    ref = correct_same if correct_same.size else np.flatnonzero(~wrong)
    if ref.size:
        d2 = np.min(
            np.sum((positions[err_idx][:, None, :] - positions[ref][None, :, :]) ** 2, axis=2),
            axis=1,
        )
        pick = err_idx[int(np.argmax(d2))]
    else:
        pick = int(err_idx[0])   # nothing is labeled correctly anywhere
    group = instance_to_group.get(inst)
    if group is None:
        group = max(instance_to_group.values(), default=-1) + 1
    return int(pick), inst, int(group)


def initial_clicks(
    scene: PointCloud, gt_instance_ids: np.ndarray, n_per_instance: int, seed: int
) -> tuple[ClickSet, dict]:
    """FPS-chosen clicks per instance; returns (clicks, instance->group map).

    FPS prefixes are nested, so schedules reuse earlier clicks plus new ones.
    """
    gt_instance_ids = np.asarray(gt_instance_ids)
    instances = np.unique(gt_instance_ids[gt_instance_ids >= 0])
    clicks, groups, sources = [], [], []
    instance_to_group = {}
    for gi, inst in enumerate(instances):
        members = np.flatnonzero(gt_instance_ids == inst)
        n = min(n_per_instance, members.size)
        sel = members[fps(scene.positions[members], n, seed=seed + 7919 * gi)]
        clicks.append(scene.positions[sel])
        groups.append(np.full(n, gi, dtype=np.int64))
        sources.append(np.full(n, inst, dtype=np.int64))
        instance_to_group[int(inst)] = gi
    return (
        ClickSet(
            clicks=np.concatenate(clicks),
            instance_group=np.concatenate(groups),
            source_instance=np.concatenate(sources),
        ),
        instance_to_group,
    )


def noc(
    segment_fn,
    scene: PointCloud,
    gt_instance_ids: np.ndarray,
    gt_class_ids: np.ndarray,
    target_iou: float,
    cap: int = 20,
    seed: int = 0,
) -> int:
    """Number of clicks to reach the target scene mIoU, capped.

    Starts from one click per instance and adds one corrective click per
    round; all clicks (initial + corrective) count toward the total.
    """
    if not (0.0 < target_iou < 1.0):
        raise ValueError("target_iou must lie in (0, 1)")
    clicks, instance_to_group = initial_clicks(scene, gt_instance_ids, 1, seed)
    while True:
        result = segment_fn(scene, clicks)
        score = miou_at(result, gt_instance_ids, gt_class_ids, instance_to_group)["miou"]
        if score >= target_iou or clicks.n_clicks >= cap:
            return min(clicks.n_clicks, cap)
        nxt = next_corrective_click(
            result, gt_instance_ids, scene.positions, instance_to_group
        )
        if nxt is None:
            return clicks.n_clicks
        pick, inst, group = nxt
        instance_to_group[inst] = group
        clicks = ClickSet(
            clicks=np.concatenate([clicks.clicks, scene.positions[pick][None, :]]),
            instance_group=np.concatenate([clicks.instance_group, [group]]),
            source_instance=None
            if clicks.source_instance is None
            else np.concatenate([clicks.source_instance, [inst]]),
        )


# ---------------------------------------------------------------------------
# scene / dataset evaluation

@dataclass
class MetricsReport:
    per_scene: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)

    def to_text(self) -> str:
        lines = ["metric            value", "-" * 26]
        for key, val in sorted(self.aggregate.items()):
            lines.append(f"{key:<18}{val:.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "per_scene": self.per_scene,
            "protocol": {
                "click_schedule": list(self.protocol.click_schedule),
                "noc_targets": list(self.protocol.noc_targets),
                "max_clicks": self.protocol.max_clicks,
            },
        }

    def plot_series(self) -> list:
        """(N, aggregate mIoU@N) pairs for external plotting."""
        return [
            (n, self.aggregate[f"miou@{n}"])
            for n in self.protocol.click_schedule
            if f"miou@{n}" in self.aggregate
        ]


def evaluate_scene(
    segment_fn,
    scene: PointCloud,
    gt_instance_ids: np.ndarray,
    gt_class_ids: np.ndarray,
    protocol: EvalProtocol,
    with_noc: bool = True,
) -> dict:
    out: dict = {"scene": scene.id}
    for n in protocol.click_schedule:
        clicks, inst_to_group = initial_clicks(scene, gt_instance_ids, n, protocol.seed)
        result = segment_fn(scene, clicks)
        scored = miou_at(result, gt_instance_ids, gt_class_ids, inst_to_group)
        out[f"miou@{n}"] = scored["miou"]
        if n == protocol.click_schedule[0]:
            out["macc"] = scored["macc"]
            preds = result_predictions(result)
            for t in protocol.map_thresholds:
                out[f"map@{t}"] = map_at(preds, gt_instance_ids, gt_class_ids, t)
    if with_noc:
        for q in protocol.noc_targets:
            out[f"noc@{int(q * 100)}"] = noc(
                segment_fn, scene, gt_instance_ids, gt_class_ids, q,
                cap=protocol.max_clicks, seed=protocol.seed,
            )
    return out


def evaluate_dataset(
    segment_fn, scenes: list, protocol: EvalProtocol, with_noc: bool = True
) -> MetricsReport:
    report = MetricsReport(protocol=protocol)
    for cloud, instance_ids, class_ids in scenes:
        report.per_scene.append(
            evaluate_scene(segment_fn, cloud, instance_ids, class_ids, protocol, with_noc)
        )
    keys = [k for k in report.per_scene[0] if k != "scene"]
    for k in keys:
        report.aggregate[k] = float(np.mean([s[k] for s in report.per_scene]))
    return report
