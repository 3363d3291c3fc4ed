"""Text document formats for scenes, click sets, and segmentation results.

All documents are JSON. A scene file carries `points` plus optional `colors`
(rgb in [0,1]), per-point `instance_ids` (-1 = background), and per-instance
`class_ids`. Click sets use a `clicks` array of {x, y, z, group} objects;
results carry `point_instance`, `point_class`, and `groups` arrays. ASCII
PLY files with x,y,z(,red,green,blue) vertices convert losslessly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .pipeline import SegmentationResult
from .sampling import ClickSet


def scene_to_dict(cloud: PointCloud, instance_ids=None, class_ids=None) -> dict:
    doc = {"id": cloud.id, "points": cloud.positions.tolist()}
    if cloud.attributes is not None:
        doc["colors"] = cloud.attributes.tolist()
    if instance_ids is not None:
        doc["instance_ids"] = np.asarray(instance_ids, dtype=np.int64).tolist()
    if class_ids is not None:
        doc["class_ids"] = np.asarray(class_ids, dtype=np.int64).tolist()
    return doc


def scene_from_dict(doc: dict):
    if "points" not in doc:
        raise ValueError("scene document lacks 'points'")
    points = np.asarray(doc["points"], dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError("'points' must be an array of [x, y, z]")
    colors = None
    if doc.get("colors") is not None:
        colors = np.asarray(doc["colors"], dtype=np.float64)
        if colors.shape != points.shape:
            raise ValueError("'colors' must align with points")
    cloud = PointCloud(positions=points, attributes=colors, id=str(doc.get("id", "")))
    instance_ids = None
    if doc.get("instance_ids") is not None:
        instance_ids = np.asarray(doc["instance_ids"], dtype=np.int64)
        if instance_ids.shape[0] != points.shape[0]:
            raise ValueError("'instance_ids' must align with points")
    class_ids = None
    if doc.get("class_ids") is not None:
        class_ids = np.asarray(doc["class_ids"], dtype=np.int64)
    return cloud, instance_ids, class_ids


def save_scene(path, cloud: PointCloud, instance_ids=None, class_ids=None) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(cloud, instance_ids, class_ids)))


def load_scene(path):
    return scene_from_dict(json.loads(Path(path).read_text()))


def clicks_to_dict(clicks: ClickSet) -> dict:
    return {
        "clicks": [
            {"x": float(c[0]), "y": float(c[1]), "z": float(c[2]), "group": int(g)}
            for c, g in zip(clicks.clicks, clicks.instance_group)
        ]
    }


def clicks_from_dict(doc: dict) -> ClickSet:
    rows = doc.get("clicks")
    if not rows:
        raise ValueError("click document lacks a non-empty 'clicks' array")
    coords = np.array([[r["x"], r["y"], r["z"]] for r in rows], dtype=np.float64)
    groups = np.array([int(r["group"]) for r in rows], dtype=np.int64)
    return ClickSet(clicks=coords, instance_group=groups)


def save_clicks(path, clicks: ClickSet) -> None:
    Path(path).write_text(json.dumps(clicks_to_dict(clicks)))


def load_clicks(path) -> ClickSet:
    return clicks_from_dict(json.loads(Path(path).read_text()))


def result_to_dict(result: SegmentationResult) -> dict:
    return {
        "point_instance": result.point_instance.tolist(),
        "point_class": result.point_class.tolist(),
        "groups": [
            {
                "group": int(g),
                "class": result.group_class[int(g)],
                "confidence": result.group_confidence[int(g)],
            }
            for g in result.groups
        ],
    }


def save_result(path, result: SegmentationResult) -> None:
    Path(path).write_text(json.dumps(result_to_dict(result)))


# ---------------------------------------------------------------------------
# ASCII PLY ingestion

def load_ply(path) -> PointCloud:
    """Read an ASCII PLY with vertex properties x,y,z and optional r/g/b."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n_vertices = 0
    props = []
    in_vertex = False
    body_at = None
    fmt_ascii = False
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt_ascii = tok[1] == "ascii"
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertices = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None or not fmt_ascii:
        raise ValueError("unsupported PLY (need ascii format with end_header)")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise ValueError(f"PLY vertex element lacks property {axis!r}")
    rows = np.array(
        [[float(v) for v in lines[body_at + j].split()] for j in range(n_vertices)]
    )
    cols = {name: rows[:, i] for i, name in enumerate(props)}
    positions = np.column_stack([cols["x"], cols["y"], cols["z"]])
    attributes = None
    if all(c in cols for c in ("red", "green", "blue")):
        attributes = np.column_stack([cols["red"], cols["green"], cols["blue"]]) / 255.0
    return PointCloud(positions=positions, attributes=attributes, id=Path(path).stem)
