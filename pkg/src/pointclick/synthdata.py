"""Procedural synthetic scenes with per-instance ground truth.

Scenes are collections of primitive surfaces (sphere, box, cylinder, cone,
torus, clutter blobs) scattered over an optional floor/wall shell. Surface
sampling is area-uniform per primitive; everything is a pure function of the
spec seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

CLASS_PALETTE = ["sphere", "box", "cylinder", "cone", "torus", "floor", "wall", "clutter"]
CLASS_ID = {name: i for i, name in enumerate(CLASS_PALETTE)}

# classes that can appear as clickable instances (floor/wall are background shell)
INSTANCE_CLASSES = ["sphere", "box", "cylinder", "cone", "torus", "clutter"]


@dataclass
class SceneSpec:
    n_instances_min: int = 4
    n_instances_max: int = 7
    points_per_instance_min: int = 150
    points_per_instance_max: int = 300
    instance_classes: list = field(default_factory=lambda: list(INSTANCE_CLASSES[:5]))
    include_floor: bool = True
    include_wall: bool = False
    floor_points: int = 400
    wall_points: int = 250
    noise_std: float = 0.003        # normalized units, scaled by scene extent
    bounds: tuple = (4.0, 4.0, 2.4)  # meters
    radius_min: float = 0.25
    radius_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_instances_min < 1 or self.n_instances_min > self.n_instances_max:
            raise ValueError("invalid instance count range")
        if self.points_per_instance_min < 1 or (
            self.points_per_instance_min > self.points_per_instance_max
        ):
            raise ValueError("invalid points-per-instance range")
        unknown = [c for c in self.instance_classes if c not in CLASS_ID]
        if unknown:
            raise ValueError(f"classes not in palette: {unknown}")


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_sphere(rng, n, r):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r


def _sample_box(rng, n, half):
    # pick faces weighted by area, then uniform within each face
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    signs = np.where(face % 2 == 0, 1.0, -1.0)
    axis = face // 2
    for a in range(3):
        m = axis == a
        o1, o2 = [i for i in range(3) if i != a]
        pts[m, a] = signs[m] * half[a]
        pts[m, o1] = u[m] * half[o1]
        pts[m, o2] = v[m] * half[o2]
    return pts


def _sample_cylinder(rng, n, r, h):
    lateral = 2.0 * np.pi * r * h
    caps = 2.0 * np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    pts = np.empty((n, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    m = on_side
    pts[m, 0] = r * np.cos(theta[m])
    pts[m, 1] = r * np.sin(theta[m])
    pts[m, 2] = rng.uniform(-h / 2.0, h / 2.0, size=m.sum())
    m = ~on_side
    rr = r * np.sqrt(rng.uniform(size=m.sum()))
    pts[m, 0] = rr * np.cos(theta[m])
    pts[m, 1] = rr * np.sin(theta[m])
    pts[m, 2] = np.where(rng.uniform(size=m.sum()) < 0.5, h / 2.0, -h / 2.0)
    return pts


def _sample_cone(rng, n, r, h):
    # apex up at z=h, base disk at z=0
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    m = on_side
    t = np.sqrt(rng.uniform(size=m.sum()))   # area density grows with base distance
    pts[m, 0] = t * r * np.cos(theta[m])
    pts[m, 1] = t * r * np.sin(theta[m])
    pts[m, 2] = h * (1.0 - t)
    m = ~on_side
    rr = r * np.sqrt(rng.uniform(size=m.sum()))
    pts[m, 0] = rr * np.cos(theta[m])
    pts[m, 1] = rr * np.sin(theta[m])
    pts[m, 2] = 0.0
    return pts - np.array([0.0, 0.0, h / 2.0])


def _sample_torus(rng, n, R, r):
    # rejection on the tube angle keeps area-uniformity: dA ∝ R + r cos(phi)
    pts = np.empty((n, 3))
    filled = 0
    while filled < n:
        m = (n - filled) * 2 + 8
        theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=m)
        accept = rng.uniform(size=m) < (R + r * np.cos(phi)) / (R + r)
        theta, phi = theta[accept], phi[accept]
        take = min(theta.size, n - filled)
        rad = R + r * np.cos(phi[:take])
        pts[filled : filled + take, 0] = rad * np.cos(theta[:take])
        pts[filled : filled + take, 1] = rad * np.sin(theta[:take])
        pts[filled : filled + take, 2] = r * np.sin(phi[:take])
        filled += take
    return pts


def _sample_clutter(rng, n, r):
    # squashed ellipsoid blob
    axes = r * rng.uniform(0.4, 1.0, size=3)
    return _sample_sphere(rng, n, 1.0) * axes


def _sample_primitive(rng, name, n, char_radius):
    if name == "sphere":
        return _sample_sphere(rng, n, char_radius)
    if name == "box":
        half = char_radius * rng.uniform(0.5, 1.0, size=3)
        return _sample_box(rng, n, half) @ _rot_z(rng.uniform(0, 2 * np.pi)).T
    if name == "cylinder":
        r = char_radius * rng.uniform(0.4, 0.8)
        h = char_radius * rng.uniform(1.2, 2.0)
        return _sample_cylinder(rng, n, r, h)
    if name == "cone":
        r = char_radius * rng.uniform(0.5, 0.9)
        h = char_radius * rng.uniform(1.2, 2.0)
        return _sample_cone(rng, n, r, h)
    if name == "torus":
        R = char_radius * rng.uniform(0.6, 0.9)
        r = R * rng.uniform(0.25, 0.45)
        return _sample_torus(rng, n, R, r)
    if name == "clutter":
        return _sample_clutter(rng, n, char_radius)
    raise ValueError(f"{name!r} is not an instance class")


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, np.ndarray, np.ndarray]:
    """Build one scene.

    Returns (cloud, instance_ids, class_ids): instance_ids is per point
    (-1 = background), class_ids is per instance (class_ids[i] is instance
    i's palette id).
    """
    rng = np.random.default_rng(spec.seed)
    bx, by, bz = spec.bounds
    n_inst = int(rng.integers(spec.n_instances_min, spec.n_instances_max + 1))

    centers, radii = [], []
    attempts = 0
    while len(centers) < n_inst:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError(
                f"could not place {n_inst} instances after 1000 attempts"
            )
        r = rng.uniform(spec.radius_min, spec.radius_max)
        c = np.array([
            rng.uniform(r, bx - r),
            rng.uniform(r, by - r),
            r,
        ])
        ok = all(
            np.linalg.norm(c[:2] - pc[:2]) >= 0.9 * (r + pr)
            for pc, pr in zip(centers, radii)
        )
        if ok:
            centers.append(c)
            radii.append(r)

    chunks, inst_ids, class_ids = [], [], []
    for i in range(n_inst):
        name = spec.instance_classes[int(rng.integers(len(spec.instance_classes)))]
        n_pts = int(
            rng.integers(spec.points_per_instance_min, spec.points_per_instance_max + 1)
        )
        pts = _sample_primitive(rng, name, n_pts, radii[i]) + centers[i]
        chunks.append(pts)
        inst_ids.append(np.full(n_pts, i, dtype=np.int64))
        class_ids.append(CLASS_ID[name])

    if spec.include_floor:
        fp = np.column_stack([
            rng.uniform(0.0, bx, size=spec.floor_points),
            rng.uniform(0.0, by, size=spec.floor_points),
            np.zeros(spec.floor_points),
        ])
        chunks.append(fp)
        inst_ids.append(np.full(spec.floor_points, -1, dtype=np.int64))
    if spec.include_wall:
        wp = np.column_stack([
            rng.uniform(0.0, bx, size=spec.wall_points),
            np.zeros(spec.wall_points),
            rng.uniform(0.0, bz, size=spec.wall_points),
        ])
        chunks.append(wp)
        inst_ids.append(np.full(spec.wall_points, -1, dtype=np.int64))

    positions = np.concatenate(chunks)
    if spec.noise_std > 0:
        extent = float(max(spec.bounds))
        positions = positions + rng.normal(0.0, spec.noise_std * extent, positions.shape)
    cloud = PointCloud(positions=positions, id=f"synth-{spec.seed}")
    return cloud, np.concatenate(inst_ids), np.asarray(class_ids, dtype=np.int64)


def generate_dataset(base_spec: SceneSpec, count: int, seed0: int = 0):
    """A list of (cloud, instance_ids, class_ids) with consecutive seeds."""
    out = []
    for i in range(count):
        spec = SceneSpec(**{**base_spec.__dict__, "seed": seed0 + i})
        out.append(generate_scene(spec))
    return out
