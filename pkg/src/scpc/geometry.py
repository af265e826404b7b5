"""Point clouds, sampling, patches, rotations, synthetic shapes and XYZ files."""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "cross")

# number of part labels carried by each segmentation-ready kind
PART_COUNTS = {"cylinder": 3, "cross": 5}

# below this size kNN is a plain distance sort
_KDTREE_MIN_POINTS = 32


class XYZParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError(f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Patch:
    center: int
    members: tuple[int, ...]
    dilation: int = 1

    def __post_init__(self):
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if not self.members or self.members[0] != self.center:
            raise ValueError("patch members must start with the center")
        if len(set(self.members)) != len(self.members):
            raise ValueError("patch members must be distinct")

    @property
    def k(self) -> int:
        return len(self.members) - 1


@dataclass(frozen=True)
class RigidRotation:
    matrix: np.ndarray
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        return (coords - self.pivot) @ self.matrix.T + self.pivot


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n_points: int = 256
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.n_points < 8:
            raise ValueError("n_points must be >= 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# ---------------------------------------------------------------- sampling

def _sq_dists(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    # summed left to right as dx*dx + dy*dy + dz*dz, so exact ties are
    # decided the same way as a plain per-point evaluation would decide them
    d = points - q
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def farthest_point_sample(cloud: PointCloud, m: int, seed: int = 0,
                          start: int | None = None) -> list[int]:
    """Greedy farthest point sampling.

    The first center is ``start`` if given, the point nearest the centroid
    when ``seed == 0``, otherwise a uniformly random index drawn from
    ``seed``.  Ties always go to the lowest index.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} centers from {n} points")
    if start is None:
        if seed == 0:
            start = int(np.argmin(_sq_dists(pts, pts.mean(axis=0))))
        else:
            start = int(np.random.default_rng(seed).integers(n))
    chosen = [start]
    mind = _sq_dists(pts, pts[start])
    mind[start] = -1.0
    for _ in range(m - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, _sq_dists(pts, pts[nxt]))
        mind[chosen] = -1.0
    return chosen


def _ranked(points: np.ndarray, query: int, candidates: np.ndarray, k: int) -> list[int]:
    candidates = candidates[candidates != query]
    d = _sq_dists(points[candidates], points[query])
    order = np.lexsort((candidates, d))
    return [int(i) for i in candidates[order[:k]]]


def knn(cloud: PointCloud, query: int, k: int, tree: cKDTree | None = None) -> list[int]:
    """``k`` nearest neighbours of point ``query``, excluding itself.

    Sorted by distance, ties by index.  Large clouds go through a kd-tree
    whose candidate set is widened to every point at the k-th distance so
    that tie-breaking matches the exhaustive sort exactly.
    """
    pts = cloud.points
    n = len(pts)
    if not 1 <= k <= n - 1:
        raise ValueError(f"k={k} invalid for a cloud of {n} points (need 1 <= k <= N-1)")
    if not 0 <= query < n:
        raise IndexError(f"query index {query} out of range")
    if n < _KDTREE_MIN_POINTS:
        return _ranked(pts, query, np.arange(n), k)
    if tree is None:
        tree = cKDTree(pts)
    dist, _ = tree.query(pts[query], k=k + 1)
    radius = float(dist[-1])
    cand = np.asarray(tree.query_ball_point(pts[query], radius * (1 + 1e-9) + 1e-12), dtype=np.intp)
    return _ranked(pts, query, cand, k)


def build_patch(cloud: PointCloud, center: int, k: int, tree: cKDTree | None = None) -> Patch:
    return Patch(center, (center, *knn(cloud, center, k, tree)), 1)


def dilated_patch(cloud: PointCloud, center: int, k: int, d: int = 2,
                  tree: cKDTree | None = None) -> Patch:
    if d < 1:
        raise ValueError("dilation must be >= 1")
    if k * d > len(cloud) - 1:
        raise ValueError(f"k*d = {k * d} exceeds N-1 = {len(cloud) - 1}")
    neigh = knn(cloud, center, k * d, tree)
    return Patch(center, (center, *neigh[d - 1::d]), d)


def build_patches(cloud: PointCloud, centers: list[int], k: int, d: int = 1) -> list[Patch]:
    tree = cKDTree(cloud.points) if len(cloud) >= _KDTREE_MIN_POINTS else None
    if d == 1:
        return [build_patch(cloud, c, k, tree) for c in centers]
    return [dilated_patch(cloud, c, k, d, tree) for c in centers]


# ---------------------------------------------------------------- rotations

def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis / np.linalg.norm(axis)
    c, s = math.cos(angle), math.sin(angle)
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer([x, y, z], [x, y, z])


def random_rotation(seed, pivot=(0.0, 0.0, 0.0), angle: float | None = None) -> RigidRotation:
    """Uniform axis on the sphere, uniform angle in [0, 2*pi).

    ``angle`` overrides the drawn angle (the axis is still drawn).
    """
    rng = np.random.default_rng(seed)
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.standard_normal(3)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    if angle is not None:
        theta = angle
    return RigidRotation(axis_angle_matrix(axis, theta), np.asarray(pivot, dtype=np.float64))


def apply_rotation(cloud: PointCloud, patch: Patch, rot: RigidRotation) -> np.ndarray:
    return rot.apply(cloud.points[list(patch.members)])


def patch_centroid(cloud: PointCloud, patch: Patch) -> np.ndarray:
    return cloud.points[list(patch.members)].mean(axis=0)


# ---------------------------------------------------------------- synthetic shapes

# Geometry constants of the generated solids before normalization.
CYLINDER_RADIUS = 0.5
CYLINDER_HALF_HEIGHT = 0.8
CROSS_ARM = 1.0        # arm half-length along x and y
CROSS_HALF_WIDTH = 0.25  # arm half-width; also the hub half-width
CROSS_HALF_THICK = 0.15  # half thickness along z
TORUS_R, TORUS_r = 0.7, 0.25


def _sample_sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True), None


def _sample_box_surface(rng, n, half):
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_cube(rng, n):
    return _sample_box_surface(rng, n, (1.0, 1.0, 1.0)), None


def _sample_cylinder(rng, n):
    r, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
    side = 2 * math.pi * r * 2 * h
    cap = math.pi * r * r
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    phi = rng.uniform(0.0, 2 * math.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0.0, 1.0, n)))
    z = np.where(part == 0, rng.uniform(-h, h, n), np.where(part == 1, h, -h))
    pts = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    return pts, part


def cross_part(points: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Hub (0) and the +x, -x, +y, -y arms (1..4) of a cross."""
    w = CROSS_HALF_WIDTH * scale
    x, y = points[:, 0], points[:, 1]
    hub = (np.abs(x) <= w) & (np.abs(y) <= w)
    along_x = np.abs(x) > np.abs(y)
    arm = np.where(along_x, np.where(x > 0, 1, 2), np.where(y > 0, 3, 4))
    return np.where(hub, 0, arm).astype(np.int64)


def _sample_cross(rng, n):
    a, w, t = CROSS_ARM, CROSS_HALF_WIDTH, CROSS_HALF_THICK
    bars = [np.array([a, w, t]), np.array([w, a, t])]
    out = []
    count = 0
    while count < n:
        for i, half in enumerate(bars):
            pts = _sample_box_surface(rng, n, half)
            other = bars[1 - i]
            inside = np.all(np.abs(pts) < other - 1e-12, axis=1)
            pts = pts[~inside]
            out.append(pts)
            count += len(pts)
    pts = np.concatenate(out)
    pts = pts[rng.permutation(len(pts))[:n]]
    return pts, cross_part(pts)


def _sample_torus(rng, n):
    # rejection sampling for uniform area density
    out = []
    count = 0
    while count < n:
        u = rng.uniform(0, 2 * math.pi, n)
        v = rng.uniform(0, 2 * math.pi, n)
        keep = rng.uniform(0, 1, n) < (TORUS_R + TORUS_r * np.cos(v)) / (TORUS_R + TORUS_r)
        u, v = u[keep], v[keep]
        ring = TORUS_R + TORUS_r * np.cos(v)
        out.append(np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_r * np.sin(v)], axis=1))
        count += len(u)
    return np.concatenate(out)[:n], None


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "cross": _sample_cross,
}


def generate_shape(spec: ShapeSpec) -> PointCloud:
    """Sample a named surface, normalize to unit bounding radius, add jitter.

    Every surface is built symmetric about the origin, so normalization is a
    pure scaling by the largest point norm.  Part labels are assigned before
    scaling: cylinder 0 side, 1 top cap (the plane of maximal z), 2 bottom
    cap; cross as in :func:`cross_part`.
    """
    if spec.kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    pts, labels = _SAMPLERS[spec.kind](rng, spec.n_points)
    pts = pts / np.max(np.linalg.norm(pts, axis=1))
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    return PointCloud(pts, labels)


def jitter(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    if sigma == 0:
        return cloud
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points + rng.normal(0.0, sigma, cloud.points.shape), cloud.labels)


def subsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    if n >= len(cloud):
        return cloud
    idx = np.sort(np.random.default_rng(seed).choice(len(cloud), size=n, replace=False))
    labels = None if cloud.labels is None else cloud.labels[idx]
    return PointCloud(cloud.points[idx], labels)


# ---------------------------------------------------------------- XYZ files

def format_float(v: float) -> str:
    return format(float(v), ".17g")


def write_xyz(cloud: PointCloud, path, comments: tuple[str, ...] = ()) -> None:
    """One point per line (x y z [label]); ``comments`` become leading '#' lines."""
    lines = [f"# {c}" for c in comments]
    for i, p in enumerate(cloud.points):
        fields = [format_float(v) for v in p]
        if cloud.labels is not None:
            fields.append(str(int(cloud.labels[i])))
        lines.append(" ".join(fields))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_xyz(path) -> PointCloud:
    pts, labels, linenos = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise XYZParseError(path, lineno, f"expected 3 or 4 fields, got {len(fields)}")
            try:
                xyz = [float(f) for f in fields[:3]]
                label = int(fields[3]) if len(fields) == 4 else None
            except ValueError as exc:
                raise XYZParseError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in xyz):
                raise XYZParseError(path, lineno, "non-finite coordinate")
            pts.append(xyz)
            labels.append(label)
            linenos.append(lineno)
    if not pts:
        raise XYZParseError(path, 0, "no points")
    has = [lab is not None for lab in labels]
    if any(has) and not all(has):
        raise XYZParseError(path, linenos[has.index(not has[0])], "mixed labeled and unlabeled points")
    return PointCloud(np.array(pts), np.array(labels) if has[0] else None)


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
