import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scpc.geometry import (PointCloud, Patch, ShapeSpec, XYZParseError, apply_rotation, build_patch,
                           dilated_patch, farthest_point_sample, generate_shape, jitter, knn,
                           random_rotation, read_xyz, subsample, write_xyz, cross_part)


def cloud_of(points):
    return PointCloud(np.asarray(points, dtype=float))


def sq_dist(a, b):
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2


def brute_knn(points, q, k):
    order = sorted((sq_dist(points[j], points[q]), j) for j in range(len(points)) if j != q)
    return [j for _, j in order[:k]]


def brute_fps(points, m, start):
    chosen = [start]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for j in range(len(points)):
            if j in chosen:
                continue
            dmin = min(sq_dist(points[j], points[c]) for c in chosen)
            if dmin > best_d:
                best, best_d = j, dmin
        chosen.append(best)
    return chosen


# ---------------------------------------------------------------- FPS

def test_fps_full_permutation():
    cloud = cloud_of(np.random.default_rng(0).normal(size=(20, 3)))
    assert sorted(farthest_point_sample(cloud, 20)) == list(range(20))


def test_fps_square():
    sq = cloud_of([(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)])
    assert farthest_point_sample(sq, 2, start=0) == [0, 3]


def test_fps_square_with_center_tie_break():
    pts = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (0.5, 0.5, 0)]
    cloud = cloud_of(pts)
    got = farthest_point_sample(cloud, 3, start=0)
    assert got == [0, 3, 1]
    # oracle over all candidate sequences: lexicographically smallest greedy max-min sequence
    arr = np.array(pts, dtype=float)
    assert got == brute_fps(arr, 3, 0)


def test_fps_matches_brute_force_many():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(2, 65))
        pts = rng.normal(size=(n, 3))
        m = int(rng.integers(1, n + 1))
        seed = int(rng.integers(0, 5))
        got = farthest_point_sample(cloud_of(pts), m, seed)
        assert got == brute_fps(pts, m, got[0])
        assert len(set(got)) == m


def test_fps_seed_zero_starts_near_centroid():
    pts = np.random.default_rng(2).normal(size=(30, 3))
    start = farthest_point_sample(cloud_of(pts), 1, 0)[0]
    assert start == int(np.argmin(((pts - pts.mean(0)) ** 2).sum(1)))


def test_fps_rejects_bad_m():
    with pytest.raises(ValueError):
        farthest_point_sample(cloud_of(np.zeros((3, 3)) + np.arange(3)[:, None]), 4)


# ---------------------------------------------------------------- kNN and patches

def test_knn_exhaustion_and_colinear():
    pts = np.array([[x, 0, 0] for x in range(4)], dtype=float)
    assert knn(cloud_of(pts), 0, 2) == [1, 2]
    assert knn(cloud_of(pts), 0, 3) == [1, 2, 3]


def test_knn_matches_brute_force_random():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 65))
        pts = rng.uniform(size=(n, 3))
        if rng.random() < 0.3:       # force duplicate points and distance ties
            pts[rng.integers(n, size=n // 3)] = pts[0]
        q = int(rng.integers(n))
        k = int(rng.integers(1, n))
        assert knn(cloud_of(pts), q, k) == brute_knn(pts, q, k)


def test_knn_large_cloud_uses_tree_and_matches():
    rng = np.random.default_rng(4)
    pts = np.round(rng.uniform(size=(300, 3)), 2)   # rounding creates exact ties
    for q in range(0, 300, 17):
        assert knn(cloud_of(pts), q, 20) == brute_knn(pts, q, 20)


def test_build_patch_cases():
    two = cloud_of([(0, 0, 0), (1, 0, 0)])
    assert build_patch(two, 0, 1).members == (0, 1)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(128, 3))
    p = build_patch(cloud_of(pts), 7, 20)
    assert p.members[0] == 7 and list(p.members[1:]) == brute_knn(pts, 7, 20)
    small = rng.normal(size=(9, 3))
    assert sorted(build_patch(cloud_of(small), 2, 8).members) == list(range(9))


def test_dilated_patch():
    line = cloud_of([(x, 0, 0) for x in range(7)])
    assert dilated_patch(line, 0, 3, 2).members == (0, 2, 4, 6)
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(64, 3))
    cloud = cloud_of(pts)
    assert dilated_patch(cloud, 5, 10, 1).members == build_patch(cloud, 5, 10).members
    for _ in range(50):
        c = int(rng.integers(64))
        full = brute_knn(pts, c, 20)
        ranks = [full[r - 1] for r in range(2, 21, 2)]
        assert list(dilated_patch(cloud, c, 10, 2).members[1:]) == ranks


def test_patch_validation():
    with pytest.raises(ValueError):
        Patch(0, (1, 2))
    with pytest.raises(ValueError):
        Patch(0, (0, 1, 1))


# ---------------------------------------------------------------- rotations

def test_rotation_identity_and_determinism():
    r = random_rotation(3, angle=0.0)
    assert np.allclose(r.matrix, np.eye(3), atol=1e-15)
    a, b = random_rotation(42), random_rotation(42)
    assert np.array_equal(a.matrix, b.matrix)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32))
def test_rotation_orthonormal(seed):
    m = random_rotation(seed).matrix
    assert np.allclose(m.T @ m, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(m) - 1.0) < 1e-12


def test_apply_rotation_cases():
    cloud = cloud_of([(0, 0, 0), (2, 0, 0), (5, 5, 5)])
    patch = Patch(0, (0, 1))
    pivot = cloud.points[[0, 1]].mean(0)
    half_turn = random_rotation(0, pivot, np.pi)
    # force the axis to z for the symmetric case
    from scpc.geometry import RigidRotation, axis_angle_matrix
    rz = RigidRotation(axis_angle_matrix(np.array([0, 0, 1.0]), np.pi), pivot)
    out = apply_rotation(cloud, patch, rz)
    assert np.allclose(out, cloud.points[[1, 0]], atol=1e-12)
    assert np.allclose(out.mean(0), pivot)
    ident = RigidRotation(np.eye(3), pivot)
    assert np.array_equal(apply_rotation(cloud, patch, ident), cloud.points[[0, 1]])
    pts = np.random.default_rng(7).normal(size=(12, 3))
    c2 = cloud_of(pts)
    p2 = Patch(0, tuple(range(12)))
    out = apply_rotation(c2, p2, half_turn)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=2)
    assert np.max(np.abs(d0 - d1)) < 1e-9


# ---------------------------------------------------------------- shapes

def test_sphere_radius():
    c = generate_shape(ShapeSpec("sphere", 200, 0.0, 3))
    assert np.allclose(np.linalg.norm(c.points, axis=1), 1.0, atol=1e-9)


def test_cylinder_labels_follow_height():
    c = generate_shape(ShapeSpec("cylinder", 400, 0.0, 1))
    z = c.points[:, 2]
    top, bottom = z.max(), z.min()
    assert np.all(np.abs(z[c.labels == 1] - top) < 1e-9)
    assert np.all(np.abs(z[c.labels == 2] - bottom) < 1e-9)
    side = c.labels == 0
    r = np.linalg.norm(c.points[side, :2], axis=1)
    assert np.allclose(r, r.max(), atol=1e-9)
    assert set(np.unique(c.labels)) == {0, 1, 2}


def test_cross_labels_consistent():
    c = generate_shape(ShapeSpec("cross", 500, 0.0, 2))
    assert set(np.unique(c.labels)) == set(range(5))
    scale = 1.0 / np.max(np.abs(c.points[:, :2]))
    assert np.array_equal(cross_part(c.points * scale), c.labels)


@pytest.mark.parametrize("kind", ["sphere", "cube", "cylinder", "torus", "cross"])
def test_shapes_deterministic_and_normalised(kind):
    a = generate_shape(ShapeSpec(kind, 128, 0.0, 9))
    b = generate_shape(ShapeSpec(kind, 128, 0.0, 9))
    assert np.array_equal(a.points, b.points)
    assert a.points.shape == (128, 3)
    assert abs(np.linalg.norm(a.points, axis=1).max() - 1.0) < 1e-12


def test_shape_spec_validation():
    with pytest.raises(ValueError):
        ShapeSpec("pyramid")
    with pytest.raises(ValueError):
        ShapeSpec("sphere", 0)
    with pytest.raises(ValueError):
        ShapeSpec("sphere", 10, -0.1)


def test_jitter_and_subsample_identity():
    c = generate_shape(ShapeSpec("cube", 64, 0.0, 0))
    assert jitter(c, 0.0, 1) is c
    assert subsample(c, 64, 1) is c
    s = subsample(c, 20, 1)
    assert len(s.points) == 20
    assert len(np.unique(s.points, axis=0)) == 20


# ---------------------------------------------------------------- XYZ

def test_xyz_round_trip(tmp_path):
    c = generate_shape(ShapeSpec("cross", 50, 0.01, 4))
    write_xyz(c, tmp_path / "a.xyz", ("hello",))
    back = read_xyz(tmp_path / "a.xyz")
    assert np.array_equal(back.points, c.points)
    assert np.array_equal(back.labels, c.labels)
    unlabeled = PointCloud(c.points)
    write_xyz(unlabeled, tmp_path / "b.xyz")
    assert read_xyz(tmp_path / "b.xyz").labels is None


def test_xyz_lines(tmp_path):
    (tmp_path / "o.xyz").write_text("0 0 0\n")
    c = read_xyz(tmp_path / "o.xyz")
    assert c.points.tolist() == [[0.0, 0.0, 0.0]] and c.labels is None
    (tmp_path / "l.xyz").write_text("# comment\n1 2 3 7\n")
    c = read_xyz(tmp_path / "l.xyz")
    assert c.points.tolist() == [[1.0, 2.0, 3.0]] and c.labels.tolist() == [7]


@pytest.mark.parametrize("text", ["1 2\n", "1 2 x\n", "1 2 3 4 5\n", "1 2 3 1\n4 5 6\n", "nan 0 0\n"])
def test_xyz_errors_name_line(tmp_path, text):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(XYZParseError) as info:
        read_xyz(p)
    assert "bad.xyz" in str(info.value)
