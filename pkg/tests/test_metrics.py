import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from lrh.metrics import (
    cluster_accuracy,
    geodesic_deg,
    global_align,
    pose_errors,
    project_to_so3,
    split_rotation_error,
    subspace_angles,
)
from lrh.projection import Poses, rotation_matrix


def _rots(rng, n):
    return Rotation.random(n, random_state=int(rng.integers(1 << 30))).as_matrix()


def test_geodesic_distance():
    R = rotation_matrix([0, 0, np.deg2rad(30)])
    assert geodesic_deg(np.eye(3), R) == pytest.approx(30)
    assert geodesic_deg(R, R) == pytest.approx(0, abs=1e-6)


def test_project_to_so3(rng):
    R = _rots(rng, 1)[0]
    A = R + 1e-3 * rng.normal(size=(3, 3))
    Q = project_to_so3(A)
    assert np.allclose(Q @ Q.T, np.eye(3)) and np.linalg.det(Q) == pytest.approx(1)
    assert geodesic_deg(Q, R) < 0.2


def test_global_alignment_removes_common_rotation(rng):
    R_true = _rots(rng, 200)
    g = _rots(rng, 1)[0]
    noise = Rotation.from_rotvec(rng.normal(size=(200, 3)) * np.deg2rad(2)).as_matrix()
    R_est = np.einsum("ij,njk,nkl->nil", g.T, R_true, noise)
    g_hat, err = global_align(R_est, R_true)
    assert geodesic_deg(g_hat, g) < 0.5
    direct = geodesic_deg(np.einsum("nij,njk->nik", R_true, noise), R_true)
    assert err.mean() == pytest.approx(direct.mean(), rel=0.05)


def test_global_alignment_against_grid_search(rng):
    # oracle: brute-force search over rotations near the chordal estimate
    R_true = _rots(rng, 30)
    g = rotation_matrix([0.3, -0.2, 0.5])
    noise = Rotation.from_rotvec(rng.normal(size=(30, 3)) * 0.1).as_matrix()
    R_est = np.einsum("ij,njk,nkl->nil", g.T, R_true, noise)
    g_hat, err = global_align(R_est, R_true, n_refine=50)
    best = err.mean()
    steps = np.deg2rad(np.linspace(-1, 1, 5))
    for a in steps:
        for b in steps:
            for c in steps:
                cand = rotation_matrix([a, b, c]) @ g_hat
                e = geodesic_deg(np.einsum("ij,njk->nik", cand, R_est), R_true).mean()
                assert e >= best - 1e-3


def test_global_alignment_accepts_rotation_vectors(rng):
    th = Rotation.random(5, random_state=1).as_rotvec()
    _, err = global_align(th, th)
    assert np.allclose(err, 0, atol=1e-5)
    with pytest.raises(ValueError):
        global_align(np.zeros((0, 3, 3)), np.zeros((0, 3, 3)))


def test_split_rotation_error():
    R = _rots(np.random.default_rng(0), 1)
    inplane = R @ rotation_matrix([0, 0, np.deg2rad(10)])
    oop, inp = split_rotation_error(inplane, R)
    assert oop[0] == pytest.approx(0, abs=1e-6) and inp[0] == pytest.approx(10)
    tilt = R @ rotation_matrix([np.deg2rad(7), 0, 0])
    oop, inp = split_rotation_error(tilt, R)
    assert oop[0] == pytest.approx(7) and inp[0] == pytest.approx(0, abs=1e-6)


def test_pose_errors_report(rng):
    n = 50
    th = Rotation.random(n, random_state=2).as_rotvec()
    true = Poses(th, rng.normal(size=(n, 2)), rng.normal(1, 0.2, n))
    est = Poses(th, true.offsets + [3.0, 4.0], 2 * true.contrasts)
    e = pose_errors(est, true)
    assert e["rotation_mean_deg"] == pytest.approx(0, abs=1e-4)
    assert e["offset_mean_px"] == pytest.approx(5.0)
    assert e["contrast_corr"] == pytest.approx(1.0)
    assert e["contrast_err_std"] == pytest.approx(0, abs=1e-12)
    flat = Poses(th, true.offsets, np.ones(n))
    assert np.isnan(pose_errors(flat, true)["contrast_corr"])


def test_subspace_angles(rng):
    V = rng.normal(size=(2, 60))
    assert np.allclose(subspace_angles(V, V), 0, atol=1e-5)
    mix = np.array([[1.0, 2.0], [-1.0, 0.5]]) @ V
    assert np.allclose(subspace_angles(mix, V), 0, atol=1e-5)
    e = np.eye(3)
    tilted = np.array([np.cos(np.deg2rad(20)) * e[0] + np.sin(np.deg2rad(20)) * e[2], e[1]])
    assert np.allclose(subspace_angles(tilted, e[:2]), [0, 20])
    assert subspace_angles(np.zeros((0, 3)), e).size == 0


def _three_clusters(rng, n=300, spread=0.3):
    labels = rng.integers(3, size=n)
    centers = np.array([[0, 0], [4, 0], [0, 4]])
    return centers[labels] + spread * rng.normal(size=(n, 2)), labels


def test_cluster_accuracy_separated(rng):
    z, labels = _three_clusters(rng)
    assert cluster_accuracy(z, labels) == 1.0
    # label names do not matter
    assert cluster_accuracy(z, (labels + 1) % 3 + 10) == 1.0


def test_cluster_accuracy_is_permutation_invariant(rng):
    z, labels = _three_clusters(rng, spread=1.5)
    perm = rng.permutation(len(z))
    assert cluster_accuracy(z[perm], labels[perm]) == cluster_accuracy(z, labels)


def test_cluster_accuracy_edge_cases(rng):
    assert cluster_accuracy(rng.normal(size=5), np.zeros(5)) == 1.0
    with pytest.raises(ValueError):
        cluster_accuracy(rng.normal(size=(2, 1)), [0, 1], k=3)
