"""Pose, subspace and clustering metrics."""

from __future__ import annotations

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment
from scipy.spatial.transform import Rotation

from .projection import rotation_matrix


def project_to_so3(A: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def geodesic_deg(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Angle of ``A^T B`` in degrees; broadcasts over leading axes."""
    tr = np.einsum("...ij,...ij->...", A, B)
    return np.degrees(np.arccos(np.clip((tr - 1) / 2, -1.0, 1.0)))


def _as_matrices(R):
    R = np.asarray(R, dtype=np.float64)
    return rotation_matrix(R) if R.ndim == 2 else R


def global_align(R_est, R_true, n_refine: int = 10):
    """Rotation ``g`` minimising the mean geodesic distance ``d(g R_est_i, R_true_i)``.

    Starts from the chordal mean of ``R_true_i R_est_i^T`` and takes
    ``n_refine`` Weiszfeld steps of the geodesic median.  Accepts rotation
    matrices (n, 3, 3) or rotation vectors (n, 3).  Returns ``(g, errors_deg)``.
    """
    R_est = _as_matrices(R_est)
    R_true = _as_matrices(R_true)
    if len(R_est) < 1:
        raise ValueError("need at least one pose")
    g = project_to_so3(np.einsum("nij,nkj->ik", R_true, R_est))
    for _ in range(n_refine):
        aligned = np.einsum("ij,njk->nik", g, R_est)
        resid = np.einsum("nij,nkj->nik", R_true, aligned)  # R_true (g R_est)^T
        omega = Rotation.from_matrix(resid).as_rotvec()
        w = 1.0 / np.maximum(np.linalg.norm(omega, axis=1), 1e-9)
        step = (w[:, None] * omega).sum(0) / w.sum()
        if np.linalg.norm(step) < 1e-12:
            break
        g = rotation_matrix(step) @ g
    errors = geodesic_deg(np.einsum("ij,njk->nik", g, R_est), R_true)
    return g, errors


def split_rotation_error(R_est, R_true):
    """Out-of-plane (viewing-direction tilt) and in-plane errors in degrees.

    The viewing direction of a pose is the third column of its rotation
    (the slice normal).  The in-plane error is the residual rotation about
    that axis once the viewing directions are matched.
    """
    R_est = _as_matrices(R_est)
    R_true = _as_matrices(R_true)
    a = R_est[:, :, 2]
    b = R_true[:, :, 2]
    cosang = np.clip(np.sum(a * b, axis=1), -1, 1)
    out_of_plane = np.degrees(np.arccos(cosang))
    in_plane = np.empty(len(R_est))
    for i in range(len(R_est)):
        axis = np.cross(a[i], b[i])
        s = np.linalg.norm(axis)
        Q = np.eye(3) if s < 1e-12 else rotation_matrix(axis / s * np.arctan2(s, cosang[i]))
        res = R_true[i].T @ Q @ R_est[i]
        in_plane[i] = abs(np.degrees(np.arctan2(res[1, 0], res[0, 0])))
    return out_of_plane, in_plane


def pose_errors(poses_est, poses_true):
    """Rotation (after global alignment), split rotation, offset and contrast metrics."""
    g, rot = global_align(poses_est.rotations(), poses_true.rotations())
    R_al = np.einsum("ij,njk->nik", g, poses_est.rotations())
    oop, inp = split_rotation_error(R_al, poses_true.rotations())
    off = np.linalg.norm(poses_est.offsets - poses_true.offsets, axis=1)
    a, b = poses_est.contrasts, poses_true.contrasts
    corr = float(np.corrcoef(a, b)[0, 1]) if np.std(a) > 0 and np.std(b) > 0 else float("nan")
    return {
        "rotation_mean_deg": float(rot.mean()),
        "rotation_median_deg": float(np.median(rot)),
        "out_of_plane_mean_deg": float(oop.mean()),
        "in_plane_mean_deg": float(inp.mean()),
        "offset_mean_px": float(off.mean()),
        "contrast_corr": corr,
        "contrast_err_std": float(np.std(a / np.mean(a) - b / np.mean(b))),
    }


def subspace_angles(V_hat, V_ref) -> np.ndarray:
    """Principal angles in degrees, nondecreasing, between the spans of two vector sets."""
    if len(V_hat) == 0 or len(V_ref) == 0:
        return np.zeros(0)
    A = np.asarray(V_hat).reshape(len(V_hat), -1).T
    B = np.asarray(V_ref).reshape(len(V_ref), -1).T
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(np.conj(Qb).T @ Qa, compute_uv=False)
    return np.sort(np.degrees(np.arccos(np.clip(s, 0.0, 1.0))))


def cluster_accuracy(z, labels, k: int | None = None, seed: int = 0, restarts: int = 10) -> float:
    """k-means on ``z`` followed by the best matching of clusters to labels."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    labels = np.asarray(labels)
    classes, lab = np.unique(labels, return_inverse=True)
    k = len(classes) if k is None else k
    if k > len(z):
        raise ValueError("more clusters than points")
    if k == 1:
        return 1.0
    # canonical row order so the result does not depend on how points are listed
    order = np.lexsort(z.T[::-1])
    z, lab = z[order], lab[order]
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        cent, assign = kmeans2(z, k, minit="++", seed=rng)
        inertia = np.sum((z - cent[assign]) ** 2)
        if inertia < best_inertia:
            best, best_inertia = assign, inertia
    conf = np.zeros((k, max(k, len(classes))))
    np.add.at(conf, (best, lab), 1)
    rows, cols = linear_sum_assignment(-conf)
    return float(conf[rows, cols].sum() / len(z))
