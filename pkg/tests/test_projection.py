import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_volume
from lrh.fourier import center, fft_centered, forward_fft_3d, ifft_centered
from lrh.projection import (
    NEAREST,
    TRILINEAR,
    BatchProjector,
    CtfParams,
    InterpolationScheme,
    Pose,
    Poses,
    backproject,
    ctf_filter,
    offset_gradient_hessian,
    oversample,
    oversample_adjoint,
    project,
    project_jacobian_theta,
    rewrap,
    rotation_derivatives,
    rotation_matrix,
)


# ------------------------------------------------------------------ rotations


def test_rodrigues_matches_scipy(rng):
    for theta in rng.normal(size=(20, 3)):
        theta = rewrap(theta)
        assert np.allclose(rotation_matrix(theta), Rotation.from_rotvec(theta).as_matrix(), atol=1e-12)
    assert np.allclose(rotation_matrix(np.zeros(3)), np.eye(3))
    assert np.allclose(rotation_matrix([1e-8, 0, 0]), Rotation.from_rotvec([1e-8, 0, 0]).as_matrix())


def test_rodrigues_quarter_turn():
    R = rotation_matrix([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0])


@pytest.mark.parametrize("scale", [1e-9, 1e-3, 1.0, 3.0])
def test_rotation_derivatives_match_finite_differences(rng, scale):
    theta = rng.normal(size=3)
    theta = scale * theta / np.linalg.norm(theta)
    d = rotation_derivatives(theta)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (rotation_matrix(theta + e) - rotation_matrix(theta - e)) / (2 * h)
        assert np.allclose(d[k], fd, atol=1e-8)


def test_rewrap_preserves_rotation_and_bounds_norm(rng):
    thetas = rng.normal(size=(50, 3)) * 4
    w = rewrap(thetas)
    assert np.all(np.linalg.norm(w, axis=1) <= np.pi + 1e-12)
    assert np.allclose(rotation_matrix(w), rotation_matrix(thetas), atol=1e-10)
    small = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(rewrap(small), small)


def test_pose_rejects_unwrapped_rotation():
    with pytest.raises(ValueError):
        Pose(theta=[4.0, 0, 0])
    with pytest.raises(ValueError):
        Poses(np.zeros((2, 3)), np.zeros((3, 2)), np.ones(2))


def test_poses_indexing_and_copy():
    p = Poses.identity(4)
    q = p.copy()
    q.offsets[0] = 1
    assert p.offsets[0, 0] == 0
    assert len(p[1:3]) == 2


# ------------------------------------------------------------------ Fourier slice


@pytest.mark.parametrize("scheme", [TRILINEAR, NEAREST])
@pytest.mark.parametrize("N", [6, 7])
def test_identity_pose_slice_equals_real_space_projection(rng, scheme, N):
    x = rng.normal(size=(N, N, N))
    X = forward_fft_3d(x)
    img = project(X, Pose(), scheme=scheme)
    # sum along z then 2-D unitary transform; the slice carries an extra 1/sqrt(N)
    ref = fft_centered(x.sum(axis=2) + 0j) / np.sqrt(N)
    assert np.allclose(img, ref, atol=1e-12)


def test_quarter_turn_samples_a_permuted_slice(rng):
    N = 7
    X = random_volume(rng, N)
    img = project(X, Pose(theta=[np.pi / 2, 0, 0]), scheme=NEAREST)
    f = np.arange(N) - center(N)
    # R e_y = e_z: image axis b walks the volume's third axis
    assert np.allclose(img, X[:, center(N), :])
    assert np.allclose(project(X, Pose(theta=[np.pi / 2, 0, 0])), X[:, center(N), :], atol=1e-10)
    assert len(f) == N


def test_oversampling_preserves_grid_samples(rng):
    X = random_volume(rng, 6, k=2)
    Y = oversample(X, 2)
    assert Y.shape == (2, 12, 12, 12)
    assert np.allclose(Y[:, ::2, ::2, ::2], X)
    Z = random_volume(rng, 12, k=2)
    assert np.isclose(np.vdot(Y, Z), np.vdot(X, oversample_adjoint(Z, 2)))
    assert np.allclose(oversample(X, 1), X)


@pytest.mark.parametrize("scheme", [TRILINEAR, NEAREST, InterpolationScheme("trilinear", 1)])
def test_batch_adjoint(rng, scheme):
    N, B, K = 6, 5, 2
    thetas = rewrap(rng.normal(size=(B, 3)))
    ctf = ctf_filter([CtfParams(defocus=d, identity_flag=False) for d in rng.uniform(1e4, 2e4, B)], N, 3.0)
    op = BatchProjector(N, thetas, rng.uniform(-2, 2, (B, 2)), rng.uniform(0.5, 1.5, B), ctf, scheme)
    X = random_volume(rng, N, k=K)
    Y = rng.normal(size=(B, N * N, K)) + 1j * rng.normal(size=(B, N * N, K))
    lhs = np.vdot(Y, op.forward(X))
    rhs = np.vdot(op.adjoint(Y), X)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_single_image_backproject_is_adjoint(rng):
    N = 6
    pose = Pose(theta=[0.3, -0.2, 1.0], offset=[0.5, -1.0], contrast=0.8)
    X = random_volume(rng, N)
    y = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
    assert np.isclose(np.vdot(y, project(X, pose)), np.vdot(backproject(y, pose), X))


def test_integer_offset_is_circular_shift(rng):
    N = 8
    X = random_volume(rng, N, hermitian=True)
    base = project(X, Pose(theta=[0.2, 0.4, -0.1]))
    shifted = project(X, Pose(theta=[0.2, 0.4, -0.1], offset=[2.0, -1.0]))
    real0 = ifft_centered(base)
    real1 = ifft_centered(shifted)
    assert np.allclose(real1, np.roll(real0, (2, -1), axis=(0, 1)))


def test_contrast_and_ctf_multiply_the_image(rng):
    N = 6
    X = random_volume(rng, N)
    ctf = CtfParams(defocus=12000.0, identity_flag=False)
    base = project(X, Pose())
    img = project(X, Pose(contrast=1.7), ctf=ctf, voxel_size=2.0)
    assert np.allclose(img, 1.7 * ctf_filter(ctf, N, 2.0)[0] * base)


def test_ctf_filter_values():
    N = 8
    assert ctf_filter([CtfParams.identity()] * 3, N) is None
    c = ctf_filter(CtfParams(amplitude_contrast=0.1, identity_flag=False), N)[0]
    # at zero frequency only the amplitude-contrast term survives
    assert np.isclose(c[center(N), center(N)], -0.1)
    assert np.all(np.abs(c) <= 1 + 1e-12)
    assert np.allclose(c, c.T)


def test_scheme_validation():
    assert InterpolationScheme("nearest").oversampling == 1
    assert InterpolationScheme("trilinear").oversampling == 2
    with pytest.raises(ValueError):
        InterpolationScheme("sinc")
    with pytest.raises(ValueError):
        InterpolationScheme("trilinear", 0)
    with pytest.raises(ValueError):
        project(np.zeros((4, 4, 5)), Pose())


# ------------------------------------------------------------------ derivatives


def test_theta_jacobian_matches_finite_differences(rng):
    N = 8
    X = random_volume(rng, N, hermitian=True)
    theta = np.array([0.37, -0.81, 1.13])
    pose = Pose(theta=theta, offset=[0.3, -0.4], contrast=1.2)
    jac = project_jacobian_theta(X, pose)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (project(X, Pose(theta + e, pose.offset, 1.2)) - project(X, Pose(theta - e, pose.offset, 1.2))) / (2 * h)
        assert np.allclose(jac[k], fd, atol=1e-5 * np.abs(fd).max())
    with pytest.raises(ValueError):
        project_jacobian_theta(X, pose, scheme=NEAREST)


def test_offset_derivatives_match_finite_differences(rng):
    N = 6
    P = N * N
    y = rng.normal(size=P) + 1j * rng.normal(size=P)
    m = rng.normal(size=P) + 1j * rng.normal(size=P)
    A = rng.normal(size=(P, P)) + 1j * rng.normal(size=(P, P))
    Q = A @ A.conj().T / P + np.eye(P)

    def apply_Q(r):
        return r @ Q.T

    t = np.array([0.4, -0.7])
    v, g, H = offset_gradient_hessian(y, m, apply_Q, t)
    f = lambda s: offset_gradient_hessian(y, m, apply_Q, s)[0]  # noqa: E731
    h = 1e-5
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        assert np.isclose(g[d], (f(t + e) - f(t - e)) / (2 * h), rtol=1e-6)
        gd = (offset_gradient_hessian(y, m, apply_Q, t + e)[1] - offset_gradient_hessian(y, m, apply_Q, t - e)[1]) / (2 * h)
        assert np.allclose(H[d], gd, rtol=1e-5)
    r = np.exp(2j * np.pi * (t @ BatchProjector(N, np.zeros((1, 3))).plane.T) / N) * y - m
    assert np.isclose(v, np.real(np.vdot(r, Q @ r)))
