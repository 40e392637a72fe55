import numpy as np
import pytest

from conftest import random_volume
from lrh.fourier import center, inverse_fft_3d, radius_grid
from lrh.metrics import pose_errors, subspace_angles
from lrh.objectives import LowRankModel
from lrh.optimizer import (
    AdamState,
    ConfigError,
    DivergenceError,
    OptimConfig,
    adam_step,
    cutoff_schedule,
    fit,
    init_components,
    orthogonalize,
    refine_offsets,
    refine_rotations_step,
    refresh_contrast,
    refresh_mean,
)
from lrh.projection import NEAREST, Poses
from lrh.simulator import ParticleStack, default_phantom, perturb_poses, simulate_stack, synthesize_volumes


# ------------------------------------------------------------------ Adam


def _adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop over parameters, textbook Adam."""
    p = np.array(p, dtype=float)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        for k in range(p.size):
            m.flat[k] = b1 * m.flat[k] + (1 - b1) * g.flat[k]
            v.flat[k] = b2 * v.flat[k] + (1 - b2) * g.flat[k] ** 2
            mh = m.flat[k] / (1 - b1**t)
            vh = v.flat[k] / (1 - b2**t)
            p.flat[k] -= lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adam_matches_reference(rng):
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    p, state = p0, None
    for g in grads:
        p, state = adam_step(p, g, state, 0.1)
    assert np.allclose(p, _adam_reference(p0, grads, 0.1))
    assert state.t == 5


def test_adam_complex_treats_parts_independently(rng):
    p0 = rng.normal(size=4) + 1j * rng.normal(size=4)
    grads = [rng.normal(size=4) + 1j * rng.normal(size=4) for _ in range(3)]
    p, state = p0.copy(), None
    for g in grads:
        p, state = adam_step(p, g, state, 0.05)
    ref_re = _adam_reference(p0.real, [g.real for g in grads], 0.05)
    ref_im = _adam_reference(p0.imag, [g.imag for g in grads], 0.05)
    assert np.allclose(p, ref_re + 1j * ref_im)
    assert np.array_equal(p0, p0.copy())


def test_adam_first_step_has_size_lr(rng):
    p, _ = adam_step(np.zeros(3), np.array([1e-3, -5.0, 2.0]), None, 0.1)
    assert np.allclose(np.abs(p), 0.1, rtol=1e-4)
    with pytest.raises(ValueError):
        adam_step(np.zeros(3), np.zeros(2), None, 0.1)
    s = AdamState.zeros_like(np.zeros(2, complex))
    assert s.m.shape == (4,)


# ------------------------------------------------------------------ schedules, init


def test_cutoff_schedule():
    got = [cutoff_schedule(e, np.pi / 4, 40) for e in (0, 39, 40, 80, 120, 500)]
    assert got == pytest.approx([np.pi / 4, np.pi / 4, np.pi / 2, np.pi, np.pi, np.pi])


def test_init_components(rng):
    V = init_components(8, 3, np.pi / 2, rng, scale=2.0)
    assert np.allclose(np.linalg.norm(V.reshape(3, -1), axis=1), 2.0)
    assert np.all(V[:, radius_grid(8) > 2] == 0)
    for v in V:
        assert np.allclose(inverse_fft_3d(v, real=False).imag, 0, atol=1e-12)


@pytest.mark.parametrize("real_space", [False, True])
def test_orthogonalize_preserves_covariance(rng, real_space):
    V = init_components(6, 3, np.pi, rng) * np.array([3.0, 1.0, 0.5])[:, None, None, None]
    U, s = orthogonalize(V, real_space=real_space)
    Uf = U.reshape(3, -1)
    assert np.allclose(Uf.conj() @ Uf.T, np.eye(3), atol=1e-10)
    Vf = V.reshape(3, -1)
    assert np.allclose(Vf.T @ Vf.conj(), Uf.T @ np.diag(s**2) @ Uf.conj(), atol=1e-10)
    assert np.all(np.diff(s) <= 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(objective="l1").validate()
    with pytest.raises(ConfigError):
        OptimConfig(objective="ls", pose_opt=True).validate()
    with pytest.raises(ConfigError):
        OptimConfig(pose_opt=True, scheme=NEAREST).validate()
    with pytest.raises(ConfigError):
        OptimConfig(initial_cutoff=1.0).validate()
    for bad in (dict(rank=0), dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0), dict(march_period=0)):
        with pytest.raises(ConfigError):
            OptimConfig(**bad).validate()
    assert OptimConfig(initial_cutoff=np.pi).validate()


# ------------------------------------------------------------------ mean


def test_single_identity_image_fills_the_central_plane(rng):
    N = 6
    img = rng.normal(size=(1, N, N)) + 1j * rng.normal(size=(1, N, N))
    stack = ParticleStack(img, [None], 1.0, Poses.identity(1))
    stack.ctfs = [__import__("lrh").CtfParams.identity()]
    mu = refresh_mean(stack, scheme=NEAREST)
    assert np.allclose(mu[:, :, center(N)], img[0])
    mask = np.ones(N, bool)
    mask[center(N)] = False
    assert np.all(mu[:, :, mask] == 0)
    with pytest.raises(ValueError):
        refresh_mean(stack, idx=[])


def test_noiseless_mean_is_recovered_by_cg():
    gt = synthesize_volumes(default_phantom(0), 8)
    stack, _ = simulate_stack(gt, 400, sigma=0.0, seed=2)
    stack.sigma2 = 1.0
    diag_only = refresh_mean(stack)
    refined = refresh_mean(stack, cg_iters=20)
    err = lambda m: np.linalg.norm(m - gt.mean) / np.linalg.norm(gt.mean)  # noqa: E731
    assert err(refined) < 0.01
    assert err(refined) < err(diag_only)


def test_mean_prior_shrinks(rng):
    gt = synthesize_volumes(default_phantom(0), 6)
    stack, _ = simulate_stack(gt, 50, snr=1.0, seed=1)
    a = refresh_mean(stack)
    b = refresh_mean(stack, prior_ratio=np.full(6, 10.0))
    assert np.linalg.norm(b) < np.linalg.norm(a)


# ------------------------------------------------------------------ poses


@pytest.fixture(scope="module")
def noiseless():
    gt = synthesize_volumes(default_phantom(1), 10)
    stack, truth = simulate_stack(gt, 40, sigma=0.0, seed=7, latent_std=0.0)
    stack.sigma2 = 1e-2
    return gt, stack, truth


def test_offsets_newton_is_monotone_and_recovers(noiseless):
    gt, stack, truth = noiseless
    start = perturb_poses(truth.poses, 0.0, 1.5, seed=1)
    model = LowRankModel(gt.mean, gt.components)
    new, trace = refine_offsets(stack, np.arange(stack.n), model, start, return_trace=True)
    assert trace.shape == (stack.n, 11)
    assert np.all(np.diff(trace, axis=1) <= 0)
    err0 = np.abs(start.offsets - truth.poses.offsets).mean()
    err1 = np.abs(new.offsets - truth.poses.offsets).mean()
    assert err1 < 0.05 * err0
    assert np.array_equal(new.thetas, start.thetas)


def test_offsets_wrap_to_principal_cell(noiseless):
    # a whole-box shift is invisible on the integer frequency grid
    gt, stack, truth = noiseless
    N = stack.N
    start = truth.poses.copy()
    start.offsets = start.offsets + N
    model = LowRankModel(gt.mean, gt.components)
    new, trace = refine_offsets(stack, np.arange(stack.n), model, start, n_iter=0, return_trace=True)
    assert np.all((new.offsets >= -N / 2) & (new.offsets < N / 2))
    assert np.allclose(new.offsets, truth.poses.offsets)
    _, ref = refine_offsets(stack, np.arange(stack.n), model, truth.poses, n_iter=0, return_trace=True)
    assert np.allclose(trace, ref, rtol=1e-10, atol=1e-10)


def test_rotation_steps_reduce_error(noiseless):
    gt, stack, truth = noiseless
    start = perturb_poses(truth.poses, 3.0, 0.0, seed=4)
    model = LowRankModel(gt.mean, gt.components)
    poses, state = start, None
    for _ in range(30):
        poses, state = refine_rotations_step(stack, np.arange(stack.n), model, poses, 2e-3, state)
    e0 = pose_errors(start, truth.poses)["rotation_mean_deg"]
    e1 = pose_errors(poses, truth.poses)["rotation_mean_deg"]
    assert e1 < 0.5 * e0
    with pytest.raises(ValueError):
        refine_rotations_step(stack, [0], model, poses, 1e-3, cfg=OptimConfig(scheme=NEAREST))


def test_contrast_refresh_recovers_scale(noiseless):
    gt, stack, truth = noiseless
    scaled = ParticleStack(stack.images * 1.3, stack.ctfs, stack.sigma2, stack.poses)
    model = LowRankModel(gt.mean, gt.components)
    # the latents absorb part of the mismatch, so repeated refreshes converge to the scale
    new = truth.poses
    for _ in range(6):
        new = refresh_contrast(scaled, np.arange(5), model, new)
    assert np.allclose(new.contrasts[:5], 1.3, rtol=1e-4)
    assert np.all(new.contrasts[5:] == 1.0)
    # the true contrast is a fixed point
    again = refresh_contrast(scaled, np.arange(5), model, new)
    assert np.allclose(again.contrasts, new.contrasts, rtol=1e-4)


# ------------------------------------------------------------------ fit


@pytest.fixture(scope="module")
def small_stack():
    gt = synthesize_volumes(default_phantom(1), 8)
    stack, truth = simulate_stack(gt, 200, snr=4.0, seed=3, latent_std=4.0)
    return gt, stack, truth


@pytest.mark.parametrize("objective", ["ls", "ml"])
def test_fit_decreases_objective_and_finds_subspace(small_stack, objective):
    gt, stack, truth = small_stack
    cfg = OptimConfig(
        objective=objective, rank=1, epochs=24, batch_size=64, march_period=8, learning_rate=0.05, regularize=False
    )
    res = fit(stack, cfg, mean=gt.mean)
    # epoch means are mini-batch estimates, so compare averages over a few epochs
    assert np.mean(res.objective_trace[-4:]) < np.mean(res.objective_trace[:4])
    assert len(res.cutoffs) == 24 and res.cutoffs[-1] == pytest.approx(np.pi)
    assert subspace_angles(res.model.components, gt.components)[-1] < 30
    assert res.latents.shape == (200, 1)
    # latents are coordinates w.r.t. components scaled by the singular values
    assert abs(np.corrcoef(res.latents[:, 0], truth.latents[:, 0])[0, 1]) > 0.8


def test_fit_is_deterministic(small_stack):
    _, stack, _ = small_stack
    cfg = OptimConfig(rank=1, epochs=3, batch_size=64, march_period=2)
    a = fit(stack, cfg)
    b = fit(stack, cfg)
    assert np.array_equal(a.model.components, b.model.components)
    assert a.objective_trace == b.objective_trace


def test_fit_callback_and_initial_components(small_stack):
    gt, stack, _ = small_stack
    seen = []
    cfg = OptimConfig(rank=1, epochs=2, batch_size=100, regularize=False)
    fit(stack, cfg, components=gt.components, callback=lambda e, m, p: seen.append(e))
    assert seen == [0, 1]
    with pytest.raises(ConfigError):
        fit(stack, cfg, components=gt.components[:, :4])


def test_fit_errors(small_stack):
    _, stack, _ = small_stack
    bad = ParticleStack(stack.images.copy(), stack.ctfs, stack.sigma2, stack.poses)
    bad.images[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        fit(bad, OptimConfig(rank=1, epochs=1, regularize=False), mean=np.zeros((8, 8, 8), complex))
    zero = ParticleStack(stack.images, stack.ctfs, 0.0, stack.poses)
    with pytest.raises(ConfigError):
        fit(zero, OptimConfig(rank=1, epochs=1))
    with pytest.raises(ConfigError):
        fit(stack, OptimConfig(objective="ls", pose_opt=True))


def test_fit_with_pose_refinement_records_errors(small_stack):
    _, stack, truth = small_stack
    start = perturb_poses(truth.poses, 3.0, 1.0, seed=0, contrast=1.0)
    s = ParticleStack(stack.images, stack.ctfs, stack.sigma2, start)
    cfg = OptimConfig(rank=1, epochs=5, batch_size=100, pose_opt=True, march_period=5)
    res = fit(s, cfg, truth_poses=truth.poses)
    assert len(res.pose_error_trace) == 5
    assert "rotation_mean_deg" in res.pose_error_trace[0]
    assert not np.array_equal(res.poses.offsets, start.offsets)
