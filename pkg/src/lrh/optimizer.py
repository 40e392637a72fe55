"""Mini-batch estimation of the mean-plus-low-rank model with pose refinement."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .fourier import build_shells, center, fft_centered, fsc, ifft_centered, lowpass_mask
from .metrics import pose_errors
from .objectives import (
    LowRankModel,
    contrast_estimate,
    latent_coordinates,
    ls_image_terms,
    ls_regularizer,
    ml_image_terms,
    ml_prior,
)
from .projection import (
    TRILINEAR,
    BatchProjector,
    NEAREST,
    InterpolationScheme,
    Poses,
    offset_terms,
    oversample,
    oversample_adjoint,
    rewrap,
)
from .regularization import (
    EPS_FSC,
    build_regularizer,
    fsc_ratio,
    nearest_diag_weights,
    shell_projector_weights,
)

log = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "ConfigError",
    "DivergenceError",
    "FitResult",
    "OptimConfig",
    "adam_step",
    "cutoff_schedule",
    "fit",
    "init_components",
    "orthogonalize",
    "refine_offsets",
    "refine_rotations_step",
    "refresh_contrast",
    "refresh_mean",
]


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    objective: str = "ml"
    rank: int = 2
    epochs: int = 120
    batch_size: int = 1024
    # step size relative to the RMS entry of the initial components
    learning_rate: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    initial_cutoff: float = np.pi / 4
    march_period: int = 40
    mean_refresh_period: int = 5
    offset_refresh_period: int = 5
    newton_iters: int = 10
    pose_opt: bool = False
    pose_lr: float = 2e-3
    pose_lr_decay: float = 0.5
    pose_start_epoch: int = 0
    regularize: bool = True
    reg_rank: int = 5
    ml_prior_form: str = "count"
    reg_refresh_period: int | None = 10
    seed: int = 0
    scheme: InterpolationScheme = TRILINEAR
    mean_cg_iters: int = 10
    chunk: int = 256
    use_numba: bool | None = None

    def validate(self):
        if self.objective not in ("ls", "ml"):
            raise ConfigError(f"objective must be 'ls' or 'ml', got {self.objective!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.march_period < 1:
            raise ConfigError("march_period must be >= 1")
        steps = np.log2(np.pi / self.initial_cutoff)
        if not (self.initial_cutoff > 0 and steps >= -1e-9 and abs(steps - round(steps)) < 1e-9):
            raise ConfigError("initial_cutoff must be pi / 2**k so that the schedule ends at pi")
        if self.pose_opt and self.objective != "ml":
            raise ConfigError("pose refinement requires the ML objective")
        if self.pose_opt and self.scheme.kind != "trilinear":
            raise ConfigError("pose refinement requires trilinear interpolation")
        return self


@dataclass
class FitResult:
    model: LowRankModel  # orthonormal components
    singular_values: np.ndarray
    poses: Poses
    latents: np.ndarray  # (n, r), coordinates w.r.t. components * singular_values
    objective_trace: list = field(default_factory=list)
    pose_error_trace: list = field(default_factory=list)
    epoch_times: list = field(default_factory=list)
    cutoffs: list = field(default_factory=list)
    config: OptimConfig | None = None
    regularizer: object = None

    @property
    def contrasts(self):
        return self.poses.contrasts


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        r = _real_view(params)
        return cls(np.zeros_like(r), np.zeros_like(r), 0)


def _real_view(x):
    x = np.ascontiguousarray(x)
    return x.view(np.float64) if np.iscomplexobj(x) else x.astype(np.float64, copy=False)


def adam_step(params, grads, state: AdamState | None, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update; complex arrays are treated as pairs of real parameters.

    Returns ``(new_params, new_state)``; the inputs are not modified.
    """
    if np.shape(params) != np.shape(grads):
        raise ValueError("params and grads must have the same shape")
    state = AdamState.zeros_like(params) if state is None else state
    b1, b2 = betas
    g = _real_view(grads)
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    p = _real_view(params) - lr * mhat / (np.sqrt(vhat) + eps)
    if np.iscomplexobj(params):
        p = p.view(np.complex128)
    return p.reshape(np.shape(params)), AdamState(m, v, t)


# ------------------------------------------------------------------ schedules and init


def cutoff_schedule(epoch, initial=np.pi / 4, period=40):
    return float(min(np.pi, initial * 2 ** (epoch // period)))


def _hermitian_part(vols):
    """Project Fourier volumes onto transforms of real volumes."""
    return fft_centered(np.real(ifft_centered(vols, axes=(-3, -2, -1))) + 0j, axes=(-3, -2, -1))


def init_components(N, r, cutoff, rng, scale=1.0):
    """Random components with a ``1/(1 + |f|^2)`` radial envelope, lowpassed to ``cutoff``."""
    f = np.arange(N) - center(N)
    x, y, z = np.meshgrid(f, f, f, indexing="ij")
    env = 1.0 / (1.0 + x**2 + y**2 + z**2)
    V = (rng.normal(size=(r, N, N, N)) + 1j * rng.normal(size=(r, N, N, N))) * env
    V = _hermitian_part(V) * lowpass_mask(N, cutoff)
    norms = np.linalg.norm(V.reshape(r, -1), axis=1)
    return scale * V / np.maximum(norms, 1e-300)[:, None, None, None]


# ------------------------------------------------------------------ orthogonalization


def orthogonalize(components, real_space: bool = False):
    """Orthonormal basis and singular values with ``V V^H = U diag(s^2) U^H``.

    With ``real_space=True`` the SVD is taken of the real parts of the
    real-space volumes, so the returned components are transforms of real
    volumes (any imaginary real-space part is dropped).
    """
    V = np.asarray(components)
    r = V.shape[0]
    shape = V.shape[1:]
    if real_space:
        X = np.real(ifft_centered(V, axes=(-3, -2, -1))).reshape(r, -1).T
        U, s, _ = np.linalg.svd(X, full_matrices=False)
        comps = fft_centered(U.T.reshape((r,) + shape) + 0j, axes=(-3, -2, -1))
    else:
        U, s, _ = np.linalg.svd(V.reshape(r, -1).T, full_matrices=False)
        comps = U.T.reshape((r,) + shape)
    return comps, s


# ------------------------------------------------------------------ mean


def _normal_op(stack, poses, idx, scheme, batch, use_numba=None):
    """``b = sum_i P_i^* Y_i`` and a function applying ``sum_i P_i^* P_i``."""
    N = stack.N
    ops = []
    b = np.zeros((N, N, N), dtype=np.complex128)
    for s in range(0, len(idx), batch):
        sub = idx[s : s + batch]
        op = BatchProjector.from_poses(N, poses[sub], stack.ctf_images(sub), scheme, use_numba)
        ops.append(op)
        b += op.adjoint(stack.images[sub].reshape(len(sub), -1, 1))[0]

    def apply(x):
        out = np.zeros_like(x)
        for op in ops:
            x_os = op.prepare(x[None])
            out += op.adjoint(op.forward_prepared(x_os))[0]
        return out

    return b, apply


def refresh_mean(
    stack, poses: Poses | None = None, prior_ratio=None, idx=None, cg_iters: int = 0, scheme=TRILINEAR,
    batch=512, tol=1e-8, use_numba=None,
):
    """Homogeneous reconstruction ``argmin sum_i ||Y_i - P_i mu||^2 + mu^H Lambda mu``.

    With ``cg_iters=0`` this is the nearest-neighbour diagonal solve
    ``mu = (sum_i diag(P_i^* P_i) + Lambda)^{-1} sum_i P_i^* Y_i``.
    Otherwise that solution starts a conjugate-gradient solve of the exact
    normal equations for ``scheme``, preconditioned by the same diagonal.
    ``prior_ratio`` (one value per shell) sets
    ``Lambda = ratio * shell mean of sum_i diag(P_i^* P_i)``.
    """
    poses = stack.poses if poses is None else poses
    idx = np.arange(stack.n) if idx is None else np.asarray(idx)
    if len(idx) == 0:
        raise ValueError("cannot reconstruct a mean from an empty stack")
    N = stack.N
    shells = build_shells(N)
    num = np.zeros((1, N, N, N), dtype=np.complex128)
    D = np.zeros((N, N, N))
    for s in range(0, len(idx), batch):
        sub = idx[s : s + batch]
        ctf = stack.ctf_images(sub)
        op = BatchProjector.from_poses(N, poses[sub], ctf, NEAREST, use_numba)
        num += op.adjoint_prepared(stack.images[sub].reshape(len(sub), -1, 1))
        D += nearest_diag_weights(N, poses[sub], ctf)
    lam = np.zeros_like(D)
    if prior_ratio is not None:
        ratio = np.asarray(prior_ratio, float)
        lam = shells.broadcast(ratio * shells.shell_sums(D) / np.maximum(shells.sizes, 1))
    den = D + lam
    pinv = np.where(den > 0, 1.0 / np.where(den > 0, den, 1.0), 0.0)
    mu = num[0] * pinv
    if cg_iters <= 0:
        return mu
    b, normal = _normal_op(stack, poses, idx, scheme, batch, use_numba)
    x = mu
    r = b - normal(x) - lam * x
    z = pinv * r
    p = z.copy()
    rz = np.real(np.vdot(r, z))
    bnorm = np.linalg.norm(b)
    for _ in range(cg_iters):
        if np.linalg.norm(r) <= tol * bnorm or rz <= 0:
            break
        Ap = normal(p) + lam * p
        alpha = rz / np.real(np.vdot(p, Ap))
        x = x + alpha * p
        r = r - alpha * Ap
        z = pinv * r
        rz_new = np.real(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def mean_prior_ratio(half_a, half_b, eps=EPS_FSC):
    """Per-shell ``(1 - c)/c`` from the FSC of two half-set means (clamped to ``[eps, 1]``)."""
    return fsc_ratio(fsc(half_a, half_b), eps, 1.0)


# ------------------------------------------------------------------ per-batch terms


def _batch_terms(kind, stack, idx, poses, vols_os, sigma2, cfg, pose_grad=False, grad=True):
    """Summed objective, oversampled V-gradient and per-image theta-gradients over ``idx``."""
    N = stack.N
    r = vols_os.shape[0] - 1
    total = 0.0
    G_os = None
    dtheta = np.zeros((len(idx), 3)) if pose_grad else None
    for s in range(0, len(idx), cfg.chunk):
        sub = idx[s : s + cfg.chunk]
        op = BatchProjector.from_poses(N, poses[sub], stack.ctf_images(sub), cfg.scheme, cfg.use_numba)
        if pose_grad:
            val, jac = op.forward_with_jacobian(vols_os)
        else:
            val = op.forward_prepared(vols_os)
        y = stack.images[sub].reshape(len(sub), -1) - val[:, :, 0]
        Z = val[:, :, 1:]
        if kind == "ls":
            vals, GZ = ls_image_terms(y, Z, sigma2, grad)
        elif pose_grad:
            vals, GZ, Gy = ml_image_terms(y, Z, sigma2, True, grad_y=True)
        else:
            vals, GZ = ml_image_terms(y, Z, sigma2, grad)
        total += float(np.sum(vals))
        if grad:
            g = op.adjoint_prepared(GZ)
            G_os = g if G_os is None else G_os + g
        if pose_grad:
            d = -np.real(np.einsum("bp,bpk->bk", np.conj(Gy), jac[:, :, 0, :]))
            d += np.real(np.einsum("bpj,bpjk->bk", np.conj(GZ), jac[:, :, 1:, :]))
            dtheta[s : s + len(sub)] = d
    if grad and G_os is None:
        G_os = np.zeros((r,) + vols_os.shape[1:], dtype=np.complex128)
    return total, G_os, dtheta


def refine_rotations_step(stack, idx, model: LowRankModel, poses: Poses, lr_pose, state=None, cfg=None):
    """One Adam-normalized gradient step of the ML objective in each batch image's rotation.

    Only ``poses.thetas[idx]`` change.  ``state`` is a dict with per-image
    moment arrays (created when ``None``).  Returns ``(poses, state)``.
    """
    cfg = OptimConfig(objective="ml") if cfg is None else cfg
    if cfg.scheme.kind != "trilinear":
        raise ValueError("rotation refinement needs trilinear interpolation")
    vols = np.concatenate([model.mean[None], model.components])
    vols_os = oversample(vols, cfg.scheme.oversampling)
    _, _, dtheta = _batch_terms("ml", stack, np.asarray(idx), poses, vols_os, stack.sigma2, cfg, True, False)
    return _pose_update(poses, np.asarray(idx), dtheta, lr_pose, state, cfg)


def _pose_update(poses, idx, dtheta, lr_pose, state, cfg):
    n = len(poses)
    if state is None:
        state = {"m": np.zeros((n, 3)), "v": np.zeros((n, 3)), "t": np.zeros(n)}
    b1, b2 = cfg.adam_betas
    state["t"][idx] += 1
    t = state["t"][idx][:, None]
    state["m"][idx] = b1 * state["m"][idx] + (1 - b1) * dtheta
    state["v"][idx] = b2 * state["v"][idx] + (1 - b2) * dtheta**2
    mhat = state["m"][idx] / (1 - b1**t)
    vhat = state["v"][idx] / (1 - b2**t)
    new = poses.copy()
    new.thetas[idx] = rewrap(poses.thetas[idx] - lr_pose * mhat / (np.sqrt(vhat) + cfg.adam_eps))
    return new, state


# ------------------------------------------------------------------ offsets and contrast


def _make_Q(Z, Minv, sigma2):
    """``x -> (Z Z^H + sigma2 I)^{-1} x`` per image, via Woodbury."""

    def apply_Q(x):
        c = np.einsum("bpj,bp->bj", np.conj(Z), x)
        c = np.einsum("bjk,bk->bj", Minv, c)
        return (x - np.einsum("bpj,bj->bp", Z, c) / sigma2) / sigma2

    return apply_Q


def _offset_value(images, m, apply_Q, offsets, w):
    r = np.exp(1j * (offsets @ w)) * images - m
    return np.real(np.sum(np.conj(r) * apply_Q(r), axis=1))


def refine_offsets(
    stack, idx, model: LowRankModel, poses: Poses, n_iter=10, max_backtrack=10, scheme=TRILINEAR, return_trace=False
):
    """Newton iterations with backtracking on the per-image ML objective in the offset.

    The objective is ``r^H Q r`` with ``r = exp(2 pi i f.t/N) Y - P0 mu`` and
    ``Q = (P0 V V^H P0^H + sigma^2 I)^{-1}`` where ``P0`` omits the shift.
    When the Hessian is not positive definite a unit-length gradient step is
    tried instead.  Steps are accepted only if the objective decreases, so
    it is nonincreasing per image.  A shift by ``N`` pixels is invisible on
    the integer frequency grid, so results are wrapped into ``[-N/2, N/2)``.
    """
    idx = np.asarray(idx)
    N, sigma2 = stack.N, stack.sigma2
    sub = poses[idx]
    op0 = BatchProjector(N, sub.thetas, None, sub.contrasts, stack.ctf_images(idx), scheme)
    proj = op0.forward(np.concatenate([model.mean[None], model.components]))
    m = proj[:, :, 0]
    Z = proj[:, :, 1:]
    r = Z.shape[2]
    Minv = np.linalg.inv(np.eye(r) + np.matmul(np.conj(Z).transpose(0, 2, 1), Z) / sigma2)

    apply_Q = _make_Q(Z, Minv, sigma2)

    Y = stack.images[idx].reshape(len(idx), -1)
    f = np.arange(N) - center(N)
    fa, fb = np.meshgrid(f, f, indexing="ij")
    w = 2 * np.pi * np.stack([fa.ravel(), fb.ravel()]) / N
    t = sub.offsets.copy()
    val = _offset_value(Y, m, apply_Q, t, w)
    trace = [val.copy()]
    for _ in range(n_iter):
        _, g, H = offset_terms(Y, m, apply_Q, t)
        det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] * H[:, 1, 0]
        pd = (H[:, 0, 0] > 0) & (det > 1e-12 * np.maximum(np.abs(H).max(axis=(1, 2)) ** 2, 1e-300))
        d = np.zeros_like(t)
        if pd.any():
            d[pd] = -np.linalg.solve(H[pd], g[pd][:, :, None])[:, :, 0]
        gn = np.linalg.norm(g, axis=1)
        fb_ = ~pd & (gn > 0)
        d[fb_] = -g[fb_] / gn[fb_, None]
        pending = np.linalg.norm(d, axis=1) > 0
        alpha = 1.0
        for _ in range(max_backtrack + 1):
            if not pending.any():
                break
            cand = np.clip(t[pending] + alpha * d[pending], -N, N)
            fc = _offset_value(Y[pending], m[pending], _make_Q(Z[pending], Minv[pending], sigma2), cand, w)
            better = fc < val[pending]
            pi = np.flatnonzero(pending)[better]
            t[pi] = cand[better]
            val[pi] = fc[better]
            pending[pi] = False
            alpha /= 2
        trace.append(val.copy())
    new = poses.copy()
    new.offsets[idx] = (t + N / 2) % N - N / 2
    if return_trace:
        return new, np.array(trace).T
    return new


def refresh_contrast(stack, idx, model: LowRankModel, poses: Poses, scheme=TRILINEAR):
    """Re-estimate absolute contrasts against ``P_i (mu + V z_i)`` with the current ``z_i``."""
    idx = np.asarray(idx)
    N = stack.N
    sub = poses[idx]
    ctf = stack.ctf_images(idx)
    vols = np.concatenate([model.mean[None], model.components])
    op = BatchProjector.from_poses(N, sub, ctf, scheme)
    prepared = op.prepare(vols)
    z = latent_coordinates(stack.images[idx], op, model, stack.sigma2, prepared)
    op_unit = BatchProjector(N, sub.thetas, sub.offsets, None, ctf, scheme)
    alpha, ok = contrast_estimate(stack.images[idx], op_unit, model, z, prepared)
    new = poses.copy()
    new.contrasts[idx] = np.where(ok, alpha, sub.contrasts)
    return new


# ------------------------------------------------------------------ fit


def _components_scale(stack, mean, poses, r, cutoff, rng, cfg, n_probe=64):
    """Norm for the initial components: half the excess residual energy, spread over ``r``."""
    probe = np.sort(rng.choice(stack.n, size=min(n_probe, stack.n), replace=False))
    V = init_components(stack.N, r, cutoff, rng)
    op = BatchProjector.from_poses(stack.N, poses[probe], stack.ctf_images(probe), cfg.scheme, cfg.use_numba)
    proj = op.forward(np.concatenate([mean[None], V]))
    resid = stack.images[probe].reshape(len(probe), -1) - proj[:, :, 0]
    P = stack.N**2
    excess = np.mean(np.sum(np.abs(resid) ** 2, axis=1)) - stack.sigma2 * P
    kappa = np.mean(np.sum(np.abs(proj[:, :, 1:]) ** 2, axis=1))
    energy = max(excess, 0.05 * stack.sigma2 * P)
    return float(np.sqrt(0.5 * energy / (r * max(kappa, 1e-300))))


def _mean_with_prior(stack, poses, halves, cfg, regularize):
    kw = dict(cg_iters=cfg.mean_cg_iters, scheme=cfg.scheme, use_numba=cfg.use_numba)
    if not regularize:
        return refresh_mean(stack, poses, None, **kw)
    a, b = (refresh_mean(stack, poses, None, idx=h, **kw) for h in halves)
    return refresh_mean(stack, poses, mean_prior_ratio(a, b), **kw)


def fit(
    stack, config: OptimConfig | None = None, mean=None, components=None, truth_poses: Poses | None = None,
    callback=None,
):
    """Estimate mean, low-rank components, latents and (optionally) refined poses.

    ``mean`` defaults to a homogeneous reconstruction from the stack.
    ``components`` (r, N, N, N) override the random initialization.
    ``truth_poses`` only feeds the pose-error trace.  ``callback(epoch, model, poses)``
    runs after every epoch.
    """
    cfg = (config or OptimConfig()).validate()
    n, N, r = stack.n, stack.N, cfg.rank
    if n < 1:
        raise ConfigError("the particle stack is empty")
    if not stack.sigma2 > 0:
        raise ConfigError("noise variance must be positive")
    kind = cfg.objective
    B = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    poses = stack.poses.copy()
    halves = [np.arange(0, n, 2), np.arange(1, n, 2)]
    use_halves = cfg.regularize and n >= 2
    shells = build_shells(N)
    os = cfg.scheme.oversampling

    mean = _mean_with_prior(stack, poses, halves, cfg, use_halves) if mean is None else mean.copy()
    cutoff = cutoff_schedule(0, cfg.initial_cutoff, cfg.march_period)
    scale = _components_scale(stack, mean, poses, r, cutoff, rng, cfg)
    if components is None:
        V = init_components(N, r, cutoff, rng, scale)
    else:
        V = np.array(components, dtype=np.complex128)
        if V.shape != (r, N, N, N):
            raise ConfigError("initial components have the wrong shape")
    Vh = [init_components(N, r, cutoff, rng, scale) for _ in halves] if use_halves else []
    nz = np.abs(V) > 0
    lr = cfg.learning_rate * (np.sqrt(np.mean(np.abs(V[nz]) ** 2)) if nz.any() else scale)

    reg = None
    adam = [None] * (1 + len(Vh))
    pose_state = None
    result = FitResult(LowRankModel(mean, V), np.zeros(r), poses, np.zeros((n, r)), config=cfg)
    mu_os = oversample(mean[None], os)
    mask = None

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        stage = epoch // cfg.march_period
        stage_start = epoch % cfg.march_period == 0
        if stage_start:
            fitted_mask = mask
            cutoff = cutoff_schedule(epoch, cfg.initial_cutoff, cfg.march_period)
            mask = lowpass_mask(N, cutoff)
            V = V * mask
            Vh = [v * mask for v in Vh]
            adam = [None] * (1 + len(Vh))
            log.info("epoch %d: cutoff %.4f", epoch, cutoff)
        rebuild = stage_start or (cfg.reg_refresh_period and epoch % cfg.reg_refresh_period == 0)
        if epoch > 0 and rebuild:
            if use_halves:
                w = shell_projector_weights(N, poses, stack.ctf_images(), shells)
                active = _fitted_shells(shells, fitted_mask if stage_start else mask)
                reg = build_regularizer(
                    Vh[0], Vh[1], w.T @ w, shells, cfg.reg_rank, counts=w.sum(0), ml_form=cfg.ml_prior_form,
                    active=active,
                )
            if stage_start:
                mean = _mean_with_prior(stack, poses, halves, cfg, use_halves)
                mu_os = oversample(mean[None], os)
        result.cutoffs.append(cutoff)
        pose_lr = cfg.pose_lr * cfg.pose_lr_decay**stage
        perm = rng.permutation(n)
        values = []
        for s in range(0, n, B):
            idx = np.sort(perm[s : s + B])
            do_pose = cfg.pose_opt and epoch >= cfg.pose_start_epoch
            vols_os = np.concatenate([mu_os, oversample(V, os)])
            val, G_os, dtheta = _batch_terms(kind, stack, idx, poses, vols_os, stack.sigma2, cfg, do_pose)
            pen, Gpen = _penalty(kind, V, reg, stack.sigma2)
            value = val / len(idx) + pen / n
            if not np.isfinite(value):
                raise DivergenceError(f"objective became {value} at epoch {epoch}")
            G = oversample_adjoint(G_os, os) / len(idx) + Gpen / n
            V, adam[0] = adam_step(V, G, adam[0], lr, cfg.adam_betas, cfg.adam_eps)
            V = V * mask
            for h, half in enumerate(halves if use_halves else []):
                hidx = idx[np.isin(idx, half)]
                if len(hidx) == 0:
                    continue
                hv_os = np.concatenate([mu_os, oversample(Vh[h], os)])
                hval, hG_os, _ = _batch_terms(kind, stack, hidx, poses, hv_os, stack.sigma2, cfg)
                hpen, hGpen = _penalty(kind, Vh[h], reg, stack.sigma2)
                hG = oversample_adjoint(hG_os, os) / len(hidx) + hGpen / n
                Vh[h], adam[1 + h] = adam_step(Vh[h], hG, adam[1 + h], lr, cfg.adam_betas, cfg.adam_eps)
                Vh[h] = Vh[h] * mask
            if do_pose:
                poses, pose_state = _pose_update(poses, idx, dtheta, pose_lr, pose_state, cfg)
            values.append(value)
        result.objective_trace.append(float(np.mean(values)))

        if cfg.pose_opt and (epoch + 1) % cfg.mean_refresh_period == 0:
            mean = _mean_with_prior(stack, poses, halves, cfg, use_halves)
            mu_os = oversample(mean[None], os)
        if cfg.pose_opt and (epoch + 1) % cfg.offset_refresh_period == 0:
            model = LowRankModel(mean, V)
            for s in range(0, n, cfg.chunk):
                idx = np.arange(s, min(n, s + cfg.chunk))
                poses = refine_offsets(stack, idx, model, poses, cfg.newton_iters, scheme=cfg.scheme)
                poses = refresh_contrast(stack, idx, model, poses, cfg.scheme)
        if truth_poses is not None:
            result.pose_error_trace.append(pose_errors(poses, truth_poses))
        result.epoch_times.append(time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, LowRankModel(mean, V), poses)

    U, sv = orthogonalize(V, real_space=True)
    model = LowRankModel(mean, U)
    scaled = LowRankModel(mean, U * sv[:, None, None, None])
    latents = np.zeros((n, r))
    for s in range(0, n, cfg.chunk):
        idx = np.arange(s, min(n, s + cfg.chunk))
        op = BatchProjector.from_poses(N, poses[idx], stack.ctf_images(idx), cfg.scheme, cfg.use_numba)
        latents[idx] = latent_coordinates(stack.images[idx], op, scaled, stack.sigma2)
    result.model = model
    result.singular_values = sv
    result.poses = poses
    result.latents = latents
    result.regularizer = reg
    return result


def _fitted_shells(shells, mask):
    """Shells that intersect ``mask``, the region the half-set estimates could fit."""
    if mask is None:
        return np.ones(shells.count, bool)
    return shells.shell_sums(mask.astype(float)) > 0


def _penalty(kind, V, reg, sigma2):
    if reg is None:
        return 0.0, 0.0
    if kind == "ls":
        return ls_regularizer(V, reg.rvecs)
    return ml_prior(V, reg.Rv, True, sigma2)
