"""Low-rank least-squares and maximum-likelihood objectives.

Gradients with respect to complex arrays are returned as
``G = df/dRe + i df/dIm``, so that ``df = Re(vdot(G, dX))`` and a descent
step is ``X - lr * G``.

Per-image quantities are batched: residuals ``y`` are (B, P) with
``P = N*N`` and projected components ``Z = P_i V`` are (B, P, r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import BatchProjector

__all__ = [
    "LowRankModel",
    "contrast_estimate",
    "latent_coordinates",
    "ls_gradient",
    "ls_image_terms",
    "ls_objective",
    "ls_regularizer",
    "ml_gradient",
    "ml_image_terms",
    "ml_objective",
    "ml_prior",
    "project_model",
    "value_and_grad",
]


@dataclass
class LowRankModel:
    mean: np.ndarray  # (N, N, N)
    components: np.ndarray  # (r, N, N, N); not orthogonal during training

    @property
    def rank(self) -> int:
        return len(self.components)

    @property
    def N(self) -> int:
        return self.mean.shape[-1]

    def copy(self) -> "LowRankModel":
        return LowRankModel(self.mean.copy(), self.components.copy())


def _check_sigma2(sigma2):
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")


def _hermitian_mm(A, B):
    """Batched ``A^H B`` for (B, P, a) and (B, P, b)."""
    return np.matmul(np.conj(A).transpose(0, 2, 1), B)


def project_model(images, op: BatchProjector, model: LowRankModel, prepared=None):
    """Residuals ``Y_i - P_i mu`` (B, P) and ``P_i V`` (B, P, r)."""
    vols = np.concatenate([model.mean[None], model.components])
    vols_os = op.prepare(vols) if prepared is None else prepared
    proj = op.forward_prepared(vols_os)
    y = np.asarray(images).reshape(op.B, -1) - proj[:, :, 0]
    return y, proj[:, :, 1:]


# ------------------------------------------------------------------ per-image terms


def ls_image_terms(y, Z, sigma2, grad=True):
    """Least-squares objective of each image and its gradient w.r.t. ``Z``."""
    P = y.shape[1]
    ny2 = np.sum(np.abs(y) ** 2, axis=1)
    b = np.einsum("bpj,bp->bj", np.conj(Z), y)  # b_j = <P v_j, y>
    S = _hermitian_mm(Z, Z)
    val = (
        ny2**2
        - 2 * (np.sum(np.abs(b) ** 2, axis=1) + sigma2 * ny2)
        + np.sum(np.abs(S) ** 2, axis=(1, 2))
        + 2 * sigma2 * np.real(np.trace(S, axis1=1, axis2=2))
        + sigma2**2 * P
    )
    if not grad:
        return val, None
    G = 4 * (np.matmul(Z, S) - y[:, :, None] * np.conj(b)[:, None, :] + sigma2 * Z)
    return val, G


def ml_image_terms(y, Z, sigma2, grad=True, grad_y=False):
    """Negative log-likelihood of each image (Woodbury form) and its gradients.

    Returns ``(values, G_Z)`` or ``(values, G_Z, G_y)``.
    """
    P = y.shape[1]
    r = Z.shape[2]
    M = np.eye(r) + _hermitian_mm(Z, Z) / sigma2
    b = np.einsum("bpj,bp->bj", np.conj(Z), y)
    L = np.linalg.cholesky(M)
    w = np.linalg.solve(M, b[:, :, None])[:, :, 0]  # M^{-1} Z^H y
    logdet = 2 * np.sum(np.log(np.real(np.diagonal(L, axis1=1, axis2=2))), axis=1)
    ny2 = np.sum(np.abs(y) ** 2, axis=1)
    quad = np.real(np.einsum("bj,bj->b", np.conj(b), w))
    val = (ny2 - quad / sigma2) / sigma2 + logdet + P * np.log(sigma2)
    if not grad:
        return (val, None, None) if grad_y else (val, None)
    Minv = np.linalg.inv(M)
    Zw = np.einsum("bpj,bj->bp", Z, w)
    ww = w[:, :, None] * np.conj(w)[:, None, :]
    G = (
        -(2 / sigma2**2) * y[:, :, None] * np.conj(w)[:, None, :]
        + (2 / sigma2**3) * np.matmul(Z, ww)
        + (2 / sigma2) * np.matmul(Z, Minv)
    )
    if grad_y:
        Gy = (2 / sigma2) * y - (2 / sigma2**2) * Zw
        return val, G, Gy
    return val, G


# ------------------------------------------------------------------ regularizers


def ls_regularizer(components, rvecs, grad=True):
    """``sum_l sum_jk |<r_l * v_j, v_k>|^2`` and its gradient.

    The weights enter linearly, ``<r * v_j, v_k> = sum_x r_x v_j(x) conj(v_k(x))``,
    so signed ``r_l`` are allowed.
    """
    r = len(components)
    V = components.reshape(r, -1)
    val = 0.0
    G = np.zeros_like(V) if grad else None
    if rvecs is None or r == 0:
        return val, (G.reshape(components.shape) if grad else None)
    for rl in np.asarray(rvecs).reshape(len(rvecs), -1):
        W = (np.conj(V) * rl) @ V.T  # W[j, k] = sum_x conj(v_j) r v_k
        val += float(np.sum(np.abs(W) ** 2))
        if grad:
            G += 4 * (W.T @ V) * rl
    return val, (G.reshape(components.shape) if grad else None)


def ml_prior(components, Rv, grad=True, sigma2=1.0):
    """``sum_j || sqrt(Rv) * v_j ||^2 / sigma2`` and its gradient.

    Dividing by the noise variance puts the prior on the same footing as
    the likelihood, which is measured in units of ``sigma2``.
    """
    if Rv is None:
        return 0.0, (np.zeros_like(components) if grad else None)
    val = float(np.sum(Rv * np.abs(components) ** 2)) / sigma2
    return val, (2 * Rv * components / sigma2 if grad else None)


# ------------------------------------------------------------------ public API


def value_and_grad(
    kind, images, op, model, sigma2, reg=None, data_scale=1.0, reg_scale=1.0, grad=True, prepared=None
):
    """Objective ``data_scale * sum_i f_i + reg_scale * penalty`` and its gradient in V."""
    _check_sigma2(sigma2)
    y, Z = project_model(images, op, model, prepared)
    if kind == "ls":
        vals, GZ = ls_image_terms(y, Z, sigma2, grad)
        pen, Gpen = ls_regularizer(model.components, None if reg is None else reg.rvecs, grad)
    elif kind == "ml":
        vals, GZ = ml_image_terms(y, Z, sigma2, grad)
        pen, Gpen = ml_prior(model.components, None if reg is None else reg.Rv, grad, sigma2)
    else:
        raise ValueError(f"unknown objective {kind!r}")
    value = data_scale * float(np.sum(vals)) + reg_scale * pen
    if not grad:
        return value, None
    G = data_scale * op.adjoint(GZ) + reg_scale * Gpen
    return value, G


def ls_objective(images, op, model, sigma2, reg=None, data_scale=1.0, reg_scale=1.0):
    return value_and_grad("ls", images, op, model, sigma2, reg, data_scale, reg_scale, grad=False)[0]


def ls_gradient(images, op, model, sigma2, reg=None, data_scale=1.0, reg_scale=1.0):
    return value_and_grad("ls", images, op, model, sigma2, reg, data_scale, reg_scale)[1]


def ml_objective(images, op, model, sigma2, reg=None, data_scale=1.0, reg_scale=1.0):
    return value_and_grad("ml", images, op, model, sigma2, reg, data_scale, reg_scale, grad=False)[0]


def ml_gradient(images, op, model, sigma2, reg=None, data_scale=1.0, reg_scale=1.0):
    return value_and_grad("ml", images, op, model, sigma2, reg, data_scale, reg_scale)[1]


def latent_coordinates(images, op, model, sigma2, prepared=None, return_complex=False):
    """Ridge estimate ``((P V)^H (P V) + sigma2 I)^{-1} (P V)^H (Y - P mu)`` per image."""
    y, Z = project_model(images, op, model, prepared)
    r = Z.shape[2]
    A = _hermitian_mm(Z, Z) + sigma2 * np.eye(r)
    b = np.einsum("bpj,bp->bj", np.conj(Z), y)
    z = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    return z if return_complex else z.real


def contrast_estimate(images, op_unit, model, zhat, prepared=None):
    """Least-squares contrast of each image against ``P_i (mu + V z_i)``.

    ``op_unit`` must carry unit contrasts.  Returns ``(alpha, ok)``; images
    whose prediction vanishes get ``alpha = 1`` and ``ok = False``.
    """
    vols = np.concatenate([model.mean[None], model.components])
    vols_os = op_unit.prepare(vols) if prepared is None else prepared
    proj = op_unit.forward_prepared(vols_os)
    pred = proj[:, :, 0] + np.einsum("bpj,bj->bp", proj[:, :, 1:], np.asarray(zhat).reshape(op_unit.B, -1))
    Y = np.asarray(images).reshape(op_unit.B, -1)
    den = np.sum(np.abs(pred) ** 2, axis=1)
    num = np.real(np.sum(np.conj(pred) * Y, axis=1))
    ok = den > 1e-300
    alpha = np.ones(op_unit.B)
    alpha[ok] = num[ok] / den[ok]
    return alpha, ok
