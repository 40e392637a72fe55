"""Frequency-shell regularizers built from two half-set estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .fourier import ShellIndex, build_shells, center, fsc
from .projection import NEAREST, BatchProjector

EPS_FSC = 1e-3

__all__ = [
    "EPS_FSC",
    "ShellFscMatrix",
    "ShellRegularizer",
    "build_R_sigma",
    "build_Rv",
    "build_mean_prior",
    "build_regularizer",
    "covar_fsc",
    "fsc_ratio",
    "shell_gram",
    "shell_projector_weights",
]


@dataclass
class ShellFscMatrix:
    values: np.ndarray  # (S, S); NaN where a shell pair has no energy
    shells: ShellIndex


@dataclass
class ShellRegularizer:
    rvecs: np.ndarray | None  # (m, N, N, N) real, R_sigma = sum_l r_l r_l^T
    Rv: np.ndarray | None  # (N, N, N) >= 0
    mean_prior: np.ndarray | None = None  # (N, N, N) >= 0, diagonal of Lambda_mu^{-1}
    shell_matrix: np.ndarray | None = None  # (S, S) shell-level R_sigma

    @property
    def m(self) -> int:
        return 0 if self.rvecs is None else len(self.rvecs)


def shell_gram(A, B, shells: ShellIndex) -> np.ndarray:
    """``G[k, (m1, m2)] = sum_{x in S_k} a_m1(x) conj(b_m2(x))``; shape (S, rA * rB)."""
    A = np.asarray(A).reshape(len(A), -1)
    B = np.asarray(B).reshape(len(B), -1)
    N = shells.N
    prods = (A[:, None, :] * np.conj(B)[None, :, :]).reshape(-1, N, N, N)
    return shells.shell_sums(prods).T


def covar_fsc(A, B, shells: ShellIndex | None = None) -> ShellFscMatrix:
    """Correlation of every shell pair of ``A A^H`` and ``B B^H``, from the factors only."""
    A = np.asarray(A)
    B = np.asarray(B)
    if A.shape[1:] != B.shape[1:]:
        raise ValueError("component sets must share a grid")
    shells = build_shells(A.shape[-1]) if shells is None else shells
    Gab = shell_gram(A, B, shells)
    Gaa = shell_gram(A, A, shells)
    Gbb = shell_gram(B, B, shells)
    cross = np.real(Gab @ np.conj(Gab).T)
    na = np.abs(Gaa @ np.conj(Gaa).T)
    nb = np.abs(Gbb @ np.conj(Gbb).T)
    den = np.sqrt(na * nb)
    vals = np.full(cross.shape, np.nan)
    ok = den > 1e-300 * max(1.0, float(den.max(initial=0)))
    vals[ok] = np.clip(cross[ok] / den[ok], -1.0, 1.0)
    return ShellFscMatrix(vals, shells)


def fsc_ratio(c, eps=EPS_FSC, upper=1.0 - EPS_FSC):
    """``(1 - c) / c`` with undefined entries read as 0 and ``c`` clamped to ``[eps, upper]``."""
    c = np.nan_to_num(np.asarray(c, dtype=np.float64), nan=0.0)
    c = np.clip(c, eps, upper)
    return (1 - c) / c


def shell_projector_weights(N, poses, ctf_images=None, shells: ShellIndex | None = None, batch=1024):
    """Per-image shell averages of ``diag(P_m^* P_m)`` under nearest-neighbour projection.

    Row ``m`` holds ``(1/|S_i|) sum_{k in S_i} (P_m^* P_m)_kk``; shape (n, S).
    """
    shells = build_shells(N) if shells is None else shells
    n = len(poses)
    out = np.zeros((n, shells.count))
    lab = shells.labels.ravel()
    for s in range(0, n, batch):
        idx = np.arange(s, min(n, s + batch))
        op = BatchProjector.from_poses(N, poses[idx], None if ctf_images is None else ctf_images[idx], NEAREST)
        ijk = np.floor(op.coords + 0.5).astype(np.int64)
        valid = np.all((ijk >= 0) & (ijk < N), axis=1)
        lin = np.where(valid, (ijk[:, 0] * N + ijk[:, 1]) * N + ijk[:, 2], 0)
        shell_of_sample = np.where(valid, lab[lin], shells.count)
        w = (np.abs(op.filt) ** 2).ravel()
        rows = np.repeat(np.arange(len(idx)), op.P)
        acc = np.zeros((len(idx), shells.count + 1))
        np.add.at(acc, (rows, shell_of_sample), w)
        out[idx] = acc[:, :-1]
    return out / np.maximum(shells.sizes, 1)


def build_R_sigma(fsc_mat, T, shells: ShellIndex, m: int = 5, eps=EPS_FSC, active=None):
    """Rank-``m`` factors ``r_l`` (volumes) of ``(R_sigma)_{kl} = (1-c)/c * T`` over shell pairs.

    Only non-negative eigenvalues are kept.  The factors may be signed; the
    penalty uses them linearly (see :func:`lrh.objectives.ls_regularizer`).
    Returns ``(rvecs, shell_matrix)``.
    """
    values = fsc_mat.values if isinstance(fsc_mat, ShellFscMatrix) else np.asarray(fsc_mat)
    S = values.shape[0]
    if m > S:
        raise ValueError(f"rank m={m} exceeds the number of shells {S}")
    K = fsc_ratio(values, eps, 1 - eps) * np.asarray(T)
    if active is not None:
        K = K * np.outer(active, active)
    K = 0.5 * (K + K.T)
    lam, U = np.linalg.eigh(K)
    order = np.argsort(lam)[::-1][:m]
    lam, U = lam[order], U[:, order]
    keep = lam > 1e-12 * max(float(np.abs(lam).max(initial=0)), 1e-300)
    rho = (U[:, keep] * np.sqrt(lam[keep])).T  # (m', S)
    if rho.shape[0] == 0:
        return np.zeros((0,) + shells.labels.shape), K
    return np.stack([shells.broadcast(r) for r in rho]), K


def build_Rv(rvecs=None, shell_matrix=None, shells: ShellIndex | None = None) -> np.ndarray:
    """``sqrt(diag(R_sigma))``.

    From the factors this is ``sqrt(sum_l r_l^2)``.  Given the untruncated
    shell matrix the exact diagonal is used instead; dropping the negative
    eigenvalues of an indefinite matrix can inflate the truncated diagonal
    by orders of magnitude.
    """
    if shell_matrix is not None:
        return shells.broadcast(np.sqrt(np.maximum(np.diag(shell_matrix), 0.0)))
    rvecs = np.asarray(rvecs)
    return np.sqrt(np.sum(rvecs**2, axis=0))


def build_mean_prior(half_a, half_b, shells: ShellIndex, shell_weights, eps=EPS_FSC) -> np.ndarray:
    """Diagonal mean prior: per-shell ``(1-c)/c`` times the shell's mean projector weight.

    ``shell_weights`` is the per-shell mean of ``sum_m diag(P_m^* P_m)``.
    """
    c = fsc(half_a, half_b, shells)
    ratio = fsc_ratio(c, eps, 1.0)
    return shells.broadcast(ratio * np.asarray(shell_weights))


def build_regularizer(
    comps_a, comps_b, T, shells: ShellIndex, m: int = 5, mean_prior=None, counts=None, ml_form: str = "count",
    active=None,
) -> ShellRegularizer:
    """Full regularizer from two half-set component estimates.

    ``ml_form`` selects the diagonal weights of the ML prior:
    ``"sqrt_diag"`` uses ``sqrt(diag(R_sigma))``; ``"count"`` uses the
    per-shell ratio ``(1-c)/c`` times ``counts`` (the per-shell mean of
    ``sum_m diag(P_m^* P_m)``), the same construction as the mean prior.

    ``active`` (S,) marks the shells the half-set estimates were free to
    fit.  The others carry no evidence either way and are left unpenalized.
    """
    S = shells.count
    m = min(m, S)
    fm = covar_fsc(comps_a, comps_b, shells)
    if active is not None:
        active = np.asarray(active, bool)
    rvecs, K = build_R_sigma(fm, T, shells, m, active=active)
    if ml_form == "sqrt_diag":
        Rv = build_Rv(shell_matrix=K, shells=shells)
    elif ml_form == "count":
        if counts is None:
            raise ValueError("the count form needs per-shell counts")
        ratio = fsc_ratio(np.diag(fm.values))
        if active is not None:
            ratio = np.where(active, ratio, 0.0)
        Rv = shells.broadcast(ratio * np.asarray(counts))
    else:
        raise ValueError(f"unknown ML prior form {ml_form!r}")
    return ShellRegularizer(rvecs, Rv, mean_prior, K)


def nearest_diag_weights(N, poses, ctf_images=None, os: int = 1, batch=1024):
    """``sum_m diag(P_m^* P_m)`` on the ``os*N`` grid under nearest-neighbour projection."""
    M = os * N
    from .projection import InterpolationScheme

    scheme = InterpolationScheme("nearest", os)
    out = np.zeros((M, M, M))
    for s in range(0, len(poses), batch):
        idx = np.arange(s, min(len(poses), s + batch))
        op = BatchProjector.from_poses(N, poses[idx], None if ctf_images is None else ctf_images[idx], scheme)
        out += _kernels.scatter_weights_nearest((np.abs(op.filt) ** 2).ravel(), op.coords, M)
    return out


def _radius_shells(M, os):
    f = np.arange(M) - center(M)
    x, y, z = np.meshgrid(f, f, f, indexing="ij")
    return np.rint(np.sqrt(x**2 + y**2 + z**2) / os).astype(np.int64)
