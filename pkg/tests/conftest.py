import numpy as np
import pytest

from lrh.fourier import fft_centered
from lrh.projection import BatchProjector, Poses
from lrh.simulator import random_rotvecs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, N, k=None, hermitian=False):
    shape = (N, N, N) if k is None else (k, N, N, N)
    if hermitian:
        return fft_centered(rng.normal(size=shape) + 0j, axes=(-3, -2, -1))
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def random_poses(rng, n, offsets=0.0, contrast_std=0.0):
    thetas = random_rotvecs([np.random.default_rng(s) for s in rng.integers(1 << 30, size=n)])
    off = rng.uniform(-offsets, offsets, size=(n, 2)) if offsets else np.zeros((n, 2))
    con = 1.0 + contrast_std * rng.normal(size=n)
    return Poses(thetas, off, con)


def dense_projectors(op: BatchProjector):
    """Explicit (B, N^2, N^3) matrices of a batch operator, one basis volume at a time."""
    N = op.N
    eye = np.eye(N**3, dtype=np.complex128).reshape(N**3, N, N, N)
    cols = op.forward(eye)  # (B, P, N^3)
    return cols


def dense_ls(op, model, images, sigma2):
    """Sum over images of || y y^H - (P V)(P V)^H - sigma2 I ||_F^2."""
    Pm = dense_projectors(op)
    V = model.components.reshape(model.rank, -1).T
    total = 0.0
    for i in range(op.B):
        y = images[i].ravel() - Pm[i] @ model.mean.ravel()
        Z = Pm[i] @ V
        D = np.outer(y, y.conj()) - Z @ Z.conj().T - sigma2 * np.eye(op.P)
        total += np.linalg.norm(D) ** 2
    return total


def dense_ml(op, model, images, sigma2):
    """Sum over images of y^H C^{-1} y + log det C with C = (P V)(P V)^H + sigma2 I."""
    Pm = dense_projectors(op)
    V = model.components.reshape(model.rank, -1).T
    total = 0.0
    for i in range(op.B):
        y = images[i].ravel() - Pm[i] @ model.mean.ravel()
        Z = Pm[i] @ V
        C = Z @ Z.conj().T + sigma2 * np.eye(op.P)
        total += np.real(y.conj() @ np.linalg.solve(C, y)) + np.linalg.slogdet(C)[1]
    return total


def dense_covar_fsc(A, B, shells):
    """Shell-pair correlations of the explicit N^3 x N^3 matrices A A^H and B B^H."""
    a = A.reshape(len(A), -1).T
    b = B.reshape(len(B), -1).T
    SA, SB = a @ a.conj().T, b @ b.conj().T
    lab = shells.labels.ravel()
    S = shells.count
    out = np.full((S, S), np.nan)
    for k in range(S):
        for m in range(S):
            blkA = SA[np.ix_(lab == k, lab == m)]
            blkB = SB[np.ix_(lab == k, lab == m)]
            den = np.linalg.norm(blkA) * np.linalg.norm(blkB)
            if den > 0:
                out[k, m] = np.real(np.vdot(blkB, blkA)) / den
    return out
