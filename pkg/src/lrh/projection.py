"""Per-image projection operators in the Fourier domain.

An image is a central slice of the volume's transform, sampled on the plane
spanned by the first two columns of the pose rotation, then multiplied by
the contrast, the CTF and the translation phase
``exp(-2 pi i f . t / N)`` (``t`` in pixels).

With oversampling ``s`` the volume is zero-padded in real space to ``s*N``
before sampling.  The padded transform is rescaled by ``s**1.5`` so that
grid-aligned samples agree with the unpadded grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .fourier import center, fft_centered, ifft_centered

__all__ = [
    "BatchProjector",
    "CtfParams",
    "InterpolationScheme",
    "NEAREST",
    "Pose",
    "Poses",
    "TRILINEAR",
    "backproject",
    "ctf_filter",
    "offset_gradient_hessian",
    "offset_terms",
    "oversample",
    "oversample_adjoint",
    "project",
    "project_jacobian_theta",
    "rewrap",
    "rotation_derivatives",
    "rotation_matrix",
]


# ------------------------------------------------------------------ rotations


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_matrix(theta) -> np.ndarray:
    """Rodrigues map from a rotation vector (axis times angle) to SO(3)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 2:
        return np.stack([rotation_matrix(t) for t in theta])
    angle = np.linalg.norm(theta)
    K = _skew(theta)
    if angle < 1e-6:
        a = 1.0 - angle**2 / 6.0
        b = 0.5 - angle**2 / 24.0
    else:
        a = np.sin(angle) / angle
        b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * (K @ K)


def rotation_derivatives(theta) -> np.ndarray:
    """``dR/dtheta_k`` for k = 0, 1, 2, stacked as (3, 3, 3)."""
    theta = np.asarray(theta, dtype=np.float64)
    angle2 = float(theta @ theta)
    E = np.eye(3)
    out = np.empty((3, 3, 3))
    if angle2 < 1e-12:
        K = _skew(theta)
        for k in range(3):
            Ek = _skew(E[k])
            out[k] = Ek + 0.5 * (Ek @ K + K @ Ek)
        return out
    R = rotation_matrix(theta)
    K = _skew(theta)
    for k in range(3):
        w = np.cross(theta, (E - R) @ E[k])
        out[k] = (theta[k] * K + _skew(w)) @ R / angle2
    return out


def rewrap(theta) -> np.ndarray:
    """Map rotation vectors onto the ball ``|theta| <= pi`` without changing the rotation."""
    theta = np.array(theta, dtype=np.float64)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    ang = np.linalg.norm(theta, axis=1)
    big = ang > np.pi
    if np.any(big):
        a = ang[big]
        wrapped = np.mod(a + np.pi, 2 * np.pi) - np.pi
        theta[big] *= (wrapped / a)[:, None]
    return theta[0] if single else theta


# ------------------------------------------------------------------ poses, CTF


@dataclass
class Pose:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    contrast: float = 1.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if np.linalg.norm(self.theta) > np.pi + 1e-9:
            raise ValueError("rotation vector norm must not exceed pi")


@dataclass
class Poses:
    """Poses of a stack, held as arrays: ``thetas`` (n, 3), ``offsets`` (n, 2), ``contrasts`` (n,)."""

    thetas: np.ndarray
    offsets: np.ndarray
    contrasts: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64).reshape(-1, 3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 2)
        self.contrasts = np.asarray(self.contrasts, dtype=np.float64).reshape(-1)
        if not (len(self.thetas) == len(self.offsets) == len(self.contrasts)):
            raise ValueError("pose arrays disagree in length")

    @classmethod
    def identity(cls, n: int) -> "Poses":
        return cls(np.zeros((n, 3)), np.zeros((n, 2)), np.ones(n))

    @classmethod
    def from_list(cls, poses: list[Pose]) -> "Poses":
        return cls(
            np.array([p.theta for p in poses]),
            np.array([p.offset for p in poses]),
            np.array([p.contrast for p in poses]),
        )

    def __len__(self):
        return len(self.contrasts)

    def __getitem__(self, idx):
        if np.isscalar(idx) or isinstance(idx, (int, np.integer)):
            return Pose(self.thetas[idx].copy(), self.offsets[idx].copy(), float(self.contrasts[idx]))
        return Poses(self.thetas[idx], self.offsets[idx], self.contrasts[idx])

    def copy(self) -> "Poses":
        return Poses(self.thetas.copy(), self.offsets.copy(), self.contrasts.copy())

    def rotations(self) -> np.ndarray:
        return rotation_matrix(self.thetas) if len(self) else np.zeros((0, 3, 3))


@dataclass
class CtfParams:
    """Radially symmetric CTF.  Lengths in angstrom."""

    defocus: float = 15000.0
    spherical_aberration: float = 2.7e7
    amplitude_contrast: float = 0.1
    wavelength: float = 0.0197
    identity_flag: bool = True

    @classmethod
    def identity(cls) -> "CtfParams":
        return cls(identity_flag=True)


def ctf_filter(ctfs, N: int, voxel_size: float = 1.0) -> np.ndarray | None:
    """Evaluate CTF images (B, N, N) for a list of :class:`CtfParams`.

    Returns ``None`` when every entry is the identity filter.
    """
    if ctfs is None:
        return None
    if isinstance(ctfs, CtfParams):
        ctfs = [ctfs]
    if all(c.identity_flag for c in ctfs):
        return None
    fa, fb = np.meshgrid(np.arange(N) - center(N), np.arange(N) - center(N), indexing="ij")
    s2 = (fa**2 + fb**2) / (N * voxel_size) ** 2
    out = np.ones((len(ctfs), N, N))
    for i, c in enumerate(ctfs):
        if c.identity_flag:
            continue
        lam = c.wavelength
        gamma = 2 * np.pi * (-0.5 * c.defocus * lam * s2 + 0.25 * c.spherical_aberration * lam**3 * s2**2)
        w = c.amplitude_contrast
        out[i] = -(np.sqrt(1 - w**2) * np.sin(gamma) + w * np.cos(gamma))
    return out


# ------------------------------------------------------------------ schemes


@dataclass(frozen=True)
class InterpolationScheme:
    kind: str = "trilinear"
    oversampling: int | None = None

    def __post_init__(self):
        if self.kind not in ("nearest", "trilinear"):
            raise ValueError(f"unknown interpolation kind {self.kind!r}")
        if self.oversampling is None:
            object.__setattr__(self, "oversampling", 2 if self.kind == "trilinear" else 1)
        if int(self.oversampling) < 1:
            raise ValueError("oversampling must be >= 1")


TRILINEAR = InterpolationScheme("trilinear", 2)
NEAREST = InterpolationScheme("nearest", 1)


def oversample(vols: np.ndarray, os: int) -> np.ndarray:
    """Zero-pad volumes (..., N, N, N) in real space to ``os*N`` and transform back."""
    vols = np.asarray(vols, dtype=np.complex128)
    if os == 1:
        return vols.copy()
    N = vols.shape[-1]
    M = os * N
    lo = center(M) - center(N)
    hi = M - N - lo
    real = ifft_centered(vols, axes=(-3, -2, -1))
    pad = [(0, 0)] * (vols.ndim - 3) + [(lo, hi)] * 3
    return fft_centered(np.pad(real, pad), axes=(-3, -2, -1)) * os**1.5


def oversample_adjoint(vols_os: np.ndarray, os: int) -> np.ndarray:
    vols_os = np.asarray(vols_os, dtype=np.complex128)
    if os == 1:
        return vols_os.copy()
    M = vols_os.shape[-1]
    N = M // os
    lo = center(M) - center(N)
    real = ifft_centered(vols_os, axes=(-3, -2, -1))[..., lo : lo + N, lo : lo + N, lo : lo + N]
    return fft_centered(real, axes=(-3, -2, -1)) * os**1.5


# ------------------------------------------------------------------ batch operator


class BatchProjector:
    """The operators ``P_i = a_i C_i T_i S_i`` for a batch of images.

    Images are handled flattened: an image batch is (B, N*N), and stacks of
    per-image vectors such as ``P_i V`` are (B, N*N, K).
    """

    def __init__(self, N, thetas, offsets=None, contrasts=None, ctf=None, scheme=TRILINEAR, use_numba=None):
        thetas = np.asarray(thetas, dtype=np.float64).reshape(-1, 3)
        B = len(thetas)
        offsets = np.zeros((B, 2)) if offsets is None else np.asarray(offsets, dtype=np.float64).reshape(B, 2)
        contrasts = np.ones(B) if contrasts is None else np.asarray(contrasts, dtype=np.float64).reshape(B)
        self.N, self.B, self.scheme = N, B, scheme
        self.os = int(scheme.oversampling)
        self.M = self.os * N
        self.use_numba = use_numba
        self.thetas = thetas
        f = np.arange(N) - center(N)
        fa, fb = np.meshgrid(f, f, indexing="ij")
        self.plane = np.stack([fa.ravel(), fb.ravel()], axis=1).astype(np.float64)  # (P, 2)
        self.R = rotation_matrix(thetas) if B else np.zeros((0, 3, 3))
        # rotated sample points in frequency units, (B, P, 3)
        self.points = np.einsum("bdj,pj->bpd", self.R[:, :, :2], self.plane)
        self.coords = (self.os * self.points + center(self.M)).reshape(-1, 3)
        phase = np.exp(-2j * np.pi * (offsets @ self.plane.T) / N)  # (B, P)
        filt = contrasts[:, None] * phase
        if ctf is not None:
            filt = filt * np.asarray(ctf).reshape(B, -1)
        self.filt = filt

    @classmethod
    def from_poses(cls, N, poses: Poses, ctf=None, scheme=TRILINEAR, use_numba=None):
        return cls(N, poses.thetas, poses.offsets, poses.contrasts, ctf, scheme, use_numba)

    @property
    def P(self):
        return self.N * self.N

    def prepare(self, vols):
        """Oversample volumes (K, N, N, N) for repeated use."""
        return oversample(vols, self.os)

    def forward_prepared(self, vols_os):
        K = vols_os.shape[0]
        g = _kernels.gather(vols_os, self.coords, self.scheme.kind, self.use_numba)
        return g.reshape(K, self.B, self.P).transpose(1, 2, 0) * self.filt[:, :, None]

    def forward(self, vols):
        """Project volumes (K, N, N, N) -> (B, P, K)."""
        return self.forward_prepared(self.prepare(vols))

    def adjoint_prepared(self, imgs):
        """Back-project (B, P, K) into oversampled volumes (K, M, M, M)."""
        K = imgs.shape[2]
        vals = (np.conj(self.filt)[:, :, None] * imgs).transpose(2, 0, 1).reshape(K, -1)
        return _kernels.scatter(vals, self.coords, self.M, self.scheme.kind, use_numba=self.use_numba)

    def adjoint(self, imgs):
        return oversample_adjoint(self.adjoint_prepared(imgs), self.os)

    def forward_with_jacobian(self, vols_os):
        """Projections (B, P, K) and their theta-derivatives (B, P, K, 3)."""
        if self.scheme.kind != "trilinear":
            raise ValueError("rotation derivatives need trilinear interpolation")
        K = vols_os.shape[0]
        val, grad = _kernels.gather_grad(vols_os, self.coords, self.use_numba)
        val = val.reshape(K, self.B, self.P).transpose(1, 2, 0) * self.filt[:, :, None]
        grad = grad.reshape(K, self.B, self.P, 3)
        dR = np.stack([rotation_derivatives(t) for t in self.thetas])  # (B, 3(k), 3, 3)
        # d(points)/d theta_k, (B, P, 3(k), 3(d))
        dpts = np.einsum("bkdj,pj->bpkd", dR[:, :, :, :2], self.plane) * self.os
        jac = np.einsum("nbpd,bpkd->bpnk", grad, dpts) * self.filt[:, :, None, None]
        return val, jac


# ------------------------------------------------------------------ single-image API


def _ctf_image(ctf, N, voxel_size):
    c = ctf_filter(ctf, N, voxel_size) if ctf is not None else None
    return None if c is None else c[0]


def project(vol, pose: Pose, ctf: CtfParams | None = None, scheme=TRILINEAR, voxel_size: float = 1.0):
    vol = np.asarray(vol)
    N = vol.shape[-1]
    if vol.shape != (N, N, N):
        raise ValueError("volume must be cubic")
    c = _ctf_image(ctf, N, voxel_size)
    op = BatchProjector(N, pose.theta[None], pose.offset[None], [pose.contrast], None if c is None else c[None], scheme)
    return op.forward(vol[None])[0, :, 0].reshape(N, N)


def backproject(img, pose: Pose, ctf: CtfParams | None = None, scheme=TRILINEAR, voxel_size: float = 1.0):
    img = np.asarray(img)
    N = img.shape[-1]
    c = _ctf_image(ctf, N, voxel_size)
    op = BatchProjector(N, pose.theta[None], pose.offset[None], [pose.contrast], None if c is None else c[None], scheme)
    return op.adjoint(img.reshape(1, -1, 1))[0]


def project_jacobian_theta(vol, pose: Pose, ctf: CtfParams | None = None, scheme=TRILINEAR, voxel_size=1.0):
    """Derivatives of :func:`project` w.r.t. the three rotation-vector components."""
    if scheme.kind != "trilinear":
        raise ValueError("nearest-neighbour projection is not differentiable in theta")
    vol = np.asarray(vol)
    N = vol.shape[-1]
    c = _ctf_image(ctf, N, voxel_size)
    op = BatchProjector(N, pose.theta[None], pose.offset[None], [pose.contrast], None if c is None else c[None], scheme)
    _, jac = op.forward_with_jacobian(op.prepare(vol[None]))
    return [jac[0, :, 0, k].reshape(N, N) for k in range(3)]


# ------------------------------------------------------------------ offsets


def offset_terms(images, model_images, apply_Q, offsets):
    """Value, gradient and Hessian in the offsets of ``f(t) = r(t)^H Q r(t)``.

    ``r(t) = exp(2 pi i f.t/N) * Y - m`` is the residual expressed in the
    unshifted frame, where ``m`` is the model prediction before the
    translation phase.  ``apply_Q`` maps (B, P) -> (B, P) and must be
    Hermitian; ``offsets`` is (B, 2).  Returns arrays (B,), (B, 2), (B, 2, 2).
    """
    images = np.asarray(images).reshape(len(offsets), -1)
    m = np.asarray(model_images).reshape(images.shape)
    N = int(round(np.sqrt(images.shape[1])))
    f = np.arange(N) - center(N)
    fa, fb = np.meshgrid(f, f, indexing="ij")
    w = 2 * np.pi * np.stack([fa.ravel(), fb.ravel()]) / N  # (2, P)
    shifted = np.exp(1j * (offsets @ w)) * images
    r = shifted - m
    Qr = apply_Q(r)
    value = np.real(np.sum(np.conj(r) * Qr, axis=1))
    dr = 1j * w[None, :, :] * shifted[:, None, :]  # (B, 2, P)
    Qdr = np.stack([apply_Q(dr[:, d]) for d in range(2)], axis=1)
    grad = 2 * np.real(np.einsum("bp,bdp->bd", np.conj(r), Qdr))
    hess = 2 * np.real(np.einsum("bdp,bep->bde", np.conj(dr), Qdr))
    # second derivative of the residual: -w_d w_e * shifted
    second = np.einsum("dp,ep,bp->bdep", w, w, -shifted)
    hess += 2 * np.real(np.einsum("bp,bdep->bde", np.conj(Qr), second))
    return value, grad, hess


def offset_gradient_hessian(image, model_image, apply_Q, offset):
    """Single-image version of :func:`offset_terms`."""
    v, g, h = offset_terms(
        np.asarray(image)[None], np.asarray(model_image)[None], apply_Q, np.asarray(offset, float)[None]
    )
    return v[0], g[0], h[0]
