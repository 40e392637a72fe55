"""Synthetic ground truth and particle stacks under the linear heterogeneity model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .fourier import center, fft_centered, forward_fft_3d, lowpass
from .projection import TRILINEAR, BatchProjector, CtfParams, InterpolationScheme, Poses, ctf_filter

SNR_DEFINITION = "mean_i ||P_i X_i||^2 / (sigma^2 N^2)"


@dataclass
class Blob:
    """Isotropic Gaussian; ``center`` and ``sigma`` in units of the half box (unit ball)."""

    center: tuple[float, float, float]
    sigma: float = 0.15
    amplitude: float = 1.0


@dataclass
class Motion:
    """Rigid displacement of a group of blobs; one motion yields one component."""

    blobs: tuple[int, ...]
    direction: tuple[float, float, float]


@dataclass
class PhantomSpec:
    blobs: list[Blob]
    motions: list[Motion] = field(default_factory=list)


@dataclass
class GroundTruth:
    mean: np.ndarray  # (N, N, N) Fourier
    components: np.ndarray  # (r, N, N, N) Fourier, orthonormal
    latents: np.ndarray | None = None  # (n, r)
    poses: Poses | None = None
    ctfs: list[CtfParams] | None = None
    sigma: float | None = None
    labels: np.ndarray | None = None
    voxel_size: float = 1.0

    @property
    def N(self) -> int:
        return self.mean.shape[-1]

    @property
    def rank(self) -> int:
        return len(self.components)


@dataclass
class ParticleStack:
    images: np.ndarray  # (n, N, N) Fourier
    ctfs: list[CtfParams]
    sigma2: float
    poses: Poses  # the poses the estimator is given
    voxel_size: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) and self.images.shape[1] != self.images.shape[2]:
            raise ValueError("images must be square")

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def N(self) -> int:
        return self.images.shape[-1]

    def ctf_images(self, idx=None):
        ctfs = self.ctfs if idx is None else [self.ctfs[i] for i in np.atleast_1d(idx)]
        return ctf_filter(ctfs, self.N, self.voxel_size)

    def subset(self, idx) -> "ParticleStack":
        idx = np.asarray(idx)
        return ParticleStack(
            self.images[idx], [self.ctfs[i] for i in idx], self.sigma2, self.poses[idx], self.voxel_size, dict(self.metadata)
        )


# ------------------------------------------------------------------ volumes


def _blob_volume(blobs, N, shifts=None):
    u = (np.arange(N) - center(N)) / (N / 2)
    x, y, z = np.meshgrid(u, u, u, indexing="ij")
    vol = np.zeros((N, N, N))
    for i, b in enumerate(blobs):
        c = np.asarray(b.center, float)
        if shifts is not None and i in shifts:
            c = c + shifts[i]
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        vol += b.amplitude * np.exp(-r2 / (2 * b.sigma**2))
    return vol


def synthesize_volumes(spec: PhantomSpec, N: int, h: float = 1e-3) -> GroundTruth:
    """Mean volume and orthonormal component volumes for a blob phantom.

    Each motion contributes the central finite difference of the phantom
    along its displacement; the components are then Gram-Schmidt
    orthonormalized.  Everything is lowpassed to the Nyquist sphere.
    """
    for b in spec.blobs:
        if np.linalg.norm(b.center) > 1:
            raise ValueError("blob centres must lie inside the unit ball")
    mean = lowpass(forward_fft_3d(_blob_volume(spec.blobs, N)), np.pi)
    comps = []
    for mo in spec.motions:
        d = np.asarray(mo.direction, float)
        plus = _blob_volume(spec.blobs, N, {i: h * d for i in mo.blobs})
        minus = _blob_volume(spec.blobs, N, {i: -h * d for i in mo.blobs})
        comps.append(lowpass(forward_fft_3d((plus - minus) / (2 * h)), np.pi))
    ortho = []
    for c in comps:
        v = c.copy()
        norm0 = np.linalg.norm(v)
        for q in ortho:
            v = v - np.vdot(q, v) * q
        if norm0 == 0 or np.linalg.norm(v) < 1e-6 * norm0:
            raise ValueError("degenerate phantom: components are linearly dependent")
        ortho.append(v / np.linalg.norm(v))
    components = np.array(ortho) if ortho else np.zeros((0, N, N, N), complex)
    return GroundTruth(mean=mean, components=components)


def default_phantom(rank: int, seed: int = 0, sigma: float = 0.25) -> PhantomSpec:
    """``rank + 2`` blobs in the ball of radius 0.5; motion ``j`` moves blob ``j``.

    For ``rank <= 2`` the layout is fixed (it does not depend on ``seed``).
    """
    if rank < 0:
        raise ValueError("rank must be non-negative")
    fixed = [(0.3, 0.0, 0.0), (-0.3, 0.1, 0.0), (0.0, -0.3, 0.2), (0.0, 0.3, -0.2)]
    if rank <= 2:
        centers = fixed
        directions = [(1.0, 0.0, 0.0), (0.0, 0.0, 1.0)][:rank]
        blobs = [Blob(c, sigma if i < 2 else 0.88 * sigma, 1.0 if i < 2 else 0.8) for i, c in enumerate(centers)]
        motions = [Motion((0,), directions[0])] if rank >= 1 else []
        if rank == 2:
            motions.append(Motion((2, 3), directions[1]))
        return PhantomSpec(blobs, motions)
    rng = np.random.default_rng(seed)
    blobs = []
    for _ in range(rank + 2):
        d = rng.normal(size=3)
        blobs.append(Blob(tuple(0.5 * rng.uniform() ** (1 / 3) * d / np.linalg.norm(d)), sigma, rng.uniform(0.7, 1.0)))
    motions = []
    for j in range(rank):
        d = rng.normal(size=3)
        motions.append(Motion((j,), tuple(d / np.linalg.norm(d))))
    return PhantomSpec(blobs, motions)


def random_rotvecs(rngs) -> np.ndarray:
    quats = np.array([r.normal(size=4) for r in rngs])
    return Rotation.from_quat(quats).as_rotvec()


# ------------------------------------------------------------------ stacks


def simulate_stack(
    gt: GroundTruth,
    n: int,
    *,
    snr: float | None = None,
    sigma: float | None = None,
    pose_law: str = "uniform",
    contrast_law: tuple[float, float] | None = None,
    latent_law: str = "gaussian",
    latent_std=1.0,
    offset_std: float = 0.0,
    ctf: CtfParams | None = None,
    scheme: InterpolationScheme = TRILINEAR,
    seed: int = 0,
    batch: int = 512,
) -> tuple[ParticleStack, GroundTruth]:
    """Draw ``Y_i = P_i (X_0 + sum_j z_ij v_j) + e_i``.

    Noise is white in real space and transformed, so it respects Hermitian
    symmetry; with the unitary transform its per-coefficient variance equals
    ``sigma**2``.  Either ``sigma`` or ``snr`` fixes the noise level (see
    :data:`SNR_DEFINITION`).  ``latent_law="discrete"`` draws one-hot
    ``z`` scaled by ``latent_std`` (one state per component).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if (snr is None) == (sigma is None):
        raise ValueError("give exactly one of snr, sigma")
    N, r = gt.N, gt.rank
    children = np.random.SeedSequence(seed).spawn(n)
    rngs = [np.random.default_rng(c) for c in children]

    if pose_law == "uniform":
        thetas = random_rotvecs(rngs)
    elif pose_law == "identity":
        thetas = np.zeros((n, 3))
    else:
        raise ValueError(f"unknown pose law {pose_law!r}")
    lat_std = np.broadcast_to(np.asarray(latent_std, float), (r,))
    labels = None
    if latent_law == "gaussian":
        latents = np.array([rg.normal(size=r) for rg in rngs]).reshape(n, r) * lat_std
    elif latent_law == "discrete":
        labels = np.array([rg.integers(r) for rg in rngs]) if r else np.zeros(n, int)
        latents = np.zeros((n, r))
        latents[np.arange(n), labels] = lat_std[labels] if r else 0
    else:
        raise ValueError(f"unknown latent law {latent_law!r}")
    if contrast_law is None:
        contrasts = np.ones(n)
    else:
        contrasts = np.array([rg.normal(contrast_law[0], contrast_law[1]) for rg in rngs])
    offsets = np.array([rg.uniform(-1, 1, size=2) * offset_std for rg in rngs]).reshape(n, 2)
    noise_real = np.array([rg.normal(size=(N, N)) for rg in rngs])
    noise = fft_centered(noise_real, axes=(-2, -1))

    ctfs = [ctf if ctf is not None else CtfParams.identity() for _ in range(n)]
    poses = Poses(thetas, offsets, contrasts)
    vols = np.concatenate([gt.mean[None], gt.components])
    clean = np.empty((n, N, N), dtype=np.complex128)
    for s in range(0, n, batch):
        idx = np.arange(s, min(n, s + batch))
        cimg = ctf_filter([ctfs[i] for i in idx], N, gt.voxel_size)
        op = BatchProjector.from_poses(N, poses[idx], cimg, scheme)
        proj = op.forward(vols)  # (B, P, r + 1)
        img = proj[:, :, 0] + np.einsum("bpj,bj->bp", proj[:, :, 1:], latents[idx])
        clean[idx] = img.reshape(-1, N, N)
    if sigma is None:
        signal = np.mean(np.sum(np.abs(clean) ** 2, axis=(1, 2)))
        sigma = float(np.sqrt(signal / (snr * N * N))) if snr > 0 else 0.0
    images = clean + sigma * noise
    truth = GroundTruth(
        mean=gt.mean, components=gt.components, latents=latents, poses=poses, ctfs=ctfs,
        sigma=float(sigma), labels=labels, voxel_size=gt.voxel_size,
    )
    meta = {"seed": seed, "snr_definition": SNR_DEFINITION, "snr": snr, "offset_units": "pixels"}
    stack = ParticleStack(images, ctfs, float(sigma) ** 2, poses.copy(), gt.voxel_size, meta)
    return stack, truth


def perturb_poses(
    poses: Poses, rotation_error_deg: float, offset_error_px: float, seed: int = 0, contrast: float | None = None
) -> Poses:
    """Compose each rotation with a random rotation and jitter the offsets.

    The perturbation rotation vector has iid normal components scaled so
    that its mean magnitude (the geodesic error) is ``rotation_error_deg``.
    Offsets move uniformly within ``+-offset_error_px`` per axis.  A given
    ``contrast`` replaces every contrast (an uninformed starting guess).
    """
    if rotation_error_deg < 0 or offset_error_px < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    n = len(poses)
    # mean of a chi(3) variable is 2 sqrt(2 / pi)
    scale = np.deg2rad(rotation_error_deg) / (2 * np.sqrt(2 / np.pi))
    omega = rng.normal(size=(n, 3)) * scale
    jitter = rng.uniform(-1, 1, size=(n, 2)) * offset_error_px
    if rotation_error_deg == 0:
        thetas = poses.thetas.copy()
    else:
        rot = Rotation.from_rotvec(poses.thetas) * Rotation.from_rotvec(omega)
        thetas = rot.as_rotvec()
    contrasts = poses.contrasts.copy() if contrast is None else np.full(n, float(contrast))
    return Poses(thetas, poses.offsets + jitter, contrasts)
