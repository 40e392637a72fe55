"""Grid conventions and Fourier-domain primitives.

Every volume and image in this package lives on a *centered* grid: along each
axis of length ``N`` the zero frequency sits at index ``N // 2`` and the
integer frequency of index ``k`` is ``k - N // 2``.  Transforms are unitary
(``norm="ortho"``) so Parseval holds without extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShellIndex",
    "build_shells",
    "center",
    "fft_centered",
    "forward_fft_3d",
    "freq_grid",
    "fsc",
    "ifft_centered",
    "inverse_fft_3d",
    "lowpass",
    "lowpass_mask",
    "radius_grid",
]


def center(n: int) -> int:
    """Index of the zero frequency on an axis of length ``n``."""
    return n // 2


def fft_centered(x: np.ndarray, axes=None) -> np.ndarray:
    axes = tuple(range(x.ndim)) if axes is None else axes
    return np.fft.fftshift(
        np.fft.fftn(np.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def ifft_centered(x: np.ndarray, axes=None) -> np.ndarray:
    axes = tuple(range(x.ndim)) if axes is None else axes
    return np.fft.fftshift(
        np.fft.ifftn(np.fft.ifftshift(x, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def forward_fft_3d(volume: np.ndarray) -> np.ndarray:
    """Unitary centered 3-D transform of a cubic real-space volume."""
    volume = np.asarray(volume)
    if volume.ndim != 3 or len(set(volume.shape)) != 1:
        raise ValueError(f"expected a cubic volume, got shape {volume.shape}")
    return fft_centered(volume)


def inverse_fft_3d(fvol: np.ndarray, real: bool = True) -> np.ndarray:
    fvol = np.asarray(fvol)
    if fvol.ndim != 3 or len(set(fvol.shape)) != 1:
        raise ValueError(f"expected a cubic volume, got shape {fvol.shape}")
    out = ifft_centered(fvol)
    return out.real if real else out


def freq_grid(N: int, ndim: int = 3) -> list[np.ndarray]:
    """Integer frequency coordinates, ``indexing="ij"``, one array per axis."""
    f = np.arange(N) - center(N)
    return np.meshgrid(*([f] * ndim), indexing="ij")


def radius_grid(N: int, ndim: int = 3) -> np.ndarray:
    return np.sqrt(sum(g.astype(np.float64) ** 2 for g in freq_grid(N, ndim)))


@dataclass(frozen=True)
class ShellIndex:
    """Radial shell labels of a centered grid.

    ``labels[f]`` is the shell of frequency ``f``: shell ``i`` holds the
    frequencies with ``|f|`` in ``[i - 0.5, i + 0.5]``.  Since ``|f|^2`` is an
    integer no frequency sits exactly on a band edge.
    """

    N: int
    labels: np.ndarray  # (N, N, N) int
    count: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def shell(self, i: int) -> np.ndarray:
        """Flat indices of the frequencies in shell ``i``."""
        return np.flatnonzero(self.labels.ravel() == i)

    def shell_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` (real or complex, trailing shape ``(N, N, N)``) per shell."""
        values = np.asarray(values)
        lead = values.shape[:-3]
        flat = values.reshape(-1, self.N**3)
        lab = self.labels.ravel()
        if np.iscomplexobj(flat):
            out = np.stack(
                [
                    np.bincount(lab, w.real, self.count) + 1j * np.bincount(lab, w.imag, self.count)
                    for w in flat
                ]
            )
        else:
            out = np.stack([np.bincount(lab, w, self.count) for w in flat])
        return out.reshape(lead + (self.count,))

    def broadcast(self, per_shell: np.ndarray) -> np.ndarray:
        """Expand per-shell values into a volume."""
        return np.asarray(per_shell)[self.labels]


def build_shells(N: int) -> ShellIndex:
    if N < 2:
        raise ValueError("N must be at least 2")
    labels = np.rint(radius_grid(N, 3)).astype(np.int64)
    return ShellIndex(N=N, labels=labels, count=int(labels.max()) + 1)


def lowpass_mask(N: int, cutoff: float, ndim: int = 3) -> np.ndarray:
    """Boolean mask of frequencies kept by a lowpass at ``cutoff`` radians/sample."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    return radius_grid(N, ndim) * (2 * np.pi / N) <= cutoff * (1 + 1e-12)


def lowpass(vol: np.ndarray, cutoff: float) -> np.ndarray:
    """Zero every coefficient with ``|f| * 2 pi / N > cutoff``.

    Works on a single volume or a stack whose last three axes are the grid.
    """
    vol = np.asarray(vol)
    N = vol.shape[-1]
    return np.where(lowpass_mask(N, cutoff), vol, 0)


def fsc(vol_a: np.ndarray, vol_b: np.ndarray, shells: ShellIndex | None = None) -> np.ndarray:
    """Fourier shell correlation per shell; NaN marks shells with no energy."""
    vol_a = np.asarray(vol_a)
    vol_b = np.asarray(vol_b)
    if vol_a.shape != vol_b.shape:
        raise ValueError("volumes must share a grid")
    shells = build_shells(vol_a.shape[-1]) if shells is None else shells
    cross = shells.shell_sums(vol_a * np.conj(vol_b)).real
    na = shells.shell_sums(np.abs(vol_a) ** 2)
    nb = shells.shell_sums(np.abs(vol_b) ** 2)
    denom = np.sqrt(na * nb)
    out = np.full(shells.count, np.nan)
    ok = denom > 0
    out[ok] = np.clip(cross[ok] / denom[ok], -1.0, 1.0)
    return out
