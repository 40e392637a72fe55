"""Stack files, result bundles and key-value config documents.

A stack file holds a fixed little-endian header::

    magic "LRHS" | version u32 | n u64 | N u32 | flags u32 | sigma2 f64 | voxel_size f64

followed by ``n`` real-space images of ``N*N`` little-endian float32 pixels.
A JSON sidecar (``<path>.json``) carries per-image poses, CTF parameters
and provenance.  Offsets are in pixels.

CSV tables use a header row and a fixed column order:

* ``poses.csv``: index, theta_x, theta_y, theta_z, offset_x, offset_y, contrast
* ``latents.csv``: index, z_0 .. z_{r-1}
* ``trace.csv``: epoch, objective, cutoff
* ``timing.csv``: epoch, seconds (the only file that differs between identical runs)
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .fourier import fft_centered, ifft_centered
from .objectives import LowRankModel
from .projection import CtfParams, Poses
from .simulator import GroundTruth, ParticleStack

MAGIC = b"LRHS"
VERSION = 1
HEADER = struct.Struct("<4sIQIIdd")
FLAG_CTF = 1


class StackFormatError(OSError):
    pass


# ------------------------------------------------------------------ stacks


def stack_to_real(images) -> np.ndarray:
    """Fourier images (n, N, N) -> real-space float32 pixels."""
    return np.ascontiguousarray(np.real(ifft_centered(images, axes=(-2, -1))), dtype="<f4")


def real_to_stack(pixels) -> np.ndarray:
    return fft_centered(np.asarray(pixels, dtype=np.float64), axes=(-2, -1))


def write_stack(path, stack: ParticleStack, pixels=None):
    """Write ``stack`` (or the given real-space ``pixels``) plus its JSON sidecar."""
    path = Path(path)
    pix = stack_to_real(stack.images) if pixels is None else np.ascontiguousarray(pixels, dtype="<f4")
    n = len(pix)
    N = pix.shape[-1] if n else stack.N if len(stack.images) else 0
    flags = FLAG_CTF if any(not c.identity_flag for c in stack.ctfs) else 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, N, flags, float(stack.sigma2), float(stack.voxel_size)))
        fh.write(pix.tobytes())
    meta = {
        "poses": [
            {"theta": stack.poses.thetas[i].tolist(), "offset": stack.poses.offsets[i].tolist(),
             "contrast": float(stack.poses.contrasts[i])}
            for i in range(n)
        ],
        "ctf": [asdict(c) for c in stack.ctfs],
        "provenance": stack.metadata,
    }
    with open(_sidecar(path), "w") as fh:
        json.dump(meta, fh, indent=1)


def read_stack_pixels(path):
    """Header fields and the raw float32 pixels of a stack file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise StackFormatError(f"cannot read {path}: {e}") from e
    if len(raw) < HEADER.size:
        raise StackFormatError(f"{path}: truncated header")
    magic, version, n, N, flags, sigma2, voxel = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise StackFormatError(f"{path}: not a stack file")
    if version != VERSION:
        raise StackFormatError(f"{path}: unsupported version {version}")
    expected = HEADER.size + 4 * n * N * N
    if len(raw) != expected:
        raise StackFormatError(f"{path}: payload is {len(raw) - HEADER.size} bytes, header implies {expected - HEADER.size}")
    pix = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n, N, N)
    header = {"n": n, "N": N, "flags": flags, "sigma2": sigma2, "voxel_size": voxel, "version": version}
    return header, pix


def read_stack(path) -> ParticleStack:
    path = Path(path)
    header, pix = read_stack_pixels(path)
    n = header["n"]
    try:
        with open(_sidecar(path)) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise StackFormatError(f"{path}: bad or missing sidecar: {e}") from e
    if len(meta["poses"]) != n or len(meta["ctf"]) != n:
        raise StackFormatError(f"{path}: sidecar describes a different number of images")
    poses = Poses(
        np.array([p["theta"] for p in meta["poses"]], float).reshape(n, 3),
        np.array([p["offset"] for p in meta["poses"]], float).reshape(n, 2),
        np.array([p["contrast"] for p in meta["poses"]], float).reshape(n),
    )
    ctfs = [CtfParams(**c) for c in meta["ctf"]]
    images = real_to_stack(pix) if n else np.zeros((0, header["N"], header["N"]), complex)
    return ParticleStack(images, ctfs, header["sigma2"], poses, header["voxel_size"], meta.get("provenance", {}))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


# ------------------------------------------------------------------ tables


def write_poses_csv(path, poses: Poses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "theta_x", "theta_y", "theta_z", "offset_x", "offset_y", "contrast"])
        for i in range(len(poses)):
            w.writerow([i, *_floats(poses.thetas[i]), *_floats(poses.offsets[i]), *_floats([poses.contrasts[i]])])


def read_poses_csv(path) -> Poses:
    rows = _read_rows(path)
    a = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(-1, 6)
    return Poses(a[:, :3].copy(), a[:, 3:5].copy(), a[:, 5].copy())


def write_latents_csv(path, latents):
    latents = np.asarray(latents).reshape(len(latents), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"z_{j}" for j in range(latents.shape[1])])
        for i, z in enumerate(latents):
            w.writerow([i, *_floats(z)])


def read_latents_csv(path) -> np.ndarray:
    rows = _read_rows(path)
    return np.array([[float(x) for x in r[1:]] for r in rows])


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _floats(values):
    return [repr(float(x)) for x in values]


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


# ------------------------------------------------------------------ volumes and bundles


def write_volumes(path, vols):
    """Fourier volumes (K, N, N, N) -> real-space float32 ``.npy``."""
    np.save(path, np.real(ifft_centered(np.asarray(vols), axes=(-3, -2, -1))).astype("<f4"))


def read_volumes(path) -> np.ndarray:
    real = np.load(path).astype(np.float64)
    return fft_centered(real + 0j, axes=(-3, -2, -1))


def write_fit(out_dir, result, config_text: str = ""):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volumes(out / "mean.npy", result.model.mean[None])
    write_volumes(out / "components.npy", result.model.components)
    write_table(out / "singular_values.csv", ["index", "value"], [(j, float(s)) for j, s in enumerate(result.singular_values)])
    write_poses_csv(out / "poses.csv", result.poses)
    write_latents_csv(out / "latents.csv", result.latents)
    write_table(
        out / "trace.csv", ["epoch", "objective", "cutoff"],
        [(e, float(v), float(c)) for e, (v, c) in enumerate(zip(result.objective_trace, result.cutoffs))],
    )
    write_table(out / "timing.csv", ["epoch", "seconds"], [(e, float(t)) for e, t in enumerate(result.epoch_times)])
    if result.pose_error_trace:
        keys = list(result.pose_error_trace[0])
        write_table(out / "pose_error_trace.csv", ["epoch"] + keys,
                    [[e] + [float(d[k]) for k in keys] for e, d in enumerate(result.pose_error_trace)])
    (out / "config.txt").write_text(config_text)


def read_fit(out_dir):
    """Model, singular values, poses, latents and trace rows of a fit bundle."""
    out = Path(out_dir)
    mean = read_volumes(out / "mean.npy")[0]
    comps = read_volumes(out / "components.npy")
    sv = np.array([float(r[1]) for r in _read_rows(out / "singular_values.csv")])
    trace = np.array([[float(x) for x in r] for r in _read_rows(out / "trace.csv")]).reshape(-1, 3)
    timing = np.array([float(r[1]) for r in _read_rows(out / "timing.csv")]) if (out / "timing.csv").exists() else None
    return {
        "model": LowRankModel(mean, comps),
        "singular_values": sv,
        "poses": read_poses_csv(out / "poses.csv"),
        "latents": read_latents_csv(out / "latents.csv"),
        "trace": trace,
        "timing": timing,
    }


def write_truth(out_dir, gt: GroundTruth):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volumes(out / "mean.npy", gt.mean[None])
    write_volumes(out / "components.npy", gt.components)
    if gt.poses is not None:
        write_poses_csv(out / "poses.csv", gt.poses)
    if gt.latents is not None:
        write_latents_csv(out / "latents.csv", gt.latents)
    if gt.labels is not None:
        write_table(out / "labels.csv", ["index", "label"], list(enumerate(gt.labels.tolist())))


def read_truth(out_dir) -> GroundTruth:
    out = Path(out_dir)
    gt = GroundTruth(read_volumes(out / "mean.npy")[0], read_volumes(out / "components.npy"))
    if (out / "poses.csv").exists():
        gt.poses = read_poses_csv(out / "poses.csv")
    if (out / "latents.csv").exists():
        gt.latents = read_latents_csv(out / "latents.csv")
    if (out / "labels.csv").exists():
        gt.labels = np.array([int(r[1]) for r in _read_rows(out / "labels.csv")])
    return gt


# ------------------------------------------------------------------ config documents


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Values stay strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
