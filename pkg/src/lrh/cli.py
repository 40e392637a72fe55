"""Command-line interface: ``lrh simulate | estimate | embed | report``.

Settings come from a ``key = value`` config document (``--config``) and
from flags; flags win.  Exit codes: 1 configuration error, 2 I/O error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .fourier import fsc
from .metrics import cluster_accuracy, pose_errors, subspace_angles
from .objectives import LowRankModel, latent_coordinates
from .optimizer import ConfigError, DivergenceError, OptimConfig, fit
from .projection import BatchProjector, CtfParams, InterpolationScheme
from .simulator import default_phantom, perturb_poses, simulate_stack, synthesize_volumes

log = logging.getLogger("lrh")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 1, 2, 3


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {v!r}")


# settings shared by flags and config documents: name -> (type, default)
SIM_KEYS = {
    "seed": (int, 0), "rank": (int, 2), "n": (int, 1000), "N": (int, 16), "snr": (float, 1.0),
    "latent_law": (str, "gaussian"), "latent_std": (float, 5.0), "pose_law": (str, "uniform"),
    "contrast_std": (float, 0.0), "offset_std": (float, 0.0), "rotation_error": (float, 0.0),
    "offset_error": (float, 0.0), "ctf": (_bool, False), "defocus": (float, 15000.0),
    "voxel_size": (float, 1.0), "interp": (str, "trilinear"), "oversample": (int, 0),
}
EST_KEYS = {
    "seed": (int, 0), "rank": (int, 2), "objective": (str, "ml"), "epochs": (int, 120),
    "batch_size": (int, 1024), "lr": (float, OptimConfig.learning_rate), "pose_opt": (_bool, False),
    "interp": (str, "trilinear"), "oversample": (int, 0),
}
_OPTIM_FIELDS = {f.name for f in fields(OptimConfig)} - {"scheme", "adam_betas"}


def _settings(args, keys, extra_ok=()):
    """Merge defaults, the config document and explicit flags (in that order)."""
    values = {k: d for k, (_, d) in keys.items()}
    extra = {}
    if getattr(args, "config", None):
        try:
            doc = io.parse_config(Path(args.config).read_text())
        except OSError as e:
            raise io.StackFormatError(f"cannot read config {args.config}: {e}") from e
        except ValueError as e:
            raise ConfigError(f"{args.config}: {e}") from e
        for k, v in doc.items():
            if k in keys:
                values[k] = v
            elif k in extra_ok:
                extra[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    try:
        values = {k: keys[k][0](v) for k, v in values.items()}
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return values, extra


def _scheme(kind, oversample):
    try:
        return InterpolationScheme(kind, oversample or None)
    except ValueError as e:
        raise ConfigError(str(e)) from e


# ------------------------------------------------------------------ commands


def cmd_simulate(args):
    s, _ = _settings(args, SIM_KEYS)
    if s["n"] < 1 or s["N"] < 4:
        raise ConfigError("need n >= 1 and N >= 4")
    gt = synthesize_volumes(default_phantom(s["rank"], s["seed"]), s["N"])
    gt.voxel_size = s["voxel_size"]
    ctf = CtfParams(defocus=s["defocus"], identity_flag=False) if s["ctf"] else None
    stack, truth = simulate_stack(
        gt, s["n"], snr=s["snr"], pose_law=s["pose_law"],
        contrast_law=(1.0, s["contrast_std"]) if s["contrast_std"] > 0 else None,
        latent_law=s["latent_law"], latent_std=s["latent_std"], offset_std=s["offset_std"], ctf=ctf,
        scheme=_scheme(s["interp"], s["oversample"]), seed=s["seed"],
    )
    if s["rotation_error"] > 0 or s["offset_error"] > 0:
        stack.poses = perturb_poses(truth.poses, s["rotation_error"], s["offset_error"], seed=s["seed"] + 1, contrast=1.0)
    out = Path(args.out)
    io.write_stack(out / "stack.lrhs", stack)
    io.write_truth(out / "truth", truth)
    (out / "simulate.txt").write_text(io.format_config(s))
    print(f"wrote {stack.n} images of size {stack.N} to {out / 'stack.lrhs'} (sigma2={stack.sigma2:.6g})")
    return 0


def cmd_estimate(args):
    s, extra = _settings(args, EST_KEYS, extra_ok=_OPTIM_FIELDS)
    stack = io.read_stack(args.stack)
    if stack.n == 0:
        raise ConfigError("the particle stack is empty")
    kw = {k: v for k, v in extra.items()}
    for k, v in kw.items():
        default = getattr(OptimConfig, k)
        kw[k] = _bool(v) if isinstance(default, bool) else type(default)(v) if default is not None else int(v)
    cfg = OptimConfig(
        objective=s["objective"], rank=s["rank"], epochs=s["epochs"], batch_size=s["batch_size"],
        learning_rate=s["lr"], pose_opt=s["pose_opt"], seed=s["seed"],
        scheme=_scheme(s["interp"], s["oversample"]), **kw,
    )
    truth_poses = None
    if args.truth:
        truth_poses = io.read_truth(args.truth).poses
    result = fit(stack, cfg, truth_poses=truth_poses)
    io.write_fit(args.out, result, io.format_config({**s, **extra}))
    print(f"fitted rank {cfg.rank} ({cfg.objective}); singular values {np.round(result.singular_values, 4).tolist()}")
    return 0


def cmd_embed(args):
    stack = io.read_stack(args.stack)
    bundle = io.read_fit(args.fit)
    model, sv, poses = bundle["model"], bundle["singular_values"], bundle["poses"]
    if len(poses) != stack.n:
        raise ConfigError("fit and stack describe different numbers of images")
    scaled = LowRankModel(model.mean, model.components * sv[:, None, None, None])
    scheme = _scheme(args.interp, args.oversample)
    z = np.zeros((stack.n, len(sv)))
    for s in range(0, stack.n, 256):
        idx = np.arange(s, min(stack.n, s + 256))
        op = BatchProjector.from_poses(stack.N, poses[idx], stack.ctf_images(idx), scheme)
        z[idx] = latent_coordinates(stack.images[idx], op, scaled, stack.sigma2)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_latents_csv(args.out, z)
    print(f"wrote latent coordinates of {stack.n} images to {args.out}")
    return 0


def _finite(x):
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else "undefined"
    return x


def build_report(bundle, truth, initial_poses=None, stack_poses=None) -> dict:
    """Metrics of a fit against ground truth; NaNs are reported as ``"undefined"``."""
    rep = {}
    model = bundle["model"]
    if truth.components is not None and len(truth.components):
        rep["principal_angles_deg"] = subspace_angles(model.components, truth.components).tolist()
    rep["mean_fsc"] = fsc(model.mean, truth.mean).tolist()
    rep["objective_trace"] = bundle["trace"][:, 1].tolist()
    if bundle.get("timing") is not None:
        rep["seconds_per_epoch"] = bundle["timing"].tolist()
    if truth.poses is not None:
        after = pose_errors(bundle["poses"], truth.poses)
        rep["pose_errors_after"] = after
        if initial_poses is not None:
            before = pose_errors(initial_poses, truth.poses)
            rep["pose_errors_before"] = before
            imp = {}
            for key, bkey in [("out_of_plane", "out_of_plane_mean_deg"), ("in_plane", "in_plane_mean_deg"),
                              ("rotation", "rotation_mean_deg"), ("offset", "offset_mean_px"),
                              ("contrast", "contrast_err_std")]:
                b, a = before[bkey], after[bkey]
                imp[key] = 100.0 * (b - a) / b if b > 0 else float("nan")
            rep["improvement_percent"] = imp
    if truth.labels is not None:
        k = len(np.unique(truth.labels))
        rep["cluster_accuracy"] = cluster_accuracy(bundle["latents"], truth.labels, k)
    return _finite(rep)


def cmd_report(args):
    bundle = io.read_fit(args.fit)
    truth = io.read_truth(args.truth)
    initial = io.read_stack(args.stack).poses if args.stack else None
    rep = build_report(bundle, truth, initial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep, indent=1))
    io.write_table(out / "fsc.csv", ["shell", "fsc"], [(i, v) for i, v in enumerate(rep["mean_fsc"])])
    io.write_table(out / "objective.csv", ["epoch", "objective"], list(enumerate(rep["objective_trace"])))
    if "improvement_percent" in rep:
        io.write_table(out / "improvement.csv", ["quantity", "percent"], list(rep["improvement_percent"].items()))
        for k, v in rep["improvement_percent"].items():
            print(f"{k} error improved by {v if isinstance(v, str) else f'{v:.1f}'}%")
    if "principal_angles_deg" in rep:
        print("principal angles (deg):", np.round(rep["principal_angles_deg"], 2).tolist())
    if "cluster_accuracy" in rep:
        print(f"cluster accuracy: {rep['cluster_accuracy']:.3f}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="lrh", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value settings document")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rank", type=int)
        sp.add_argument("--interp", choices=["nearest", "trilinear"])
        sp.add_argument("--oversample", type=int)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("simulate", help="write a synthetic stack and its ground truth")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--N", type=int)
    sp.add_argument("--snr", type=float)
    sp.add_argument("--latent-law", dest="latent_law", choices=["gaussian", "discrete"])
    sp.add_argument("--latent-std", dest="latent_std", type=float)
    sp.add_argument("--contrast-std", dest="contrast_std", type=float)
    sp.add_argument("--offset-std", dest="offset_std", type=float)
    sp.add_argument("--rotation-error", dest="rotation_error", type=float, help="mean perturbation, degrees")
    sp.add_argument("--offset-error", dest="offset_error", type=float, help="perturbation bound, pixels")
    sp.add_argument("--ctf", choices=["on", "off"])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="fit mean and principal components")
    common(sp)
    sp.add_argument("--stack", required=True)
    sp.add_argument("--objective", choices=["ls", "ml"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--pose-opt", dest="pose_opt", choices=["on", "off"])
    sp.add_argument("--truth", help="ground-truth directory, for the pose-error trace")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("embed", help="write per-image latent coordinates")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--stack", required=True)
    sp.add_argument("--interp", choices=["nearest", "trilinear"], default="trilinear")
    sp.add_argument("--oversample", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("report", help="metrics of a fit against ground truth")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--stack", help="stack whose poses were the starting point")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
