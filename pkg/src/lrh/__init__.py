"""Mean and low-rank covariance estimation from tomographic Fourier projections."""

from .fourier import ShellIndex, build_shells, fsc, lowpass
from .metrics import cluster_accuracy, global_align, pose_errors, subspace_angles
from .objectives import LowRankModel, latent_coordinates, ls_gradient, ls_objective, ml_gradient, ml_objective
from .optimizer import ConfigError, DivergenceError, FitResult, OptimConfig, fit, orthogonalize, refresh_mean
from .projection import NEAREST, TRILINEAR, BatchProjector, CtfParams, InterpolationScheme, Pose, Poses
from .regularization import build_regularizer, covar_fsc
from .simulator import GroundTruth, ParticleStack, default_phantom, simulate_stack, synthesize_volumes

__version__ = "0.1.0"
