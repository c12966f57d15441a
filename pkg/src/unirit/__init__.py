"""Two-stage (rigid, then non-rigid) point cloud registration with numpy."""

from .geom import (
    RigidTransform,
    apply_displacement,
    apply_rigid,
    centroid,
    compose,
    denormalize,
    normalize,
    read_cloud,
    write_cloud,
)
from .gmm import GaussianMixture, divergence_matrix, fit_em, mc_divergence, rigid_pushforward
from .metrics import LossWeights, MetricReport, chamfer, loss_global, loss_rigid, loss_total, rmse_corresponded
from .model import UniRiTConfig, UniRiTModel
from .synth import PairSpec, make_pair, tps_apply, tps_fit
from .training import load_checkpoint, register, save_checkpoint, train

__version__ = "0.1.0"
