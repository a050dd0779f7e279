"""Topology-encoding probabilistic atlases with jointly learned affine
registration for segmentation, plus the synthetic benchmark that validates
the mechanism end to end."""

from .atlas import (
    Atlas,
    build_disc_cup_atlas,
    build_synapse_atlas,
    load_atlas,
    rescale_atlas,
    save_atlas,
)
from .benchmark import BenchmarkSetup, ablation_benchmark, default_benchmark, run_benchmark
from .estimator import AtlasSegmenter
from .network import Architecture, forward, init_params, loss_and_gradients, predict
from .posewarp import (
    Pose,
    angle_axis_to_matrix,
    pose_errors,
    pose_loss,
    pose_to_affine,
    warp,
    warp_backward,
)
from .synth import SceneParams, Sample, generate, split
from .tensorio import load_tgrid, save_tgrid
from .topology import (
    TopologySpec,
    builtin_spec,
    check_topology,
    connected_components,
    jaccard,
    ter,
)
from .training import TrainConfig, evaluate, train

__all__ = [
    "Architecture",
    "Atlas",
    "AtlasSegmenter",
    "BenchmarkSetup",
    "ablation_benchmark",
    "default_benchmark",
    "run_benchmark",
    "Pose",
    "Sample",
    "SceneParams",
    "TopologySpec",
    "TrainConfig",
    "angle_axis_to_matrix",
    "build_disc_cup_atlas",
    "build_synapse_atlas",
    "builtin_spec",
    "check_topology",
    "connected_components",
    "evaluate",
    "forward",
    "generate",
    "init_params",
    "jaccard",
    "load_atlas",
    "load_tgrid",
    "loss_and_gradients",
    "pose_errors",
    "pose_loss",
    "pose_to_affine",
    "predict",
    "rescale_atlas",
    "save_atlas",
    "save_tgrid",
    "split",
    "ter",
    "train",
    "warp",
    "warp_backward",
]

__version__ = "0.1.0"
