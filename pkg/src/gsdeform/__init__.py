"""Deformable 3D Gaussian splatting with geometry-aware deformation features, on CPU."""
from .data import Dataset, Frame, PRESETS, generate_toy_scene, load_dnerf_dataset
from .deformation import DeformationModel, DeformedGaussians, apply_deformation
from .errors import (
    ConsistencyError,
    ContractError,
    DataError,
    DimensionError,
    GSDError,
    NumericError,
    ParameterError,
    RangeError,
    RotationDegeneracyError,
)
from .estimator import DeformableGaussianSplatting
from .gaussians import GaussianCloud, build_covariance, eval_sh_color, rot6d_to_matrix
from .geometry import GeometryEncoder, SparseUNet, fuse_features, voxelize
from .metrics import psnr, ssim
from .rasterizer import Camera, project, rasterize, rasterize_backward, render
from .training import TrainConfig, Trainer, density_control, train_loop

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "ConsistencyError",
    "ContractError",
    "DataError",
    "Dataset",
    "DeformableGaussianSplatting",
    "DeformationModel",
    "DeformedGaussians",
    "DimensionError",
    "Frame",
    "GSDError",
    "GaussianCloud",
    "GeometryEncoder",
    "NumericError",
    "PRESETS",
    "ParameterError",
    "RangeError",
    "RotationDegeneracyError",
    "SparseUNet",
    "TrainConfig",
    "Trainer",
    "apply_deformation",
    "build_covariance",
    "density_control",
    "eval_sh_color",
    "fuse_features",
    "generate_toy_scene",
    "load_dnerf_dataset",
    "project",
    "psnr",
    "rasterize",
    "rasterize_backward",
    "render",
    "rot6d_to_matrix",
    "ssim",
    "train_loop",
    "voxelize",
]
