"""Learned light transport on surface point clouds.

The package trains a two-stage operator: an encoder-decoder over a
Poisson-disk point hierarchy that turns per-point scene attributes into
latent codes, followed by a single learned convolution that projects those
codes onto image pixels.  Everything needed to exercise the operator at
desk scale ships with it: a BVH ray tracer that produces ground-truth
ambient occlusion and diffuse global illumination, procedural scene and
dataset generation, screen-space baselines, image metrics, and a CLI.
"""

from .autodiff import ParamBlock, Tape, gradcheck
from .cloud import PointCloud, PointHierarchy, build_hierarchy, poisson_disk_resample, sample_surface_uniform
from .conv import KernelMLP, MCConvLayer, conv_1x1, mc_convolve
from .estimator import ShadingRegressor
from .grid import Neighborhood, VoxelHashGrid, build_grid, estimate_density
from .meshes import TriangleMesh, load_obj, normalize_scene, random_scene
from .metrics import Image, dssim, mse_2d, mse_3d, tonemap
from .network import Model, ModelConfig, build_model, forward_3d, project_to_pixels
from .tracer import BVH, Lighting, ao_at_point, build_bvh, gi_at_point, raycast_gbuffer
from .train import AdamState, TrainConfig, adam_step, l2_loss, split_points, train_loop

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BVH",
    "Image",
    "KernelMLP",
    "Lighting",
    "MCConvLayer",
    "Model",
    "ModelConfig",
    "Neighborhood",
    "ParamBlock",
    "PointCloud",
    "PointHierarchy",
    "ShadingRegressor",
    "Tape",
    "TrainConfig",
    "TriangleMesh",
    "VoxelHashGrid",
    "adam_step",
    "ao_at_point",
    "build_bvh",
    "build_grid",
    "build_hierarchy",
    "build_model",
    "conv_1x1",
    "dssim",
    "estimate_density",
    "forward_3d",
    "gi_at_point",
    "gradcheck",
    "l2_loss",
    "load_obj",
    "mc_convolve",
    "mse_2d",
    "mse_3d",
    "normalize_scene",
    "poisson_disk_resample",
    "project_to_pixels",
    "random_scene",
    "raycast_gbuffer",
    "sample_surface_uniform",
    "split_points",
    "tonemap",
    "train_loop",
]
