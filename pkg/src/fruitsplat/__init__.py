"""Semantic 3D Gaussian splatting for strawberry bruise quantification.

Gaussians carry two extra logits, a strawberry score and a bruise score,
trained against 2D masks through a stop-gradient so the masks never move
geometry or color. The trained cloud is filtered to strawberry points and
the bruised share is compared before and after manipulation.
"""

__version__ = "0.1.0"

from .colmap import CameraFrame, CameraIntrinsics, SparsePoint, parse_colmap_model, write_colmap_model
from .damage import DamageReport, bruise_percentage, compare_damage, filter_strawberry, stiffness_retention
from .dataset import SyntheticSceneSpec, TrainingSample, generate_synthetic_scene, load_dataset
from .gaussians import GaussianCloud, export_ply, import_ply, init_from_points
from .rasterizer import RenderConfig, RenderOutput, render, render_backward
from .tactile import ContactConfig, TactileFrame, contact_energy, detect_contact, diff_image
from .trainer import LossBreakdown, TrainConfig, train, train_step

__all__ = [
    "CameraFrame", "CameraIntrinsics", "SparsePoint", "parse_colmap_model", "write_colmap_model",
    "DamageReport", "bruise_percentage", "compare_damage", "filter_strawberry", "stiffness_retention",
    "SyntheticSceneSpec", "TrainingSample", "generate_synthetic_scene", "load_dataset",
    "GaussianCloud", "export_ply", "import_ply", "init_from_points",
    "RenderConfig", "RenderOutput", "render", "render_backward",
    "ContactConfig", "TactileFrame", "contact_energy", "detect_contact", "diff_image",
    "LossBreakdown", "TrainConfig", "train", "train_step",
]
