"""Ellipsoid-composite articulated body model with a part-level differentiable
rasterizer, gradient-based fitting to 2D keypoints and part segmentation maps,
and detailed-mesh registration."""

__version__ = "0.1.0"

from .body import (
    EllipBodyParams,
    KinematicTree,
    PartSet,
    ShapeTable,
    build,
    default_shape_table,
    default_tree,
    ellipsoid_distance,
    forward_kinematics,
    mean_params,
    outer_surface,
    pose_from_directions,
)
from .camera import ProjectionMatrix, WeakPerspectiveCamera, project_full, project_weak
from .geometry import EllipsoidSpec, TriMesh, icosahedron, load_obj, save_obj, subdivide
from .losses import FitTargets, LossWeights, fit_objective, train_objective
from .optim import FitConfig, FitDivergence, RegisterConfig, fit, fit_vertices, register
from .raster import RasterOutput, render

__all__ = [
    "EllipBodyParams", "KinematicTree", "PartSet", "ShapeTable",
    "build", "default_shape_table", "default_tree", "ellipsoid_distance",
    "forward_kinematics", "mean_params", "outer_surface", "pose_from_directions",
    "ProjectionMatrix", "WeakPerspectiveCamera", "project_full", "project_weak",
    "EllipsoidSpec", "TriMesh", "icosahedron", "load_obj", "save_obj", "subdivide",
    "FitTargets", "LossWeights", "fit_objective", "train_objective",
    "FitConfig", "FitDivergence", "RegisterConfig", "fit", "fit_vertices", "register",
    "RasterOutput", "render",
]
