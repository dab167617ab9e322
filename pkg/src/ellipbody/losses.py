"""Scalar objectives and their parameter-space gradients.

Smooth terms (keypoint, 3D, shape regularizers, penetration, frozen-match ICP)
carry exact analytic gradients; the segmentation term uses the rasterizer's
edge-sweep surrogate gradients chained through the vertex-to-parameter
Jacobian of the body.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import body as body_mod
from . import raster as raster_mod
from .body import EllipBodyParams, KinematicTree, ShapeTable
from .geometry import EllipsoidSpec


@dataclass
class LossWeights:
    """Term weights; the defaults follow the 1 : 1 : 1e-2 : 1e-3 : 1e-3 ratio."""

    lambda_3d: float = 1.0
    lambda_proj: float = 1.0
    lambda_seg: float = 1e-2
    lambda_l: float = 1e-3
    lambda_t: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_3d", "lambda_proj", "lambda_seg", "lambda_l", "lambda_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {
            "lambda_3d": self.lambda_3d, "lambda_proj": self.lambda_proj,
            "lambda_seg": self.lambda_seg, "lambda_l": self.lambda_l,
            "lambda_t": self.lambda_t,
        }


@dataclass
class FitTargets:
    """What the body is fitted to: 2D keypoints, part maps, optional 3D joints."""

    keypoints: np.ndarray                  # (N, 2) normalized image coordinates
    keypoint_conf: np.ndarray              # (N,) confidences in [0, 1]
    class_maps: np.ndarray | None = None   # (C, h, w) binary target maps
    joints_3d: np.ndarray | None = None    # (N, 3) meters

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.keypoint_conf = np.asarray(self.keypoint_conf, dtype=np.float64)
        if self.keypoint_conf.min(initial=0.0) < 0 or self.keypoint_conf.max(initial=0.0) > 1:
            raise ValueError("keypoint confidences must lie in [0, 1]")
        if self.class_maps is not None:
            self.class_maps = np.asarray(self.class_maps, dtype=np.uint8)


def loss_3d(joints: np.ndarray, target: np.ndarray) -> float:
    """Sum of squared joint distances (meters^2)."""
    joints = np.asarray(joints, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if joints.shape != target.shape:
        raise ValueError("joint arrays must have matching shapes")
    return float(((joints - target) ** 2).sum())


def grad_loss_3d(joints: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(joints) - np.asarray(target))


def loss_proj(s2d: np.ndarray, target: np.ndarray, conf: np.ndarray) -> float:
    """Confidence-weighted L1 over projected joint coordinates."""
    s2d = np.asarray(s2d, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if s2d.shape != target.shape:
        raise ValueError("keypoint arrays must have matching shapes")
    return float((np.abs(s2d - target).sum(axis=1) * np.asarray(conf)).sum())


def grad_loss_proj(s2d: np.ndarray, target: np.ndarray, conf: np.ndarray) -> np.ndarray:
    return np.sign(np.asarray(s2d) - np.asarray(target)) * np.asarray(conf)[:, None]


def loss_seg(maps: np.ndarray, target_maps: np.ndarray) -> float:
    """Sum over classes and pixels of squared map differences (= Hamming count
    for binary maps)."""
    maps = np.asarray(maps)
    target_maps = np.asarray(target_maps)
    if maps.shape != target_maps.shape:
        raise ValueError(f"map shapes differ: {maps.shape} vs {target_maps.shape}")
    diff = maps.astype(np.float64) - target_maps.astype(np.float64)
    return float((diff * diff).sum())


def loss_shape_reg(
    l: np.ndarray, t: np.ndarray, l_mean: np.ndarray, t_mean: np.ndarray
) -> tuple[float, float]:
    """Squared deviations of lengths and thicknesses from the mean shape."""
    dl = np.asarray(l) - np.asarray(l_mean)
    dt = np.asarray(t) - np.asarray(t_mean)
    return float((dl * dl).sum()), float((dt * dt).sum())


def loss_pen(points: np.ndarray, ellipsoids: list[EllipsoidSpec]) -> float:
    """Penetration penalty: sum of (1 - e)^2 over point-ellipsoid pairs with
    normalized distance e < 1; outside pairs contribute zero."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    total = 0.0
    for spec in ellipsoids:
        radius = max(spec.length, spec.thickness1, spec.thickness2) / 2.0
        near = np.linalg.norm(points - spec.center, axis=1) <= radius
        if not near.any():
            continue
        e = body_mod.ellipsoid_distance(points[near], spec)
        inside = e < 1.0
        total += float(((1.0 - e[inside]) ** 2).sum())
    return total


def grad_loss_pen(points: np.ndarray, ellipsoids: list[EllipsoidSpec]) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    grad = np.zeros_like(points)
    for spec in ellipsoids:
        radius = max(spec.length, spec.thickness1, spec.thickness2) / 2.0
        near = np.flatnonzero(np.linalg.norm(points - spec.center, axis=1) <= radius)
        if len(near) == 0:
            continue
        e = body_mod.ellipsoid_distance(points[near], spec)
        inside = e < 1.0
        if not inside.any():
            continue
        idx = near[inside]
        de = body_mod.ellipsoid_distance_gradient(points[idx], spec)
        grad[idx] += -2.0 * (1.0 - e[inside])[:, None] * de
    return grad


def icp_correspondences(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor indices (a -> b, b -> a)."""
    tree_b = cKDTree(b)
    tree_a = cKDTree(a)
    _, ab = tree_b.query(a)
    _, ba = tree_a.query(b)
    return ab, ba


def loss_icp_frozen(
    a: np.ndarray, b: np.ndarray, corr: tuple[np.ndarray, np.ndarray]
) -> float:
    ab, ba = corr
    fwd = ((a - b[ab]) ** 2).sum(axis=1).mean()
    rev = ((b - a[ba]) ** 2).sum(axis=1).mean()
    return float(fwd + rev)


def grad_loss_icp_frozen(
    a: np.ndarray, b: np.ndarray, corr: tuple[np.ndarray, np.ndarray]
) -> np.ndarray:
    """Gradient w.r.t. `a` with correspondences held fixed."""
    ab, ba = corr
    grad = 2.0 * (a - b[ab]) / len(a)
    np.add.at(grad, ba, 2.0 * (a[ba] - b) / len(b))
    return grad


def loss_icp(mesh_a_vertices: np.ndarray, mesh_b_vertices: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances between vertex sets."""
    a = np.atleast_2d(np.asarray(mesh_a_vertices, dtype=np.float64))
    b = np.atleast_2d(np.asarray(mesh_b_vertices, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("ICP loss requires nonempty vertex sets")
    return loss_icp_frozen(a, b, icp_correspondences(a, b))


@dataclass
class FitContext:
    """Rendering/differentiation settings shared by objective evaluations."""

    width: int = 256
    height: int = 256
    subdivision: int = 1
    grouping: str = "20"
    lambda_z: float = 1.0
    use_z_gradients: bool = True
    freeze_camera: bool = True
    tree: KinematicTree | None = None
    table: ShapeTable | None = None
    l_mean: np.ndarray | None = None
    t_mean: np.ndarray | None = None

    def __post_init__(self):
        mean = body_mod.mean_params()
        if self.l_mean is None:
            self.l_mean = mean.l
        if self.t_mean is None:
            self.t_mean = mean.t


@dataclass
class ObjectiveValue:
    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]
    raster: raster_mod.RasterOutput


def fit_objective(
    params: EllipBodyParams,
    targets: FitTargets,
    weights: LossWeights,
    ctx: FitContext,
) -> ObjectiveValue:
    """Stage-2 objective: seg + keypoint terms plus shape regularizers, with
    gradients w.r.t. (r, root, l, t) and optionally the camera.

    Rasterizer surrogate gradients are converted from pixel units to camera
    space and chained through the analytic vertex Jacobian; keypoint and
    regularizer gradients are exact.
    """
    bj = body_mod.build_jacobian(
        params, ctx.subdivision, tree=ctx.tree, table=ctx.table, grouping=ctx.grouping
    )
    proj = raster_mod.project_parts(bj.partset, params.cam, ctx.width, ctx.height)
    raster = raster_mod.rasterize(proj)

    terms: dict[str, float] = {}
    grad_vec = np.zeros(body_mod.N_PARAMS)
    grad_cam = np.zeros(3)

    # segmentation term with surrogate gradients
    if targets.class_maps is not None and weights.lambda_seg > 0:
        terms["seg"] = loss_seg(raster.class_maps, targets.class_maps)
        vg = raster_mod.backward_xy(raster, targets.class_maps, proj)
        if ctx.use_z_gradients:
            events = raster_mod.detect_occlusions(raster, targets.class_maps, proj)
            vg.add(raster_mod.backward_z(events, ctx.lambda_z, proj))
        fx = ctx.width / 2.0 * params.cam.s
        fy = -ctx.height / 2.0 * params.cam.s
        for p, g in enumerate(vg.per_part):
            g_cam = np.column_stack([g[:, 0] * fx, g[:, 1] * fy, g[:, 2]])
            grad_vec += weights.lambda_seg * np.einsum(
                "npc,nc->p", bj.vertex_jacobians[p], g_cam
            )
            if not ctx.freeze_camera:
                verts = bj.partset.parts[p].vertices
                grad_cam[0] += weights.lambda_seg * (
                    g[:, 0] * (ctx.width / 2.0) * verts[:, 0]
                    + g[:, 1] * (-ctx.height / 2.0) * verts[:, 1]
                ).sum()
                grad_cam[1] += weights.lambda_seg * (g[:, 0] * ctx.width / 2.0).sum()
                grad_cam[2] += weights.lambda_seg * (g[:, 1] * -ctx.height / 2.0).sum()
    else:
        terms["seg"] = 0.0

    # keypoint reprojection term
    if weights.lambda_proj > 0 and len(targets.keypoints):
        s2d = raster.joints_2d
        terms["proj"] = loss_proj(s2d, targets.keypoints, targets.keypoint_conf)
        gk = grad_loss_proj(s2d, targets.keypoints, targets.keypoint_conf)  # (N, 2)
        g_joint = np.zeros((len(s2d), 3))
        g_joint[:, :2] = gk * params.cam.s
        grad_vec += weights.lambda_proj * np.einsum("npc,nc->p", bj.joint_jacobian, g_joint)
        if not ctx.freeze_camera:
            grad_cam[0] += weights.lambda_proj * (gk * bj.partset.skeleton[:, :2]).sum()
            grad_cam[1] += weights.lambda_proj * gk[:, 0].sum()
            grad_cam[2] += weights.lambda_proj * gk[:, 1].sum()
    else:
        terms["proj"] = 0.0

    # shape regularizers
    reg_l, reg_t = loss_shape_reg(params.l, params.t, ctx.l_mean, ctx.t_mean)
    terms["reg_l"] = reg_l
    terms["reg_t"] = reg_t
    grad_vec[body_mod.L_BLOCK] += weights.lambda_l * 2.0 * (params.l - ctx.l_mean)
    grad_vec[body_mod.T_BLOCK] += weights.lambda_t * 2.0 * (params.t - ctx.t_mean)

    total = (
        weights.lambda_seg * terms["seg"]
        + weights.lambda_proj * terms["proj"]
        + weights.lambda_l * reg_l
        + weights.lambda_t * reg_t
    )
    grads = {
        "r": grad_vec[body_mod.R_BLOCK].reshape(body_mod.N_PARTS, 3),
        "root": grad_vec[body_mod.ROOT_BLOCK].copy(),
        "l": grad_vec[body_mod.L_BLOCK].copy(),
        "t": grad_vec[body_mod.T_BLOCK].copy(),
    }
    if not ctx.freeze_camera:
        grads["cam"] = grad_cam
    return ObjectiveValue(total=float(total), terms=terms, grads=grads, raster=raster)


def train_objective(
    joints: np.ndarray,
    s2d: np.ndarray,
    maps: np.ndarray,
    targets: FitTargets,
    weights: LossWeights,
) -> float:
    """Training-style composition: 3D + keypoint + segmentation terms.

    The 3D weight drops to zero when the targets carry no 3D joints.
    """
    lam3d = weights.lambda_3d if targets.joints_3d is not None else 0.0
    total = weights.lambda_proj * loss_proj(s2d, targets.keypoints, targets.keypoint_conf)
    if targets.joints_3d is not None:
        total += lam3d * loss_3d(joints, targets.joints_3d)
    if targets.class_maps is not None:
        total += weights.lambda_seg * loss_seg(maps, targets.class_maps)
    return float(total)
