"""First-order optimization loops: body fitting to image targets, direct
vertex-space fitting for raw scenes, and detailed-mesh registration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import sparse

from . import body as body_mod
from . import raster as raster_mod
from .body import EllipBodyParams, KinematicTree, ShapeTable
from .camera import WeakPerspectiveCamera
from .geometry import TriMesh
from .losses import (
    FitContext,
    FitTargets,
    LossWeights,
    fit_objective,
    grad_loss_icp_frozen,
    grad_loss_pen,
    icp_correspondences,
    loss_icp_frozen,
    loss_pen,
)

LENGTH_FLOOR = 1e-3   # meters; keeps shape parameters strictly positive under Adam


class FitDivergence(RuntimeError):
    """Objective became non-finite; carries the trace collected so far."""

    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class AdamState:
    """Bias-corrected Adam over named parameter blocks."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update over a dict of arrays; rejects non-finite gradients."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FitDivergence(f"non-finite gradient in parameter block '{name}'", [])
    state.step_count += 1
    t = state.step_count
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m[:] = state.beta1 * m + (1 - state.beta1) * g
        v[:] = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class FitConfig:
    """Knobs for the stage-2 fitting loop."""

    max_iters: int = 50
    learning_rate: float = 1e-2
    # per-iteration multiplicative decay; 1.0 keeps the rate constant
    lr_decay: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    tol: float = 1e-5
    tol_window: int = 5
    subdivision: int = 1
    lambda_z: float = 1.0
    use_z_gradients: bool = True
    freeze_camera: bool = True
    # root depth is a null direction of the weak-perspective objective; left
    # free it drifts unboundedly under the depth-ordering gradients
    freeze_root_depth: bool = True
    # pose-only fitting keeps bone lengths/thicknesses at their initial values
    optimize_shape: bool = True
    width: int = 256
    height: int = 256
    grouping: str = "20"
    seed: int = 0

    def __post_init__(self):
        if self.max_iters <= 0 or self.learning_rate <= 0:
            raise ValueError("max_iters and learning_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        weight_fields = {f.name for f in fields(LossWeights)}
        config_fields = {f.name for f in fields(cls)} - {"weights"}
        weights = LossWeights(**{k: d.pop(k) for k in list(d) if k in weight_fields})
        if "weights" in d:
            weights = LossWeights(**d.pop("weights"))
        unknown = set(d) - config_fields
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(weights=weights, **d)

    def context(self, tree: KinematicTree | None = None, table: ShapeTable | None = None) -> FitContext:
        return FitContext(
            width=self.width, height=self.height, subdivision=self.subdivision,
            grouping=self.grouping, lambda_z=self.lambda_z,
            use_z_gradients=self.use_z_gradients, freeze_camera=self.freeze_camera,
            tree=tree, table=table,
        )


def _blocks_from_params(params: EllipBodyParams, freeze_camera: bool) -> dict:
    blocks = {
        "r": params.r.copy(),
        "root": params.root_translation.copy(),
        "l": params.l.copy(),
        "t": params.t.copy(),
    }
    if not freeze_camera:
        blocks["cam"] = np.array([params.cam.s, params.cam.tx, params.cam.ty])
    return blocks


def _params_from_blocks(blocks: dict, template: EllipBodyParams) -> EllipBodyParams:
    if "cam" in blocks:
        cam = WeakPerspectiveCamera(
            float(max(blocks["cam"][0], LENGTH_FLOOR)),
            float(blocks["cam"][1]), float(blocks["cam"][2]),
        )
    else:
        cam = WeakPerspectiveCamera(template.cam.s, template.cam.tx, template.cam.ty)
    return EllipBodyParams(
        r=blocks["r"],
        l=np.maximum(blocks["l"], LENGTH_FLOOR),
        t=np.maximum(blocks["t"], LENGTH_FLOOR),
        root_translation=blocks["root"],
        cam=cam,
    )


def fit(
    initial: EllipBodyParams,
    targets: FitTargets,
    config: FitConfig,
    tree: KinematicTree | None = None,
    table: ShapeTable | None = None,
) -> tuple[EllipBodyParams, list[dict]]:
    """Adam descent on the fitting objective; returns the best iterate and the
    per-iteration trace. Deterministic for identical inputs and config."""
    ctx = config.context(tree, table)
    params = initial.copy()
    state = AdamState(lr=config.learning_rate)
    trace: list[dict] = []
    best = params.copy()
    best_total = np.inf
    best_history: list[float] = []

    for it in range(config.max_iters):
        value = fit_objective(params, targets, config.weights, ctx)
        row = {"iter": it, "total": value.total}
        row.update(value.terms)
        trace.append(row)
        if not np.isfinite(value.total):
            raise FitDivergence(f"objective diverged at iteration {it}", trace)
        if value.total < best_total:
            best_total = value.total
            best = params.copy()
        best_history.append(best_total)
        if config.tol > 0 and len(best_history) > config.tol_window:
            prev = best_history[-config.tol_window - 1]
            if prev - best_total < config.tol * max(abs(prev), 1e-12):
                break
        blocks = _blocks_from_params(params, config.freeze_camera)
        if not config.optimize_shape:
            blocks.pop("l")
            blocks.pop("t")
        grads = {k: v for k, v in value.grads.items() if k in blocks}
        if config.freeze_root_depth:
            grads["root"] = grads["root"].copy()
            grads["root"][2] = 0.0
        state.lr = config.learning_rate * config.lr_decay**it
        try:
            blocks = adam_step(state, blocks, grads)
        except FitDivergence as exc:
            raise FitDivergence(str(exc), trace) from None
        blocks.setdefault("l", params.l)
        blocks.setdefault("t", params.t)
        params = _params_from_blocks(blocks, params)
    return best, trace


def fit_vertices(
    parts: list[TriMesh],
    part_to_class: np.ndarray,
    n_classes: int,
    cam: WeakPerspectiveCamera,
    target_maps: np.ndarray,
    config: FitConfig,
) -> tuple[list[TriMesh], list[dict]]:
    """Optimize raw part vertex positions against target class maps.

    Used by the toy occlusion experiments: no body parameterization, the
    rasterizer gradients act on vertices directly (converted to camera space).
    """
    verts = [m.vertices.copy() for m in parts]
    faces = [m.faces for m in parts]
    state = AdamState(lr=config.learning_rate)
    trace: list[dict] = []
    best_total = np.inf
    best = [v.copy() for v in verts]
    fx = config.width / 2.0 * cam.s
    fy = -config.height / 2.0 * cam.s

    for it in range(config.max_iters):
        meshes = [TriMesh(v, f) for v, f in zip(verts, faces)]
        partset = body_mod.PartSet(
            parts=meshes, skeleton=np.zeros((1, 3)),
            part_to_class=part_to_class, n_classes=n_classes,
        )
        proj = raster_mod.project_parts(partset, cam, config.width, config.height)
        raster = raster_mod.rasterize(proj)
        seg = float(
            (raster.class_maps.astype(np.int16) - target_maps.astype(np.int16)).astype(np.float64).__pow__(2).sum()
        )
        trace.append({"iter": it, "total": seg, "seg": seg})
        if seg < best_total:
            best_total = seg
            best = [v.copy() for v in verts]
        if seg == 0.0:
            break
        vg = raster_mod.backward_xy(raster, target_maps, proj)
        if config.use_z_gradients:
            events = raster_mod.detect_occlusions(raster, target_maps, proj)
            vg.add(raster_mod.backward_z(events, config.lambda_z, proj))
        grads = {}
        blocks = {}
        for p, g in enumerate(vg.per_part):
            grads[str(p)] = np.column_stack([g[:, 0] * fx, g[:, 1] * fy, g[:, 2]])
            blocks[str(p)] = verts[p]
        blocks = adam_step(state, blocks, grads)
        verts = [blocks[str(p)] for p in range(len(parts))]
    return [TriMesh(v, f) for v, f in zip(best, faces)], trace


@dataclass
class RegisterConfig:
    """Knobs for registering a detailed mesh onto a fitted body.

    Weights balance the terms' natural scales: the ICP term is a mean of
    squared meter distances (~1e-3), penetration counts vertex depths (~1-100).
    """

    max_iters: int = 200
    learning_rate: float = 3e-3
    w_icp: float = 300.0
    w_pen: float = 30.0
    w_smooth: float = 0.1
    subdivision: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "RegisterConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def partset_surface(partset: body_mod.PartSet) -> TriMesh:
    """All part meshes merged into one surface mesh."""
    verts = []
    faces = []
    offset = 0
    for mesh in partset.parts:
        verts.append(mesh.vertices)
        faces.append(mesh.faces + offset)
        offset += mesh.n_vertices
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def _uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    n = mesh.n_vertices
    rows, cols = [], []
    for a, b, c in mesh.faces:
        for i, j in ((a, b), (b, c), (c, a)):
            rows += [i, j]
            cols += [j, i]
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    adj.data[:] = 1.0  # duplicate edge entries were summed by tocsr
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = sparse.diags(1.0 / np.maximum(deg, 1.0))
    return sparse.eye(n, format="csr") - inv @ adj


def register(
    target_mesh: TriMesh,
    fitted: EllipBodyParams,
    config: RegisterConfig | None = None,
    tree: KinematicTree | None = None,
    table: ShapeTable | None = None,
) -> tuple[TriMesh, list[dict]]:
    """Deform `target_mesh` to circumscribe the fitted body: nearest-neighbor
    attraction to the body surface plus a penetration push-out. The smoothness
    term penalizes the Laplacian of the displacement field (zero at identity),
    so the target's own curvature is free. The body stays frozen.

    Ships a free-vertex parameterization; any differentiable handle set can be
    layered on top by the caller.
    """
    if target_mesh.n_vertices == 0:
        raise ValueError("target mesh is empty")
    config = config or RegisterConfig()
    specs = body_mod.ellipsoid_specs(fitted, tree=tree, table=table)
    # the attraction reference is the visible skin, not interior walls of the
    # part composite
    surface = body_mod.outer_surface(fitted, config.subdivision, tree=tree, table=table).vertices
    lap = _uniform_laplacian(target_mesh)

    rest = target_mesh.vertices
    verts = rest.copy()
    state = AdamState(lr=config.learning_rate)
    trace: list[dict] = []
    best = verts.copy()
    best_total = np.inf
    for it in range(config.max_iters):
        corr = icp_correspondences(verts, surface)
        icp = loss_icp_frozen(verts, surface, corr)
        pen = loss_pen(verts, specs)
        lv = lap @ (verts - rest)
        smooth = float((lv * lv).sum())
        total = config.w_icp * icp + config.w_pen * pen + config.w_smooth * smooth
        trace.append({"iter": it, "total": total, "icp": icp, "pen": pen, "smooth": smooth})
        if not np.isfinite(total):
            raise FitDivergence(f"registration diverged at iteration {it}", trace)
        if total < best_total:
            best_total = total
            best = verts.copy()
        grad = config.w_icp * grad_loss_icp_frozen(verts, surface, corr)
        grad += config.w_pen * grad_loss_pen(verts, specs)
        grad += config.w_smooth * 2.0 * (lap.T @ lv)
        blocks = adam_step(state, {"v": verts}, {"v": grad})
        verts = blocks["v"]
    return TriMesh(best, target_mesh.faces), trace


def save_trace(trace: list[dict], path) -> None:
    """Write a fit/registration trace as CSV (one row per iteration)."""
    if not trace:
        return
    keys = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row.get(k, "") for k in keys})
