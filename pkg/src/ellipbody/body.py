"""The parametric ellipsoid body: kinematic tree, shape-parameter sharing,
forward kinematics, mesh assembly and the vertex-to-parameter Jacobian.

The body is 20 ellipsoid parts whose long-axis endpoints sit at skeleton
joints. Pose is one axis-angle rotation per part; shape is 12 shared bone
lengths and 15 shared thicknesses (all full extents in meters).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .camera import WeakPerspectiveCamera
from .geometry import (
    EllipsoidSpec,
    TriMesh,
    axis_angle_derivatives,
    axis_angle_to_matrix,
    deform_ellipsoid,
    icosahedron,
    rotation_aligning_x,
    rotation_between,
    subdivide,
)

N_PARTS = 20
N_JOINTS = 21
N_LENGTHS = 12
N_THICKNESSES = 15

# parameter vector layout used by the Jacobian and the optimizer
R_BLOCK = slice(0, 60)
ROOT_BLOCK = slice(60, 63)
L_BLOCK = slice(63, 75)
T_BLOCK = slice(75, 90)
N_PARAMS = 90


@dataclass
class KinematicTree:
    """Per-part parent indices, rest-pose offset directions and bone endpoints."""

    part_names: list[str]
    parent: np.ndarray          # (K,) int, -1 for the root part
    joint_from: np.ndarray      # (K,) int
    joint_to: np.ndarray        # (K,) int
    offsets: np.ndarray         # (K, 3) unit rest directions in the parent rotation frame
    joint_names: list[str]
    align: np.ndarray = field(init=False)  # (K, 3, 3) rotations taking +x onto each offset

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int32)
        self.joint_from = np.asarray(self.joint_from, dtype=np.int32)
        self.joint_to = np.asarray(self.joint_to, dtype=np.int32)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        k = len(self.part_names)
        if (self.parent == -1).sum() != 1:
            raise ValueError("kinematic tree must have exactly one root part")
        if np.any(self.parent >= np.arange(k)):
            raise ValueError("parts must be topologically ordered (parent index < part index)")
        norms = np.linalg.norm(self.offsets, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("offset directions must be unit vectors")
        self.align = np.stack([rotation_aligning_x(o) for o in self.offsets])

    @property
    def n_parts(self) -> int:
        return len(self.part_names)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root_joint(self) -> int:
        root_part = int(np.flatnonzero(self.parent == -1)[0])
        return int(self.joint_from[root_part])


@dataclass
class ShapeTable:
    """Shared shape-parameter indices: per part one length and two thickness slots.

    Left/right mirror parts carry identical index triples.
    """

    length_index: np.ndarray
    thick1_index: np.ndarray
    thick2_index: np.ndarray

    def __post_init__(self):
        self.length_index = np.asarray(self.length_index, dtype=np.int32)
        self.thick1_index = np.asarray(self.thick1_index, dtype=np.int32)
        self.thick2_index = np.asarray(self.thick2_index, dtype=np.int32)
        if self.length_index.max() >= N_LENGTHS or self.length_index.min() < 0:
            raise ValueError("length index out of range")
        tmax = max(self.thick1_index.max(), self.thick2_index.max())
        if tmax >= N_THICKNESSES or min(self.thick1_index.min(), self.thick2_index.min()) < 0:
            raise ValueError("thickness index out of range")


@dataclass
class EllipBodyParams:
    """The optimization variables: pose r, lengths l, thicknesses t, root, camera."""

    r: np.ndarray                       # (20, 3) axis-angle, radians
    l: np.ndarray                       # (12,) bone lengths, meters
    t: np.ndarray                       # (15,) thicknesses, meters
    root_translation: np.ndarray        # (3,) meters
    cam: WeakPerspectiveCamera

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64).reshape(N_PARTS, 3)
        self.l = np.asarray(self.l, dtype=np.float64).reshape(N_LENGTHS)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(N_THICKNESSES)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        for name, arr in (("r", self.r), ("l", self.l), ("t", self.t),
                          ("root_translation", self.root_translation)):
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in parameter block '{name}'")
        if self.l.min() <= 0 or self.t.min() <= 0:
            raise ValueError("lengths and thicknesses must be strictly positive")

    def copy(self) -> "EllipBodyParams":
        return EllipBodyParams(
            self.r.copy(), self.l.copy(), self.t.copy(), self.root_translation.copy(),
            WeakPerspectiveCamera(self.cam.s, self.cam.tx, self.cam.ty),
        )

    def to_dict(self) -> dict:
        return {
            "r": self.r.tolist(),
            "l": self.l.tolist(),
            "t": self.t.tolist(),
            "root_translation": self.root_translation.tolist(),
            "cam": self.cam.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EllipBodyParams":
        for key in ("r", "l", "t", "root_translation", "cam"):
            if key not in d:
                raise ValueError(f"params file missing field '{key}'")
        return cls(
            np.asarray(d["r"], dtype=np.float64),
            np.asarray(d["l"], dtype=np.float64),
            np.asarray(d["t"], dtype=np.float64),
            np.asarray(d["root_translation"], dtype=np.float64),
            WeakPerspectiveCamera.from_dict(d["cam"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "EllipBodyParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class PartSet:
    """K posed part meshes, the skeleton, and the part-to-segmentation-class map."""

    parts: list[TriMesh]
    skeleton: np.ndarray
    part_to_class: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.part_to_class = np.asarray(self.part_to_class, dtype=np.int32)


@lru_cache(maxsize=1)
def _config() -> dict:
    text = resources.files("ellipbody").joinpath("data/body_config.json").read_text()
    return json.loads(text)


def default_tree() -> KinematicTree:
    """The shipped 20-part tree rooted at the pelvis junction."""
    cfg = _config()
    parts = cfg["parts"]
    return KinematicTree(
        part_names=[p["name"] for p in parts],
        parent=[p["parent"] for p in parts],
        joint_from=[p["joint_from"] for p in parts],
        joint_to=[p["joint_to"] for p in parts],
        offsets=[p["offset"] for p in parts],
        joint_names=list(cfg["joints"]),
    )


def default_shape_table() -> ShapeTable:
    parts = _config()["parts"]
    return ShapeTable(
        length_index=[p["length_index"] for p in parts],
        thick1_index=[p["thick1_index"] for p in parts],
        thick2_index=[p["thick2_index"] for p in parts],
    )


def class_grouping(name: str = "20") -> tuple[np.ndarray, list[str]]:
    """Returns (part_to_class, class names) for a shipped grouping preset."""
    groupings = _config()["class_groupings"]
    if name not in groupings:
        raise ValueError(f"unknown grouping '{name}'; available: {sorted(groupings)}")
    g = groupings[name]
    return np.asarray(g["part_to_class"], dtype=np.int32), list(g["classes"])


def eval_joint_indices_17(tree: KinematicTree | None = None) -> np.ndarray:
    """A 17-joint evaluation subset for compatibility with common protocols."""
    tree = tree or default_tree()
    names = _config()["eval_joints_17"]
    return np.array([tree.joint_names.index(n) for n in names], dtype=np.int32)


def mean_params() -> EllipBodyParams:
    """The shipped default body: zero rotations, config-file mean shape."""
    cfg = _config()
    return EllipBodyParams(
        r=np.zeros((N_PARTS, 3)),
        l=np.asarray(cfg["mean_lengths"], dtype=np.float64),
        t=np.asarray(cfg["mean_thicknesses"], dtype=np.float64),
        root_translation=np.zeros(3),
        cam=WeakPerspectiveCamera.from_dict(cfg["mean_camera"]),
    )


def forward_kinematics(
    tree: KinematicTree, r: np.ndarray, bone_lengths: np.ndarray, root_translation: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pose the skeleton: returns (per-part global rotations (K,3,3), joints (N,3)).

    `bone_lengths` is one length per part (expand a shared 12-vector through the
    shape table first). Frames compose root-to-leaf; each bone's endpoint is its
    start joint plus the part's rotated rest offset scaled by its length. The
    returned rotation of part i maps local +x onto the bone direction, so it
    orients the part's ellipsoid directly.
    """
    r = np.asarray(r, dtype=np.float64)
    bone_lengths = np.asarray(bone_lengths, dtype=np.float64)
    g = np.empty((tree.n_parts, 3, 3))
    joints = np.zeros((tree.n_joints, 3))
    joints[tree.root_joint] = root_translation
    for i in range(tree.n_parts):
        local = axis_angle_to_matrix(r[i])
        p = tree.parent[i]
        g[i] = local if p < 0 else g[p] @ local
        bone = g[i] @ (bone_lengths[i] * tree.offsets[i])
        joints[tree.joint_to[i]] = joints[tree.joint_from[i]] + bone
    rotations = np.einsum("kab,kbc->kac", g, tree.align)
    return rotations, joints


@dataclass
class FKJacobian:
    """Forward kinematics with derivatives w.r.t. the packed parameter vector.

    Parameter layout: [r (60), root translation (3), l (12), t (15)].
    """

    rotations: np.ndarray     # (K, 3, 3) ellipsoid frames
    joints: np.ndarray        # (N, 3)
    frames: np.ndarray        # (K, 3, 3) rotation-only frames (no rest alignment)
    d_frames: np.ndarray      # (K, 60, 3, 3)
    d_joints: np.ndarray      # (N, 90, 3)


def forward_kinematics_jacobian(
    tree: KinematicTree,
    table: ShapeTable,
    r: np.ndarray,
    l: np.ndarray,
    root_translation: np.ndarray,
) -> FKJacobian:
    r = np.asarray(r, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    k_parts = tree.n_parts
    g = np.empty((k_parts, 3, 3))
    dg = np.zeros((k_parts, 60, 3, 3))
    joints = np.zeros((tree.n_joints, 3))
    dj = np.zeros((tree.n_joints, N_PARAMS, 3))
    joints[tree.root_joint] = root_translation
    dj[tree.root_joint, ROOT_BLOCK] = np.eye(3)
    for i in range(k_parts):
        local = axis_angle_to_matrix(r[i])
        dlocal = axis_angle_derivatives(r[i])
        p = tree.parent[i]
        if p < 0:
            g[i] = local
        else:
            g[i] = g[p] @ local
            dg[i] = np.einsum("kab,bc->kac", dg[p], local)
        base = np.eye(3) if p < 0 else g[p]
        for c in range(3):
            dg[i, 3 * i + c] = base @ dlocal[c]
        li = table.length_index[i]
        off = tree.offsets[i]
        jf, jt = tree.joint_from[i], tree.joint_to[i]
        joints[jt] = joints[jf] + g[i] @ (l[li] * off)
        dj[jt] = dj[jf]
        dj[jt, R_BLOCK] = dj[jf, R_BLOCK] + np.einsum("kab,b->ka", dg[i], l[li] * off)
        dj[jt, L_BLOCK.start + li] = dj[jf, L_BLOCK.start + li] + g[i] @ off
    rotations = np.einsum("kab,kbc->kac", g, tree.align)
    return FKJacobian(rotations, joints, g, dg, dj)


def ellipsoid_specs(
    params: EllipBodyParams,
    tree: KinematicTree | None = None,
    table: ShapeTable | None = None,
) -> list[EllipsoidSpec]:
    """One oriented ellipsoid per part: frame from FK, center at the bone midpoint."""
    tree = tree or default_tree()
    table = table or default_shape_table()
    rotations, joints = forward_kinematics(
        tree, params.r, params.l[table.length_index], params.root_translation
    )
    specs = []
    for i in range(tree.n_parts):
        center = (joints[tree.joint_from[i]] + joints[tree.joint_to[i]]) / 2.0
        specs.append(
            EllipsoidSpec(
                rotation=rotations[i],
                center=center,
                length=float(params.l[table.length_index[i]]),
                thickness1=float(params.t[table.thick1_index[i]]),
                thickness2=float(params.t[table.thick2_index[i]]),
            )
        )
    return specs


@lru_cache(maxsize=8)
def unit_icosphere(subdivision: int) -> TriMesh:
    return subdivide(icosahedron(), subdivision)


def build(
    params: EllipBodyParams,
    subdivision: int = 1,
    tree: KinematicTree | None = None,
    table: ShapeTable | None = None,
    grouping: str = "20",
) -> PartSet:
    """Assemble the posed body: deform one level-`subdivision` icosphere per part."""
    tree = tree or default_tree()
    table = table or default_shape_table()
    part_to_class, class_names = class_grouping(grouping)
    base = unit_icosphere(subdivision)
    specs = ellipsoid_specs(params, tree, table)
    _, joints = forward_kinematics(
        tree, params.r, params.l[table.length_index], params.root_translation
    )
    parts = [deform_ellipsoid(spec, base) for spec in specs]
    return PartSet(parts=parts, skeleton=joints, part_to_class=part_to_class,
                   n_classes=len(class_names))


@dataclass
class BuildJacobian:
    """build() plus analytic derivatives of every vertex and joint w.r.t. params."""

    partset: PartSet
    vertex_jacobians: list[np.ndarray]   # per part (n, 90, 3)
    joint_jacobian: np.ndarray           # (N, 90, 3)


def build_jacobian(
    params: EllipBodyParams,
    subdivision: int = 1,
    tree: KinematicTree | None = None,
    table: ShapeTable | None = None,
    grouping: str = "20",
) -> BuildJacobian:
    tree = tree or default_tree()
    table = table or default_shape_table()
    part_to_class, class_names = class_grouping(grouping)
    base = unit_icosphere(subdivision)
    u = base.vertices
    n = len(u)
    fk = forward_kinematics_jacobian(tree, table, params.r, params.l, params.root_translation)

    parts: list[TriMesh] = []
    jacs: list[np.ndarray] = []
    for i in range(tree.n_parts):
        li = table.length_index[i]
        t1 = table.thick1_index[i]
        t2 = table.thick2_index[i]
        semi = np.array([params.l[li], params.t[t1], params.t[t2]]) / 2.0
        rot = fk.rotations[i]
        jf, jt = tree.joint_from[i], tree.joint_to[i]
        center = (fk.joints[jf] + fk.joints[jt]) / 2.0
        local = u * semi
        verts = local @ rot.T + center
        parts.append(TriMesh(verts, base.faces))

        jac = np.zeros((n, N_PARAMS, 3))
        d_center = (fk.d_joints[jf] + fk.d_joints[jt]) / 2.0   # (90, 3)
        jac += d_center[None, :, :]
        # rotation chain: dV = dG B (semi * u) for every ancestor axis
        d_rot = np.einsum("kab,bc->kac", fk.d_frames[i], tree.align[i])  # (60,3,3)
        jac[:, R_BLOCK] += np.einsum("kab,nb->nka", d_rot, local)
        # own length also scales the local x semi-axis
        jac[:, L_BLOCK.start + li] += 0.5 * u[:, 0:1] * rot[:, 0]
        # thicknesses scale local y/z semi-axes (both when the indices coincide)
        jac[:, T_BLOCK.start + t1] += 0.5 * u[:, 1:2] * rot[:, 1]
        jac[:, T_BLOCK.start + t2] += 0.5 * u[:, 2:3] * rot[:, 2]
        jacs.append(jac)

    partset = PartSet(parts=parts, skeleton=fk.joints, part_to_class=part_to_class,
                      n_classes=len(class_names))
    return BuildJacobian(partset=partset, vertex_jacobians=jacs, joint_jacobian=fk.d_joints)


def pose_from_directions(directions: dict[str, tuple], tree: KinematicTree | None = None) -> EllipBodyParams:
    """Mean-shape params whose local rotations realize the given global bone
    directions (one unit-ish vector per part name). Twist-free: each local
    rotation is the minimal rotation from the rest offset to the target.
    """
    tree = tree or default_tree()
    params = mean_params()
    frames: dict[int, np.ndarray] = {}
    for i, name in enumerate(tree.part_names):
        parent = tree.parent[i]
        g_parent = np.eye(3) if parent < 0 else frames[parent]
        d = np.asarray(directions[name], dtype=np.float64)
        r = rotation_between(tree.offsets[i], g_parent.T @ (d / np.linalg.norm(d)))
        params.r[i] = r
        frames[i] = g_parent @ axis_angle_to_matrix(r)
    return params


def outer_surface(
    params: EllipBodyParams,
    subdivision: int = 2,
    tree: KinematicTree | None = None,
    table: ShapeTable | None = None,
) -> TriMesh:
    """The body's visible skin: the merged part surface with vertices lying
    inside any *other* part's ellipsoid removed, along with faces touching
    them. Penetration-free with respect to all 20 ellipsoids by construction.
    """
    partset = build(params, subdivision, tree=tree, table=table)
    specs = ellipsoid_specs(params, tree=tree, table=table)
    verts_out, faces_out = [], []
    offset = 0
    for i, mesh in enumerate(partset.parts):
        inside_other = np.zeros(mesh.n_vertices, dtype=bool)
        for j, spec in enumerate(specs):
            if j != i:
                inside_other |= ellipsoid_distance(mesh.vertices, spec) < 1.0 - 1e-9
        keep = ~inside_other
        new_index = np.full(mesh.n_vertices, -1, dtype=np.int64)
        new_index[keep] = offset + np.arange(int(keep.sum()))
        verts_out.append(mesh.vertices[keep])
        face_ok = keep[mesh.faces].all(axis=1)
        faces_out.append(new_index[mesh.faces[face_ok]])
        offset += int(keep.sum())
    return TriMesh(np.concatenate(verts_out), np.concatenate(faces_out).astype(np.int32))


def ellipsoid_distance(v: np.ndarray, spec: EllipsoidSpec) -> np.ndarray | float:
    """Normalized center-to-point distance: <1 inside, =1 on the surface, >1 outside."""
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    d = (np.atleast_2d(v) - spec.center) @ spec.rotation   # rows of R^T (v - C)
    scaled = d / spec.semi_axes
    e = np.linalg.norm(scaled, axis=1)
    return float(e[0]) if single else e


def ellipsoid_distance_gradient(v: np.ndarray, spec: EllipsoidSpec) -> np.ndarray:
    """d e / d v for (n, 3) points; zero rows where e == 0 (the center)."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    d = (v - spec.center) @ spec.rotation
    inv = 1.0 / spec.semi_axes
    scaled = d * inv
    e = np.linalg.norm(scaled, axis=1)
    safe = np.where(e > 1e-12, e, 1.0)
    # de/dv = R diag(1/a) g_hat with g = diag(1/a) R^T (v - C)
    grad = (scaled * inv) @ spec.rotation.T / safe[:, None]
    grad[e <= 1e-12] = 0.0
    return grad


def pack_params(params: EllipBodyParams) -> np.ndarray:
    vec = np.empty(N_PARAMS)
    vec[R_BLOCK] = params.r.ravel()
    vec[ROOT_BLOCK] = params.root_translation
    vec[L_BLOCK] = params.l
    vec[T_BLOCK] = params.t
    return vec


def unpack_params(vec: np.ndarray, template: EllipBodyParams) -> EllipBodyParams:
    return EllipBodyParams(
        r=vec[R_BLOCK].reshape(N_PARTS, 3),
        l=vec[L_BLOCK].copy(),
        t=vec[T_BLOCK].copy(),
        root_translation=vec[ROOT_BLOCK].copy(),
        cam=WeakPerspectiveCamera(template.cam.s, template.cam.tx, template.cam.ty),
    )
