"""Triangle meshes, icosphere subdivision, rotation utilities and ellipsoid deformation.

All quantities are float64 numpy arrays: points/vectors are shape (3,) or (n, 3),
rotations are (3, 3) row-major matrices acting on column vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TINY_ANGLE = 1e-8


@dataclass(frozen=True)
class TriMesh:
    """Vertices (V, 3) in meters plus triangular faces (F, 3) of vertex indices.

    Faces wind counter-clockwise when viewed from outside for the closed meshes
    produced in this package.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int32))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise ValueError(f"{int(degen.sum())} degenerate face(s) with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class EllipsoidSpec:
    """An oriented ellipsoid: rotation (3,3), center (3,) and full axis extents.

    `length` is the full extent along the local x axis (the bone axis);
    `thickness1`/`thickness2` are full extents along local y/z. Semi-axes are
    half these values, so the two long-axis endpoints are exactly `length` apart.
    """

    rotation: np.ndarray
    center: np.ndarray
    length: float
    thickness1: float
    thickness2: float

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be (3, 3)")
        if self.center.shape != (3,):
            raise ValueError("center must be (3,)")
        if min(self.length, self.thickness1, self.thickness2) <= 0.0:
            raise ValueError("ellipsoid extents must be strictly positive")

    @property
    def semi_axes(self) -> np.ndarray:
        return np.array([self.length, self.thickness1, self.thickness2]) / 2.0


def icosahedron() -> TriMesh:
    """The regular unit icosahedron: 12 vertices on the unit sphere, 20 faces."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int32,
    )
    return TriMesh(verts, faces)


def edge_face_counts(mesh: TriMesh) -> dict[tuple[int, int], int]:
    """Number of faces incident to each undirected edge."""
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in mesh.faces:
        for i, j in ((a, b), (b, c), (c, a)):
            key = (int(min(i, j)), int(max(i, j)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def euler_characteristic(mesh: TriMesh) -> int:
    return mesh.n_vertices - len(edge_face_counts(mesh)) + mesh.n_faces


def subdivide(mesh: TriMesh, times: int, reproject: bool = True) -> TriMesh:
    """Split every face into 4 via edge midpoints, `times` times.

    With `reproject` (the icosphere case) new midpoints are pushed back onto the
    unit sphere. Rejects non-manifold input: every edge must be shared by
    exactly two faces.
    """
    if times < 0:
        raise ValueError("times must be non-negative")
    if any(c != 2 for c in edge_face_counts(mesh).values()):
        raise ValueError("subdivide requires a closed manifold mesh (every edge shared by 2 faces)")
    if times == 0:
        return mesh

    verts = mesh.vertices
    faces = mesh.faces
    for _ in range(times):
        vert_list = list(verts)
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key in cache:
                return cache[key]
            v = (verts[i] + verts[j]) * 0.5
            if reproject:
                v = v / np.linalg.norm(v)
            vert_list.append(v)
            cache[key] = len(vert_list) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vert_list, dtype=np.float64)
        faces = np.array(new_faces, dtype=np.int32)
    return TriMesh(verts, faces)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def axis_angle_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues map: |r| is the angle in radians, r/|r| the axis."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    k = skew(r)
    if theta < TINY_ANGLE:
        # first-order Taylor branch, exact at r = 0
        return np.eye(3) + k
    return np.eye(3) + (np.sin(theta) / theta) * k + ((1.0 - np.cos(theta)) / theta**2) * (k @ k)


def axis_angle_derivatives(r: np.ndarray) -> np.ndarray:
    """d(Rodrigues)/dr as a (3, 3, 3) array; [c] is the derivative w.r.t. r[c].

    Uses the Gallego-Yezzi closed form away from zero and the generator limit
    dR/dr_c -> [e_c]_x near zero.
    """
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    out = np.empty((3, 3, 3))
    if theta < TINY_ANGLE:
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1.0
            out[c] = skew(e)
        return out
    rot = axis_angle_to_matrix(r)
    eye = np.eye(3)
    for c in range(3):
        e = eye[c]
        out[c] = (skew(r) * r[c] + skew(np.cross(r, (eye - rot) @ e))) @ rot / theta**2
    return out


def matrix_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues map; returns the axis-angle with angle in [0, pi]."""
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < TINY_ANGLE:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # near pi the skew part degenerates; recover the axis from R + I
        m = (rot + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        # fix component signs from the off-diagonal products
        k = int(np.argmax(axis))
        axis = m[k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on columns in order; third column sign fixed so det = +1.

    Raises on rank-deficient input (degenerate rotation estimate).
    """
    m = np.asarray(m, dtype=np.float64)
    q = np.empty((3, 3))
    for c in range(3):
        v = m[:, c].copy()
        for p in range(c):
            v -= (q[:, p] @ m[:, c]) * q[:, p]
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ValueError("orthonormalize: columns are linearly dependent")
        q[:, c] = v / n
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Axis-angle of the minimal rotation taking direction `a` onto `b`.

    The antiparallel case picks an arbitrary perpendicular axis (half turn).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(a @ b)
    if s < 1e-12:
        if c > 0.0:
            return np.zeros(3)
        perp = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, perp)
        return axis / np.linalg.norm(axis) * np.pi
    return axis / s * np.arctan2(s, c)


def rotation_aligning_x(direction: np.ndarray) -> np.ndarray:
    """Minimal rotation matrix mapping the +x axis onto `direction`."""
    return axis_angle_to_matrix(rotation_between(np.array([1.0, 0.0, 0.0]), direction))


def deform_ellipsoid(spec: EllipsoidSpec, base: TriMesh) -> TriMesh:
    """Map a unit-sphere-approximating mesh through v -> R diag(l/2, t1/2, t2/2) v + C."""
    scaled = base.vertices * spec.semi_axes
    return TriMesh(scaled @ spec.rotation.T + spec.center, base.faces)


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise ValueError(f"no vertices found in OBJ file {path}")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int32).reshape(-1, 3))
