"""Part-level rasterizer: forward label-map rendering plus the approximate
backward pass (edge-sweep x/y gradients with occlusion masking, and the
depth-axis gradient that pulls wrongly-occluded faces toward the camera).

Rasterization is binary coverage at pixel centers; the face with minimum
barycentric-interpolated depth wins, ties broken by (part, face) scan order.
Back-faces rasterize like front faces. x/y gradients are reported in pixel
(grid) units; depth gradients in camera-space depth units.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from PIL import Image

from .body import PartSet
from .camera import WeakPerspectiveCamera, norm_to_pixel, project_weak

EPS_DIST = 1e-6
MIN_SWEEP_PX = 1.0   # edge-sweep distances are clamped to one pixel, bounding slopes at |residual|


@dataclass
class ProjectedParts:
    """Per-part screen-space and camera-space vertices ready for rasterization."""

    pix: list[np.ndarray]        # per part (n, 3): x_pix, y_pix, depth
    cam_pts: list[np.ndarray]    # per part (n, 3) camera-space points (meters)
    faces: list[np.ndarray]      # per part (m, 3) vertex indices
    part_to_class: np.ndarray
    n_classes: int
    width: int
    height: int
    joints_norm: np.ndarray | None = None

    @property
    def n_parts(self) -> int:
        return len(self.pix)

    @cached_property
    def flat(self) -> "_FlatScene":
        return _FlatScene(self)


class _FlatScene:
    """Part-major flattened views of a projected scene."""

    def __init__(self, proj: ProjectedParts):
        counts = [len(v) for v in proj.pix]
        self.vert_offset = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.verts_pix = np.concatenate(proj.pix) if counts else np.zeros((0, 3))
        self.verts_cam = np.concatenate(proj.cam_pts) if counts else np.zeros((0, 3))
        gfaces, fpart, flocal = [], [], []
        for p, f in enumerate(proj.faces):
            gfaces.append(f.astype(np.int64) + self.vert_offset[p])
            fpart.append(np.full(len(f), p, dtype=np.int32))
            flocal.append(np.arange(len(f), dtype=np.int32))
        self.face_verts = np.concatenate(gfaces) if gfaces else np.zeros((0, 3), dtype=np.int64)
        self.face_part = np.concatenate(fpart) if fpart else np.zeros(0, dtype=np.int32)
        self.face_local = np.concatenate(flocal) if flocal else np.zeros(0, dtype=np.int32)
        self.tri = self.verts_pix[self.face_verts]          # (T, 3, 3)
        self.face_class = proj.part_to_class[self.face_part] if len(self.face_part) else self.face_part


@dataclass
class RasterOutput:
    """Forward rendering products: face/part index maps, coverage, depth, class maps."""

    part_map: np.ndarray         # (h, w) int32, -1 where empty
    face_map: np.ndarray         # (h, w) int32 local face index within the part, -1 empty
    class_map: np.ndarray        # (h, w) int32, -1 where empty
    alpha: np.ndarray            # (h, w) uint8
    depth: np.ndarray            # (h, w) float64, +inf where empty
    class_maps: np.ndarray       # (C, h, w) uint8, pairwise disjoint, union == alpha
    joints_2d: np.ndarray | None = None   # (N, 2) normalized image coordinates


@dataclass
class OcclusionEvent:
    """A pixel whose target class is hidden behind another part.

    Geometry is in camera space: q is the point of the occluded face under the
    pixel ray, m0 the intersection of the v0->q line with edge v1-v2, dz the
    (positive) depth gap to the occluding face.
    """

    pixel: tuple[int, int]       # (iy, ix)
    part: int
    face: int
    vertex_ids: np.ndarray       # (3,) local vertex indices of the occluded face
    occluder_part: int
    occluder_face: int
    q: np.ndarray
    m0: np.ndarray
    dz: float
    residual: float              # rendered minus target at the pixel (typically -1)


def project_parts(
    partset: PartSet, cam: WeakPerspectiveCamera, width: int, height: int
) -> ProjectedParts:
    pix, cam_pts, faces = [], [], []
    for mesh in partset.parts:
        uv, depth = project_weak(mesh.vertices, cam)
        xy = norm_to_pixel(uv, width, height)
        pix.append(np.column_stack([xy, depth]))
        cam_pts.append(mesh.vertices.copy())
        faces.append(mesh.faces)
    joints_norm, _ = project_weak(partset.skeleton, cam)
    return ProjectedParts(
        pix=pix, cam_pts=cam_pts, faces=faces,
        part_to_class=partset.part_to_class, n_classes=partset.n_classes,
        width=width, height=height, joints_norm=joints_norm,
    )


def _rasterize_faces(tri: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer over an array of screen-space triangles.

    Returns (face index map (h, w) into `tri`, -1 where empty; depth map).
    The minimum-depth face wins; exact depth ties go to the lowest face index.
    """
    sentinel = np.iinfo(np.int64).max
    face_idx = np.full(height * width, sentinel, dtype=np.int64)
    depth_buf = np.full(height * width, np.inf)
    n_faces = len(tri)
    if n_faces == 0:
        face_idx[:] = -1
        return face_idx.reshape(height, width).astype(np.int32), depth_buf.reshape(height, width)

    x = tri[:, :, 0]
    y = tri[:, :, 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (y[:, 1] - y[:, 0]) * (x[:, 2] - x[:, 0])
    ix0 = np.maximum(np.ceil(x.min(axis=1) - 0.5), 0).astype(np.int64)
    ix1 = np.minimum(np.floor(x.max(axis=1) - 0.5), width - 1).astype(np.int64)
    iy0 = np.maximum(np.ceil(y.min(axis=1) - 0.5), 0).astype(np.int64)
    iy1 = np.minimum(np.floor(y.max(axis=1) - 0.5), height - 1).astype(np.int64)
    nx = ix1 - ix0 + 1
    ny = iy1 - iy0 + 1
    keep = (nx > 0) & (ny > 0) & (area2 != 0.0)
    kept = np.flatnonzero(keep)
    if len(kept) == 0:
        face_idx[:] = -1
        return face_idx.reshape(height, width).astype(np.int32), depth_buf.reshape(height, width)

    counts = (nx[kept] * ny[kept]).astype(np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())
    fid = np.repeat(np.arange(len(kept)), counts)
    k = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    gx = ix0[kept][fid] + k % nx[kept][fid]
    gy = iy0[kept][fid] + k // nx[kept][fid]
    pcx = gx + 0.5
    pcy = gy + 0.5

    t = tri[kept][fid]
    x0, y0, z0 = t[:, 0, 0], t[:, 0, 1], t[:, 0, 2]
    x1, y1, z1 = t[:, 1, 0], t[:, 1, 1], t[:, 1, 2]
    x2, y2, z2 = t[:, 2, 0], t[:, 2, 1], t[:, 2, 2]
    w0 = (x2 - x1) * (pcy - y1) - (y2 - y1) * (pcx - x1)
    w1 = (x0 - x2) * (pcy - y2) - (y0 - y2) * (pcx - x2)
    w2 = (x1 - x0) * (pcy - y0) - (y1 - y0) * (pcx - x0)
    inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
    if not inside.any():
        face_idx[:] = -1
        return face_idx.reshape(height, width).astype(np.int32), depth_buf.reshape(height, width)

    sel = np.flatnonzero(inside)
    depth = (w0[sel] * z0[sel] + w1[sel] * z1[sel] + w2[sel] * z2[sel]) / (
        w0[sel] + w1[sel] + w2[sel]
    )
    lin = gy[sel] * width + gx[sel]
    gface = kept[fid[sel]]
    np.minimum.at(depth_buf, lin, depth)
    ties = depth == depth_buf[lin]
    np.minimum.at(face_idx, lin[ties], gface[ties])
    face_idx[~np.isfinite(depth_buf)] = -1
    return face_idx.reshape(height, width).astype(np.int32), depth_buf.reshape(height, width)


def rasterize(proj: ProjectedParts) -> RasterOutput:
    """Render part/face index maps, coverage and per-class binary maps."""
    flat = proj.flat
    h, w = proj.height, proj.width
    gidx, depth = _rasterize_faces(flat.tri, w, h)
    covered = gidx >= 0
    if len(flat.tri) and covered.any():
        part_map = np.where(covered, flat.face_part[np.maximum(gidx, 0)], -1).astype(np.int32)
        face_map = np.where(covered, flat.face_local[np.maximum(gidx, 0)], -1).astype(np.int32)
        class_map = np.where(covered, proj.part_to_class[np.maximum(part_map, 0)], -1).astype(np.int32)
    else:
        part_map = np.full((h, w), -1, dtype=np.int32)
        face_map = np.full((h, w), -1, dtype=np.int32)
        class_map = np.full((h, w), -1, dtype=np.int32)
    alpha = covered.astype(np.uint8)
    class_maps = np.zeros((proj.n_classes, h, w), dtype=np.uint8)
    for c in range(proj.n_classes):
        class_maps[c] = (class_map == c).astype(np.uint8)
    return RasterOutput(
        part_map=part_map, face_map=face_map, class_map=class_map,
        alpha=alpha, depth=depth, class_maps=class_maps, joints_2d=proj.joints_norm,
    )


def render(
    partset: PartSet, cam: WeakPerspectiveCamera, width: int, height: int
) -> RasterOutput:
    """Convenience composition: project the part set and joints, then rasterize."""
    return rasterize(project_parts(partset, cam, width, height))


@dataclass
class VertexGradients:
    """Accumulated per-vertex gradients of the segmentation residual.

    x/y columns are slopes in pixel (grid) units; the z column is in depth
    units (meters under the weak-perspective camera).
    """

    per_part: list[np.ndarray]

    @classmethod
    def zeros(cls, proj: ProjectedParts) -> "VertexGradients":
        return cls([np.zeros((len(v), 3)) for v in proj.pix])

    def add(self, other: "VertexGradients") -> "VertexGradients":
        for mine, theirs in zip(self.per_part, other.per_part):
            mine += theirs
        return self


def _row_intervals(tri: np.ndarray, lo: int, hi: int, axis: int):
    """Sweep-line intervals of each triangle against pixel-center rows (axis=1)
    or columns (axis=0).

    Returns flat arrays (face_idx, line_idx, lo_coord, hi_coord) sorted by line.
    """
    sweep = tri[:, :, 1 - axis]   # coordinate defining the line (y for rows)
    other = tri[:, :, axis]       # coordinate the interval lives on
    i0 = np.maximum(np.ceil(sweep.min(axis=1) - 0.5), lo).astype(np.int64)
    i1 = np.minimum(np.floor(sweep.max(axis=1) - 0.5), hi).astype(np.int64)
    n = i1 - i0 + 1
    keep = n > 0
    kept = np.flatnonzero(keep)
    if len(kept) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0), np.zeros(0)
    counts = n[kept]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())
    fidx = np.repeat(kept, counts)
    line = i0[kept].repeat(counts) + (np.arange(total) - np.repeat(starts, counts))
    line_c = line + 0.5

    lo_x = np.full(total, np.inf)
    hi_x = np.full(total, -np.inf)
    for e in range(3):
        a, b = e, (e + 1) % 3
        ya = sweep[fidx, a]
        yb = sweep[fidx, b]
        xa = other[fidx, a]
        xb = other[fidx, b]
        denom = yb - ya
        valid = (np.minimum(ya, yb) <= line_c) & (line_c <= np.maximum(ya, yb)) & (denom != 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (line_c - ya) / denom * (xb - xa)
        lo_x = np.where(valid, np.minimum(lo_x, xint), lo_x)
        hi_x = np.where(valid, np.maximum(hi_x, xint), hi_x)
    crossing = lo_x <= hi_x
    order = np.argsort(line[crossing], kind="stable")
    return fidx[crossing][order], line[crossing][order], lo_x[crossing][order], hi_x[crossing][order]


def _axis_pass(
    delta: np.ndarray,
    tri: np.ndarray,
    face_verts: np.ndarray,
    grad_flat: np.ndarray,
    axis: int,
    width: int,
    height: int,
) -> None:
    """One edge-sweep gradient pass along x (axis=0) or y (axis=1).

    For every residual pixel and candidate face crossing its row/column the
    contribution -|delta| / (pixel - nearest crossing edge) goes to all three
    face vertices; covered pixels take only their covering faces, uncovered
    pixels every crossing face.
    """
    ys, xs = np.nonzero(delta)
    if len(ys) == 0:
        return
    dvals = delta[ys, xs].astype(np.float64)
    pix_line = ys if axis == 0 else xs          # the line each pixel lives on
    pix_coord = (xs if axis == 0 else ys) + 0.5
    n_lines = height if axis == 0 else width

    fidx, line, lo_x, hi_x = _row_intervals(tri, 0, n_lines - 1, axis)
    if len(fidx) == 0:
        return
    line_start = np.searchsorted(line, np.arange(n_lines))
    line_end = np.searchsorted(line, np.arange(n_lines), side="right")

    counts = line_end[pix_line] - line_start[pix_line]
    if counts.sum() == 0:
        return
    pair_pix = np.repeat(np.arange(len(ys)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pair_int = line_start[pix_line][pair_pix] + (np.arange(int(counts.sum())) - np.repeat(starts, counts))

    pc = pix_coord[pair_pix]
    d = dvals[pair_pix]
    xl = lo_x[pair_int]
    xr = hi_x[pair_int]
    covered = (xl <= pc) & (pc <= xr)
    keep = np.where(d > 0, covered, ~covered)
    if not keep.any():
        return
    pc, d, xl, xr, pair_int = pc[keep], d[keep], xl[keep], xr[keep], pair_int[keep]
    near = np.where(np.abs(pc - xl) <= np.abs(pc - xr), xl, xr)
    dstar = pc - near
    nz = dstar != 0
    # pixels sitting almost on an edge would otherwise dominate with noise-sign
    # spikes; the sweep distance is at least one pixel
    dstar = np.sign(dstar) * np.maximum(np.abs(dstar), MIN_SWEEP_PX)
    g = np.where(nz, -np.abs(d) / dstar, 0.0)

    verts = face_verts[fidx[pair_int]]          # (M, 3) global vertex ids
    np.add.at(grad_flat[:, axis], verts.ravel(), np.repeat(g, 3))


def backward_xy(
    raster: RasterOutput, targets: np.ndarray, proj: ProjectedParts
) -> VertexGradients:
    """Edge-sweep x/y gradients of the per-class segmentation residual.

    `targets` is (C, h, w) binary. Pixels rendered by a different class are
    masked to zero (they are handled by the depth-axis gradient instead).
    Gradients are slopes of the squared residual: descent moves silhouette
    edges toward the target boundaries.
    """
    if targets.shape != (proj.n_classes, proj.height, proj.width):
        raise ValueError(
            f"targets shape {targets.shape} != {(proj.n_classes, proj.height, proj.width)}"
        )
    flat = proj.flat
    grad_flat = np.zeros((len(flat.verts_pix), 3))
    for c in range(proj.n_classes):
        delta = raster.class_maps[c].astype(np.int8) - (targets[c] > 0).astype(np.int8)
        delta[(raster.alpha > 0) & (raster.class_map != c)] = 0
        if not delta.any():
            continue
        face_sel = np.flatnonzero(flat.face_class == c)
        if len(face_sel) == 0:
            continue
        tri = flat.tri[face_sel]
        fverts = flat.face_verts[face_sel]
        _axis_pass(delta, tri, fverts, grad_flat, 0, proj.width, proj.height)
        _axis_pass(delta, tri, fverts, grad_flat, 1, proj.width, proj.height)
    out = VertexGradients.zeros(proj)
    for p in range(proj.n_parts):
        out.per_part[p][:] = grad_flat[flat.vert_offset[p]: flat.vert_offset[p + 1]]
        out.per_part[p][:, 2] = 0.0
    return out


def detect_occlusions(
    raster: RasterOutput, targets: np.ndarray, proj: ProjectedParts
) -> list[OcclusionEvent]:
    """Find pixels whose target class is hidden behind another part.

    For each such pixel with a face of the wanted class under the ray, builds
    the camera-space occlusion geometry used by the depth gradient. Pixels with
    no face of the class under the ray produce no event.
    """
    flat = proj.flat
    h, w = proj.height, proj.width
    events: list[OcclusionEvent] = []
    for c in range(proj.n_classes):
        contested = (targets[c] > 0) & (raster.alpha > 0) & (raster.class_map != c)
        if not contested.any():
            continue
        face_sel = np.flatnonzero(flat.face_class == c)
        if len(face_sel) == 0:
            continue
        sub_idx, sub_depth = _rasterize_faces(flat.tri[face_sel], w, h)
        hit = contested & (sub_idx >= 0)
        ys, xs = np.nonzero(hit)
        if len(ys) == 0:
            continue
        gface = face_sel[sub_idx[ys, xs]]
        tri = flat.tri[gface]                            # screen coords (M, 3, 3)
        cam = flat.verts_cam[flat.face_verts[gface]]     # camera space (M, 3, 3)
        pcx = xs + 0.5
        pcy = ys + 0.5
        w0 = (tri[:, 2, 0] - tri[:, 1, 0]) * (pcy - tri[:, 1, 1]) - (tri[:, 2, 1] - tri[:, 1, 1]) * (pcx - tri[:, 1, 0])
        w1 = (tri[:, 0, 0] - tri[:, 2, 0]) * (pcy - tri[:, 2, 1]) - (tri[:, 0, 1] - tri[:, 2, 1]) * (pcx - tri[:, 2, 0])
        w2 = (tri[:, 1, 0] - tri[:, 0, 0]) * (pcy - tri[:, 0, 1]) - (tri[:, 1, 1] - tri[:, 0, 1]) * (pcx - tri[:, 0, 0])
        wsum = w0 + w1 + w2
        b = np.stack([w0, w1, w2], axis=1) / wsum[:, None]
        q = np.einsum("mk,mkd->md", b, cam)
        w12 = b[:, 1] + b[:, 2]
        safe = np.where(np.abs(w12) > 1e-12, w12, 1.0)
        m0 = (b[:, 1, None] * cam[:, 1] + b[:, 2, None] * cam[:, 2]) / safe[:, None]
        dz = sub_depth[ys, xs] - raster.depth[ys, xs]
        occ_part = raster.part_map[ys, xs]
        occ_face = raster.face_map[ys, xs]
        part = flat.face_part[gface]
        local = flat.face_local[gface]
        for m in range(len(ys)):
            if abs(w12[m]) <= 1e-12:
                continue  # ray through the face's first vertex: lever undefined
            events.append(
                OcclusionEvent(
                    pixel=(int(ys[m]), int(xs[m])),
                    part=int(part[m]),
                    face=int(local[m]),
                    vertex_ids=proj.faces[part[m]][local[m]].copy(),
                    occluder_part=int(occ_part[m]),
                    occluder_face=int(occ_face[m]),
                    q=q[m],
                    m0=m0[m],
                    dz=float(dz[m]),
                    residual=float(raster.class_maps[c][ys[m], xs[m]]) - 1.0,
                )
            )
    return events


def backward_z(
    events: list[OcclusionEvent], lam: float, proj: ProjectedParts
) -> VertexGradients:
    """Depth gradients from occlusion events (logarithmic lever-arm form).

    Descent on the returned gradient decreases the occluded face's depth,
    pulling it toward the camera. Distances below EPS_DIST are clamped.
    """
    out = VertexGradients.zeros(proj)
    for ev in events:
        verts = proj.cam_pts[ev.part][ev.vertex_ids]
        dq = np.linalg.norm(ev.m0 - ev.q)
        dz = max(ev.dz, EPS_DIST)
        for k in range(3):
            dv = max(np.linalg.norm(ev.m0 - verts[k]), EPS_DIST)
            mag = lam * abs(ev.residual) * np.log(dq / (dv * dz) + 1.0)
            out.per_part[ev.part][ev.vertex_ids[k], 2] += mag
    return out


# ---------------------------------------------------------------------------
# label-map image export / import


def default_palette(n_classes: int) -> list[list[int]]:
    """Deterministic color table: index 0 is background black."""
    colors = [[0, 0, 0]]
    for c in range(n_classes):
        r, g, b = colorsys.hsv_to_rgb((c * 0.61803398875) % 1.0, 0.75, 0.95)
        colors.append([int(r * 255), int(g * 255), int(b * 255)])
    return colors


def label_map(raster: RasterOutput) -> np.ndarray:
    """(h, w) uint8 label image: 0 background, class k -> k + 1."""
    return (raster.class_map + 1).astype(np.uint8)


def save_label_png(labels: np.ndarray, n_classes: int, path) -> None:
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    palette = default_palette(n_classes)
    flat = []
    for rgb in palette:
        flat.extend(rgb)
    flat.extend([0] * (768 - len(flat)))
    img.putpalette(flat)
    img.save(path, format="PNG")


def save_palette_json(class_names: list[str], path) -> None:
    palette = default_palette(len(class_names))
    doc = {
        "background": 0,
        "classes": [
            {"id": i + 1, "name": name, "rgb": palette[i + 1]}
            for i, name in enumerate(class_names)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint8)


def load_palette_json(path) -> list[str]:
    with open(path) as fh:
        doc = json.load(fh)
    classes = sorted(doc["classes"], key=lambda c: c["id"])
    if [c["id"] for c in classes] != list(range(1, len(classes) + 1)):
        raise ValueError("palette class ids must be 1..C")
    return [c["name"] for c in classes]


def label_to_class_maps(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Expand a label image into (C, h, w) binary maps (label 0 = background)."""
    if labels.max(initial=0) > n_classes:
        raise ValueError(f"label image contains class {labels.max()} > {n_classes}")
    maps = np.zeros((n_classes, *labels.shape), dtype=np.uint8)
    for c in range(n_classes):
        maps[c] = (labels == c + 1).astype(np.uint8)
    return maps
