"""Brute-force reference rasterizer for oracle-equivalence tests.

Evaluates every (pixel, face) pair densely with no bounding boxes or
acceleration structures; the frontmost face at each pixel center wins,
exact-depth ties going to the lowest (part, face) scan index.
"""

import numpy as np


def oracle_rasterize(parts_pix, parts_faces, width, height):
    """Returns (part_map, face_map, depth) as (h, w) arrays, -1/inf where empty.

    parts_pix: per part (n, 3) arrays of (x_pix, y_pix, depth) vertices.
    parts_faces: per part (m, 3) vertex index arrays.
    """
    tris = []
    owner = []
    for p, (verts, faces) in enumerate(zip(parts_pix, parts_faces)):
        for j, f in enumerate(faces):
            tris.append(verts[f])
            owner.append((p, j))
    part_map = np.full((height, width), -1, dtype=np.int32)
    face_map = np.full((height, width), -1, dtype=np.int32)
    depth_map = np.full((height, width), np.inf)
    if not tris:
        return part_map, face_map, depth_map

    tri = np.stack(tris)                       # (T, 3, 3)
    x0, y0, z0 = tri[:, 0, 0], tri[:, 0, 1], tri[:, 0, 2]
    x1, y1, z1 = tri[:, 1, 0], tri[:, 1, 1], tri[:, 1, 2]
    x2, y2, z2 = tri[:, 2, 0], tri[:, 2, 1], tri[:, 2, 2]
    area2 = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)

    pcx, pcy = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    px = pcx.ravel()[:, None]                  # (P, 1)
    py = pcy.ravel()[:, None]
    w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
    w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
    inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
    inside &= area2 != 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = (w0 * z0 + w1 * z1 + w2 * z2) / (w0 + w1 + w2)
    depth = np.where(inside, depth, np.inf)

    dmin = depth.min(axis=1)
    covered = np.isfinite(dmin)
    winner = np.argmax(depth == dmin[:, None], axis=1)   # first face achieving the min
    owner = np.asarray(owner, dtype=np.int32)
    flat_part = np.where(covered, owner[winner, 0], -1).astype(np.int32)
    flat_face = np.where(covered, owner[winner, 1], -1).astype(np.int32)
    return (
        flat_part.reshape(height, width),
        flat_face.reshape(height, width),
        dmin.reshape(height, width),
    )
