import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ellipbody import geometry as g


def test_icosahedron_combinatorics():
    ico = g.icosahedron()
    assert ico.n_vertices == 12
    assert ico.n_faces == 20
    assert g.euler_characteristic(ico) == 2


def test_icosahedron_unit_vertices():
    ico = g.icosahedron()
    assert np.abs(np.linalg.norm(ico.vertices, axis=1) - 1.0).max() < 1e-9


def test_icosahedron_outward_winding():
    ico = g.icosahedron()
    v = ico.vertices[ico.faces]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    centroids = v.mean(axis=1)
    assert (np.einsum("ij,ij->i", normals, centroids) > 0).all()


def test_subdivide_once_counts():
    sub = g.subdivide(g.icosahedron(), 1)
    assert sub.n_vertices == 42          # V0 + E0 = 12 + 30
    assert sub.n_faces == 80


def test_subdivide_zero_is_identity():
    ico = g.icosahedron()
    sub = g.subdivide(ico, 0)
    assert np.array_equal(sub.vertices, ico.vertices)
    assert np.array_equal(sub.faces, ico.faces)


def test_subdivide_three_levels():
    assert g.subdivide(g.icosahedron(), 3).n_faces == 20 * 4**3


def test_subdivide_reprojects_to_sphere():
    sub = g.subdivide(g.icosahedron(), 2)
    assert np.abs(np.linalg.norm(sub.vertices, axis=1) - 1.0).max() < 1e-12


def test_subdivide_rejects_non_manifold():
    open_mesh = g.TriMesh(np.eye(3), np.array([[0, 1, 2]], dtype=np.int32))
    with pytest.raises(ValueError, match="manifold"):
        g.subdivide(open_mesh, 1)


@pytest.mark.parametrize("times", [0, 1, 2, 3])
def test_subdivide_watertight_and_euler(times):
    sub = g.subdivide(g.icosahedron(), times)
    counts = g.edge_face_counts(sub)
    assert all(c == 2 for c in counts.values())
    assert g.euler_characteristic(sub) == 2


def test_axis_angle_zero_is_identity():
    assert np.allclose(g.axis_angle_to_matrix(np.zeros(3)), np.eye(3))


def test_axis_angle_quarter_turn_about_z():
    rot = g.axis_angle_to_matrix(np.array([0.0, 0.0, np.pi / 2]))
    assert np.abs(rot @ np.array([1.0, 0, 0]) - np.array([0.0, 1.0, 0])).max() < 1e-9


def test_axis_angle_half_turn_about_x():
    rot = g.axis_angle_to_matrix(np.array([np.pi, 0.0, 0.0]))
    assert np.abs(rot - np.diag([1.0, -1.0, -1.0])).max() < 1e-9


@given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
       st.floats(1e-3, np.pi - 1e-3))
@settings(max_examples=100)
def test_axis_angle_log_round_trip(axis, angle):
    axis = np.asarray(axis)
    norm = np.linalg.norm(axis)
    if norm < 1e-3:
        axis = np.array([1.0, 0.0, 0.0])
        norm = 1.0
    r = axis / norm * angle
    recovered = g.matrix_to_axis_angle(g.axis_angle_to_matrix(r))
    assert np.abs(recovered - r).max() < 1e-7


def _random_rotation(rng):
    r = rng.normal(size=3)
    return g.axis_angle_to_matrix(r / np.linalg.norm(r) * rng.uniform(0.01, 3.0))


def test_orthonormalize_identity_and_fixed_point():
    assert np.allclose(g.orthonormalize(np.eye(3)), np.eye(3))
    rng = np.random.default_rng(0)
    for _ in range(20):
        rot = _random_rotation(rng)
        assert np.abs(g.orthonormalize(rot) - rot).max() < 1e-9


def test_orthonormalize_scaled_axes():
    m = np.diag([2.0, 1.0, 3.0])
    assert np.allclose(g.orthonormalize(m), np.eye(3))


def test_orthonormalize_rejects_rank_deficient():
    m = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).T
    with pytest.raises(ValueError):
        g.orthonormalize(np.column_stack([m[:, 0], m[:, 0], m[:, 1]]))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=100)
def test_orthonormalize_output_is_rotation(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(3, 3))
    if abs(np.linalg.det(m)) < 1e-6:
        return
    q = g.orthonormalize(m)
    assert np.abs(q.T @ q - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(q) - 1.0) < 1e-6


def test_rotation_aligning_x_cases():
    for d in ([1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, -1], [0.3, -0.5, 0.8]):
        d = np.asarray(d, dtype=float)
        d = d / np.linalg.norm(d)
        rot = g.rotation_aligning_x(d)
        assert np.abs(rot @ np.array([1.0, 0, 0]) - d).max() < 1e-9
        assert abs(np.linalg.det(rot) - 1.0) < 1e-9


def test_deform_ellipsoid_examples():
    base = g.TriMesh(np.array([[1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]]),
                     np.array([[0, 1, 2]], dtype=np.int32))
    spec = g.EllipsoidSpec(np.eye(3), np.zeros(3), 2.0, 1.0, 1.0)
    out = g.deform_ellipsoid(spec, base)
    assert np.allclose(out.vertices[0], [1.0, 0, 0])
    assert np.allclose(out.vertices[1], [0.0, 0.5, 0])
    shifted = g.EllipsoidSpec(np.eye(3), np.array([0.0, 0, 1.0]), 2.0, 1.0, 1.0)
    out2 = g.deform_ellipsoid(shifted, base)
    assert np.allclose(out2.vertices[2], [0.0, 0, 1.5])


def test_deform_ellipsoid_rejects_bad_extents():
    with pytest.raises(ValueError):
        g.EllipsoidSpec(np.eye(3), np.zeros(3), -1.0, 1.0, 1.0)


def test_deform_surface_consistency():
    from ellipbody.body import ellipsoid_distance

    rng = np.random.default_rng(3)
    base = g.subdivide(g.icosahedron(), 1)
    for _ in range(10):
        spec = g.EllipsoidSpec(
            rotation=_random_rotation(rng),
            center=rng.normal(size=3),
            length=rng.uniform(0.1, 2.0),
            thickness1=rng.uniform(0.1, 2.0),
            thickness2=rng.uniform(0.1, 2.0),
        )
        out = g.deform_ellipsoid(spec, base)
        e = ellipsoid_distance(out.vertices, spec)
        assert np.abs(e - 1.0).max() < 1e-6


def test_trimesh_validation():
    with pytest.raises(ValueError, match="degenerate"):
        g.TriMesh(np.eye(3), np.array([[0, 0, 1]], dtype=np.int32))
    with pytest.raises(ValueError, match="out of range"):
        g.TriMesh(np.eye(3), np.array([[0, 1, 5]], dtype=np.int32))


def test_obj_round_trip(tmp_path):
    mesh = g.subdivide(g.icosahedron(), 1)
    path = tmp_path / "mesh.obj"
    g.save_obj(mesh, path)
    back = g.load_obj(path)
    assert np.abs(back.vertices - mesh.vertices).max() < 1e-6
    assert np.array_equal(back.faces, mesh.faces)
