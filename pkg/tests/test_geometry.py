import numpy as np
import pytest

from bridgekit.geometry import TriMesh, edge_incidence, marching_cubes, sample_surface, write_obj
from bridgekit.grid import Primitive, ShapeSpec, VoxelGrid, sdf_from_spec, to_tudf


def analytic_sphere(n=32, r=5.0):
    c = (n - 1) / 2
    idx = np.indices((n, n, n), dtype=np.float64)
    return np.sqrt(((idx - c) ** 2).sum(0)) - r, c


def trilinear(field, p):
    """Plain trilinear interpolation at a point inside the grid."""
    i0 = np.minimum(np.floor(p).astype(int), np.array(field.shape) - 2)
    f = p - i0
    out = 0.0
    for corner in np.ndindex(2, 2, 2):
        w = np.prod([f[k] if corner[k] else 1 - f[k] for k in range(3)])
        out += w * field[tuple(i0 + np.array(corner))]
    return out


def test_sphere_vertices_on_true_surface():
    field, c = analytic_sphere()
    mesh = marching_cubes(field, iso=0.0)
    assert not mesh.empty
    radii = np.linalg.norm(mesh.vertices - c, axis=1)
    assert np.all(np.abs(radii - 5.0) < 0.5)


def test_sphere_mesh_is_watertight():
    field, _ = analytic_sphere()
    mesh = marching_cubes(field, iso=0.0)
    counts = edge_incidence(mesh)
    assert set(counts.values()) == {2}


def test_vertices_interpolate_to_iso():
    field, _ = analytic_sphere(16, 4.3)
    mesh = marching_cubes(field, iso=0.0)
    # every vertex lies on a grid edge, where trilinear reduces to the linear edge interpolant
    vals = np.array([trilinear(field, v) for v in mesh.vertices])
    assert np.abs(vals).max() < 1e-4


def test_udf_shell_and_degenerate_filter():
    spec = ShapeSpec((Primitive("box", (7.5, 7.5, 7.5), (3.0, 2.0, 2.5)),))
    udf = to_tudf(sdf_from_spec(spec, (16, 16, 16), 3.0))
    mesh = marching_cubes(udf)
    assert not mesh.empty
    assert np.all(mesh.areas > 0)
    assert np.all(np.isfinite(mesh.vertices))
    assert mesh.triangles.min() >= 0 and mesh.triangles.max() < len(mesh.vertices)


def test_constant_field_gives_empty_mesh():
    assert marching_cubes(VoxelGrid(np.full((8, 8, 8), 3.0), "UDF")).empty
    with pytest.raises(ValueError):
        marching_cubes(np.zeros((1, 4, 4)))


def test_scaling_field_and_iso_keeps_mesh():
    field, _ = analytic_sphere(16, 4.3)
    a = marching_cubes(field, 0.5)
    b = marching_cubes(4.0 * field, 2.0)
    np.testing.assert_array_equal(a.triangles, b.triangles)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-9)


def test_extraction_deterministic():
    field, _ = analytic_sphere(16, 4.3)
    a, b = marching_cubes(field, 0.0), marching_cubes(field, 0.0)
    assert a.vertices.tobytes() == b.vertices.tobytes() and a.triangles.tobytes() == b.triangles.tobytes()


# sampling --------------------------------------------------------------------


def test_single_triangle_samples_inside():
    tri = TriMesh(np.array([[0.0, 0, 0], [2, 0, 0], [0, 3, 0]]), np.array([[0, 1, 2]]))
    pts = sample_surface(tri, 5000, np.random.default_rng(0))
    u, v = pts[:, 0] / 2, pts[:, 1] / 3
    assert np.all(u >= -1e-12) and np.all(v >= -1e-12) and np.all(u + v <= 1 + 1e-12)
    assert np.all(pts[:, 2] == 0)


def test_area_proportional_sampling():
    # two disjoint triangles, the first with three times the area of the second
    verts = np.array([[0.0, 0, 0], [3, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 2, 0]])
    mesh = TriMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]))
    np.testing.assert_allclose(mesh.areas, [3.0, 1.0])
    n = 100_000
    pts = sample_surface(mesh, n, np.random.default_rng(1))
    k = int((pts[:, 0] < 5).sum())
    # multinomial oracle: count in the big triangle ~ Binomial(n, 3/4)
    p = 0.75
    assert abs(k - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_sampling_deterministic_and_errors():
    field, _ = analytic_sphere(16, 4.3)
    mesh = marching_cubes(field, 0.0)
    a = sample_surface(mesh, 100, np.random.default_rng(3))
    b = sample_surface(mesh, 100, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
    assert sample_surface(mesh).shape == (10_000, 3)
    with pytest.raises(ValueError):
        sample_surface(TriMesh.empty_mesh(), 10)
    with pytest.raises(ValueError):
        sample_surface(mesh, 0)


def test_obj_export(tmp_path):
    mesh = TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0.5]]), np.array([[0, 1, 2]]))
    write_obj(mesh, tmp_path / "m.obj")
    raw = (tmp_path / "m.obj").read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines() == ["v 0.000000 0.000000 0.000000", "v 1.000000 0.000000 0.000000",
                                         "v 0.000000 1.000000 0.500000", "f 1 2 3"]
