import itertools

import numpy as np
import pytest

from bridgekit.grid import Primitive, ShapeSpec, VoxelGrid, sdf_from_spec, to_tudf
from bridgekit.views import (
    DepthMap, FileFeatures, PatchDescriptor, ViewFeatures, aggregate_views, load_features,
    render_depth, save_features, shape_features,
)


@pytest.fixture(scope="module")
def sphere_sdf():
    spec = ShapeSpec((Primitive("sphere", (7.5, 7.5, 7.5), (4.0,)),))
    return sdf_from_spec(spec, (16, 16, 16), 3.0)


def ray_sphere_depth(px, py, center=7.5, r=4.0):
    """Analytic entry depth measured from the grid face at -0.5."""
    rho2 = (px - center) ** 2 + (py - center) ** 2
    if rho2 > r * r:
        return np.inf
    return center - np.sqrt(r * r - rho2) + 0.5


def test_front_depth_center_pixel(sphere_sdf):
    d = render_depth(sphere_sdf, "front")
    assert d.shape == (16, 16)
    assert d.depths[7, 7] == pytest.approx(4.0, abs=0.5)
    assert d.depths[7, 7] == pytest.approx(ray_sphere_depth(7, 7), abs=0.1)


def test_depth_matches_analytic_intersection(sphere_sdf):
    d = render_depth(sphere_sdf, "front")
    for px, py in itertools.product(range(16), repeat=2):
        expected = ray_sphere_depth(px, py)
        if np.isinf(expected):
            continue
        # interpolating a sampled SDF is accurate to a fraction of a voxel
        assert d.depths[px, py] == pytest.approx(expected, abs=0.5)


def test_empty_grid_all_miss():
    d = render_depth(VoxelGrid(np.full((8, 8, 8), 3.0)), "top")
    assert not d.hits.any()
    np.testing.assert_array_equal(d.filled(), np.full((8, 8), 8.0))


def test_front_and_left_agree_up_to_transpose(sphere_sdf):
    front = render_depth(sphere_sdf, "front").depths
    left = render_depth(sphere_sdf, "left").depths
    assert np.allclose(front, left.T, equal_nan=True) or np.allclose(front, left, equal_nan=True)


def test_sdf_and_udf_agree_at_same_iso(sphere_sdf):
    for view in ("front", "top", "left"):
        a = render_depth(sphere_sdf, view, iso=1.0).depths
        b = render_depth(to_tudf(sphere_sdf), view).depths
        np.testing.assert_array_equal(a, b)


def test_constant_depth_has_zero_gradients():
    d = DepthMap("front", np.full((8, 8), 3.0), 8.0)
    f = PatchDescriptor(4)(d).values
    assert np.all(f[2] == 0) and np.all(f[3] == 0)
    assert np.all(f[1] == 0)
    np.testing.assert_allclose(f[0], 3.0 / 8.0)
    np.testing.assert_allclose(f[4], 1.0)


def test_mean_depth_matches_direct_patch_average(sphere_sdf):
    d = render_depth(sphere_sdf, "front")
    f = PatchDescriptor(4)(d).values
    filled = np.where(np.isfinite(d.depths), d.depths, 16.0) / 16.0
    for i, j in itertools.product(range(4), repeat=2):
        block = [filled[4 * i + a, 4 * j + b] for a in range(4) for b in range(4)]
        assert f[0, i, j] == pytest.approx(sum(block) / 16, rel=1e-6)
        hits = [np.isfinite(d.depths[4 * i + a, 4 * j + b]) for a in range(4) for b in range(4)]
        assert f[4, i, j] == pytest.approx(sum(hits) / 16)


def test_features_deterministic_and_finite(sphere_sdf):
    d = render_depth(sphere_sdf, "top")
    a, b = PatchDescriptor()(d), PatchDescriptor()(d)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.all(np.isfinite(a.values))


def test_patch_must_divide():
    with pytest.raises(ValueError):
        PatchDescriptor(3)(DepthMap("front", np.zeros((8, 8)), 8.0))


def test_aggregate_views():
    rng = np.random.default_rng(0)
    a, b, c = (ViewFeatures(rng.normal(size=(5, 4, 4))) for _ in range(3))
    np.testing.assert_array_equal(aggregate_views([a, a, a]).values, a.values)
    np.testing.assert_allclose(aggregate_views([a, b]).values, (a.values + b.values) / 2, rtol=1e-6)
    total = np.zeros((5, 4, 4))
    for f in (a, b, c):
        for idx in np.ndindex(total.shape):
            total[idx] += float(f.values[idx])
    np.testing.assert_allclose(aggregate_views([a, b, c]).values, total / 3, rtol=1e-6)
    for perm in itertools.permutations([a, b, c]):
        np.testing.assert_allclose(aggregate_views(list(perm)).values, aggregate_views([a, b, c]).values,
                                   rtol=1e-6)
    with pytest.raises(ValueError):
        aggregate_views([a, ViewFeatures(np.zeros((5, 2, 2)))])
    with pytest.raises(ValueError):
        aggregate_views([])


def test_feature_file_roundtrip(tmp_path, sphere_sdf):
    f = shape_features(to_tudf(sphere_sdf))
    assert f.shape == (5, 4, 4)
    save_features(f, tmp_path / "s_front.vfea")
    g = load_features(tmp_path / "s_front.vfea")
    assert g.values.tobytes() == f.values.tobytes()
    loaded = FileFeatures(tmp_path, "s")(render_depth(sphere_sdf, "front"))
    assert loaded.values.tobytes() == f.values.tobytes()
    raw = (tmp_path / "s_front.vfea").read_bytes()
    (tmp_path / "bad.vfea").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_features(tmp_path / "bad.vfea")
