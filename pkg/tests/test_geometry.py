import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import min_great_circle
from paray.geometry import (
    DetectorArray,
    VolumeGrid,
    fibonacci_sphere_array,
    hemisphere,
    make_grid,
    subsample_uniform,
    uniform_indices,
)


def test_large_sphere_on_radius():
    arr = fibonacci_sphere_array(2048, 60.0)
    assert len(arr) == 2048
    r = np.linalg.norm(arr.positions, axis=1)
    assert np.all(np.abs(r - 60.0) < 1e-9 * 60.0)


def test_single_detector():
    arr = fibonacci_sphere_array(1, 1.0)
    assert len(arr) == 1
    assert np.linalg.norm(arr.positions[0]) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(arr.normals[0], -arr.positions[0], atol=1e-15)


def test_min_pairwise_spacing():
    arr = fibonacci_sphere_array(2048, 60.0)
    bound = 0.6 * math.sqrt(4 * math.pi / 2048) * 60.0
    assert min_great_circle(arr.positions, 60.0) > bound


@given(st.integers(1, 400), st.floats(0.5, 200.0))
@settings(max_examples=40, deadline=None)
def test_array_invariants(n, radius):
    arr = fibonacci_sphere_array(n, radius)
    r = np.linalg.norm(arr.positions, axis=1)
    assert np.all(np.abs(r - radius) < 1e-9 * radius)
    assert np.all(np.abs(np.linalg.norm(arr.normals, axis=1) - 1.0) < 1e-12)
    assert np.all(np.einsum("ij,ij->i", arr.normals, arr.positions) < 0)
    assert arr.patch_area * n == pytest.approx(4 * math.pi * radius ** 2, rel=1e-14)


def test_deterministic():
    a, b = fibonacci_sphere_array(300, 12.5), fibonacci_sphere_array(300, 12.5)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.normals, b.normals)


@pytest.mark.parametrize("n,radius", [(0, 1.0), (-3, 1.0), (5, 0.0), (5, -1.0), (2.5, 1.0)])
def test_invalid_arguments(n, radius):
    with pytest.raises(ValueError):
        fibonacci_sphere_array(n, radius)


def test_subsample_4x_stride():
    sub_idx = uniform_indices(2048, 512)
    assert np.array_equal(sub_idx, np.arange(0, 2048, 4))
    sub = subsample_uniform(fibonacci_sphere_array(2048, 60.0), 512)
    assert len(sub) == 512
    assert sub.patch_area == pytest.approx(4 * math.pi * 60.0 ** 2 / 512)


def test_subsample_rounding_example():
    # round(j*8/3) for j = 0, 1, 2 -> 0, 2.67, 5.33
    assert uniform_indices(8, 3).tolist() == [0, 3, 5]


def test_subsample_identity_and_idempotence():
    arr = fibonacci_sphere_array(97, 10.0)
    same = subsample_uniform(arr, 97)
    assert np.array_equal(same.positions, arr.positions)
    once = subsample_uniform(arr, 30)
    twice = subsample_uniform(once, 30)
    assert np.array_equal(once.positions, twice.positions)
    assert once.patch_area == twice.patch_area


@given(st.integers(1, 500), st.data())
@settings(max_examples=60, deadline=None)
def test_uniform_indices_properties(n, data):
    k = data.draw(st.integers(1, n))
    idx = uniform_indices(n, k)
    assert len(idx) == k
    assert idx[0] == 0 and idx[-1] < n
    assert np.all(np.diff(idx) > 0)
    expected = [math.floor(j * n / k + 0.5) for j in range(k)]
    assert idx.tolist() == expected


def test_subsample_too_many():
    with pytest.raises(ValueError):
        subsample_uniform(fibonacci_sphere_array(10, 1.0), 11)


def test_hemisphere_filter():
    arr = fibonacci_sphere_array(1024, 60.0)
    half = hemisphere(arr)
    assert np.all(half.positions[:, 2] <= 0)
    assert len(half) == 512
    assert half.patch_area == arr.patch_area


def test_array_json_roundtrip(tmp_path):
    arr = fibonacci_sphere_array(64, 60.0)
    path = tmp_path / "array.json"
    arr.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"positions", "normals", "radius", "patch_area"}
    back = DetectorArray.load(path)
    assert np.array_equal(back.positions, arr.positions)
    assert np.array_equal(back.normals, arr.normals)
    assert back.patch_area == arr.patch_area and back.radius == arr.radius


def test_make_grid_large_scale():
    assert make_grid(0.0, 12.8, 0.1).dims == (256, 256, 256)


def test_make_grid_single_voxel():
    g = make_grid((1.0, -2.0, 3.0), 0.05, 0.1)
    assert g.dims == (1, 1, 1)
    np.testing.assert_allclose(g.origin, (1.0, -2.0, 3.0), atol=1e-15)


def test_make_grid_desk_origin():
    g = make_grid(0.0, 6.4, 0.1)
    assert g.dims == (128, 128, 128)
    np.testing.assert_allclose(g.world((0, 0, 0)), (-6.35, -6.35, -6.35), atol=1e-12)


def test_grid_world_is_exact():
    g = make_grid(0.3, 1.0, 0.25)
    i, j, k = 3, 0, 7
    expected = np.array(g.origin) + g.spacing * np.array([i, j, k])
    assert np.array_equal(g.world((i, j, k)), expected)


@pytest.mark.parametrize("half,spacing", [(0.0, 0.1), (-1.0, 0.1), (1.0, 0.0)])
def test_make_grid_invalid(half, spacing):
    with pytest.raises(ValueError):
        make_grid(0.0, half, spacing)


def test_grid_dict_roundtrip():
    g = make_grid(0.5, 2.0, 0.2)
    assert VolumeGrid.from_dict(g.to_dict()) == g
