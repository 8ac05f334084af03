from __future__ import annotations

from functools import partial

import numpy as np
import pytest

from mvocc.components.config import BOUNDS
from mvocc.components.meshing import (OccupancyGrid, TriangleMesh, cell_centers, cell_size, evaluate_grid,
                                      export_mesh, extract_mesh, grid_points, load_mesh, marching_cubes)
from mvocc.components.scenegen import ShapeSpec, Sphere, smoothed_occupancy


def test_cell_centers_span_bounds():
    centers = cell_centers(8)
    h = cell_size(8)
    assert centers[0] == pytest.approx(-BOUNDS + h / 2)
    assert centers[-1] == pytest.approx(BOUNDS - h / 2)
    assert np.allclose(np.diff(centers), h)


def test_grid_points_are_x_major():
    points = grid_points(8)
    assert points.shape == (512, 3)
    assert np.allclose(points.reshape(8, 8, 8, 3)[3, 1, 6], [cell_centers(8)[3], cell_centers(8)[1],
                                                             cell_centers(8)[6]])


def test_constant_field():
    grid = evaluate_grid(lambda p: np.full(len(p), 0.3), 8)
    assert grid.values.shape == (8, 8, 8)
    assert np.all(grid.values == 0.3)


def test_grid_batching_does_not_change_values(sphere):
    field = partial(smoothed_occupancy, sphere)
    whole = evaluate_grid(field, 16)
    chunked = evaluate_grid(field, 16, batch_size=77)
    assert np.array_equal(whole.values, chunked.values)


def test_grid_validation():
    with pytest.raises(ValueError):
        evaluate_grid(lambda p: np.zeros(len(p)), 4)
    with pytest.raises(ValueError):
        OccupancyGrid(8, np.full((8, 8, 8), 1.5))
    with pytest.raises(ValueError):
        OccupancyGrid(8, np.full((8, 8, 8), np.nan))


def test_empty_grid_gives_empty_mesh():
    mesh = marching_cubes(OccupancyGrid(8, np.zeros((8, 8, 8))))
    assert mesh.is_empty


def test_full_grid_gives_closed_box():
    mesh = marching_cubes(OccupancyGrid(8, np.ones((8, 8, 8))))
    assert not mesh.is_empty
    assert mesh.to_trimesh().is_watertight
    assert np.abs(mesh.vertices).max() == pytest.approx(BOUNDS)
    assert 0.9 * (2 * BOUNDS) ** 3 < mesh.signed_volume <= (2 * BOUNDS) ** 3 + 1e-9


def test_iso_must_be_open_interval():
    with pytest.raises(ValueError):
        marching_cubes(OccupancyGrid(8, np.zeros((8, 8, 8))), iso=1.0)


def test_sphere_mesh():
    shape = ShapeSpec(Sphere((0.0, 0.0, 0.0), 0.4), 'blobby')
    mesh = extract_mesh(partial(smoothed_occupancy, shape), resolution=64)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.mean(np.abs(radii - 0.4)) <= 2 * BOUNDS / 64
    assert mesh.to_trimesh().is_watertight
    assert mesh.signed_volume == pytest.approx(4.0 / 3.0 * np.pi * 0.4 ** 3, rel=0.05)
    # outward orientation
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    assert np.mean(np.einsum('ij,ij->i', mesh.face_normals, centroids) > 0) > 0.99


def test_linear_field_vertices_lie_on_iso_plane():
    field = lambda p: np.clip(0.5 + 0.8 * (p[:, 0] - 0.1), 0.0, 1.0)
    mesh = marching_cubes(evaluate_grid(field, 16))
    h = cell_size(16)
    v = mesh.vertices
    inner = np.all(np.abs(v[:, 1:]) < BOUNDS - h, axis=1) & (v[:, 0] < BOUNDS - h)
    assert inner.any()
    assert np.allclose(v[inner, 0], 0.1, atol=1e-7)


def test_mesh_properties():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert mesh.areas[0] == pytest.approx(0.5)
    assert np.allclose(mesh.face_normals[0], [0, 0, 1])
    with pytest.raises(ValueError):
        TriangleMesh([[0, 0, 0]], [[0, 1, 2]])


@pytest.mark.parametrize('suffix', ['.obj', '.ply'])
def test_export_and_load(sphere, tmp_path, suffix):
    mesh = extract_mesh(partial(smoothed_occupancy, sphere), resolution=16)
    path = tmp_path / f'sphere{suffix}'
    export_mesh(mesh, path)
    loaded = load_mesh(path)
    assert len(loaded.triangles) == len(mesh.triangles)
    assert loaded.signed_volume == pytest.approx(mesh.signed_volume, rel=1e-8)
    assert loaded.areas.sum() == pytest.approx(mesh.areas.sum(), rel=1e-8)


def test_export_rejects_unknown_format(sphere, tmp_path):
    mesh = extract_mesh(partial(smoothed_occupancy, sphere), resolution=8)
    with pytest.raises(ValueError):
        export_mesh(mesh, tmp_path / 'mesh.stl')
