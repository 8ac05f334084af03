"""
Occupancy-grid evaluation, marching cubes and mesh file I/O
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import trimesh
from skimage import measure

from .config import BOUNDS

logger = logging.getLogger(__name__)

GRID_BATCH = 65536
MIN_TRIANGLE_AREA = 1e-12


def cell_size(resolution):
    return 2.0 * BOUNDS / resolution


def cell_centers(resolution):
    """Cell-center coordinates along one axis"""
    return -BOUNDS + (np.arange(resolution) + 0.5) * cell_size(resolution)


def grid_points(resolution):
    """(N^3, 3) cell centers, x-major so values reshape to [i, j, k] <-> (x, y, z)"""
    axis = cell_centers(resolution)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing='ij')
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


@dataclass
class OccupancyGrid:
    resolution: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape((self.resolution,) * 3)
        if not np.all(np.isfinite(self.values)):
            raise ValueError('occupancy grid contains non-finite values')
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError('occupancy grid values must lie in [0, 1]')

    @property
    def cell_size(self):
        return cell_size(self.resolution)


def evaluate_grid(field, resolution, batch_size=GRID_BATCH):
    """Evaluate a point -> probability callable on the cell-center lattice

    Args:
        field: callable mapping (n, 3) points to (n,) probabilities
        resolution: cells per axis, >= 8
        batch_size: max points per field call
    """
    if resolution < 8:
        raise ValueError(f'grid resolution must be >= 8, got {resolution}')
    points = grid_points(resolution)
    chunks = [np.asarray(field(points[start:start + batch_size]), dtype=np.float64).reshape(-1)
              for start in range(0, len(points), batch_size)]
    return OccupancyGrid(resolution, np.concatenate(chunks))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError('triangle indices out of range')

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def _cross(self):
        v0, v1, v2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        return np.cross(v1 - v0, v2 - v0)

    @property
    def areas(self):
        return 0.5 * np.linalg.norm(self._cross(), axis=-1)

    @property
    def face_normals(self):
        cross = self._cross()
        return cross / np.maximum(np.linalg.norm(cross, axis=-1, keepdims=True), 1e-300)

    @property
    def signed_volume(self):
        v0, v1, v2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        return float(np.einsum('ij,ij->i', v0, np.cross(v1, v2)).sum() / 6.0)

    def to_trimesh(self):
        return trimesh.Trimesh(vertices=self.vertices, faces=self.triangles, process=False)


def drop_small_triangles(mesh, min_area=MIN_TRIANGLE_AREA):
    keep = mesh.areas >= min_area
    if keep.all():
        return mesh
    logger.debug(f'Dropping {int((~keep).sum())} degenerate triangle(s)')
    return TriangleMesh(mesh.vertices, mesh.triangles[keep])


def marching_cubes(grid, iso=0.5):
    """Extract the iso-surface of an occupancy grid as a closed, outward-oriented mesh

    The grid is padded with zeros outside the bounds so the surface is closed.
    Vertex positions are linear interpolations along lattice edges.
    """
    if not 0.0 < iso < 1.0:
        raise ValueError(f'iso must lie in (0, 1), got {iso}')
    padded = np.pad(grid.values, 1, mode='constant', constant_values=0.0)
    if padded.max() < iso:
        return TriangleMesh.empty()

    h = grid.cell_size
    verts, faces, _, _ = measure.marching_cubes(padded, level=iso, spacing=(h, h, h), allow_degenerate=False)
    # padded index 0 is the cell center one cell outside the bounds
    verts = verts + (-BOUNDS - 0.5 * h)
    merged = trimesh.Trimesh(vertices=verts, faces=faces, process=True)
    mesh = drop_small_triangles(TriangleMesh(merged.vertices, merged.faces))
    if mesh.signed_volume < 0:
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


def extract_mesh(field, resolution=64, iso=0.5, batch_size=GRID_BATCH):
    return marching_cubes(evaluate_grid(field, resolution, batch_size), iso)


def export_mesh(mesh, path):
    """Write OBJ or binary little-endian PLY, chosen by file suffix"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    suffix = path.suffix.lower()
    tm = mesh.to_trimesh()
    if suffix == '.obj':
        path.write_text(trimesh.exchange.obj.export_obj(tm, include_normals=False, include_color=False,
                                                        include_texture=False, digits=10))
    elif suffix == '.ply':
        path.write_bytes(trimesh.exchange.ply.export_ply(tm, encoding='binary', include_attributes=False))
    else:
        raise ValueError(f'unsupported mesh format "{suffix}" (use .obj or .ply)')
    logger.debug(f'Wrote mesh {path} ({len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles)')


def load_mesh(path):
    path = Path(path)
    if path.suffix.lower() not in ('.obj', '.ply'):
        raise ValueError(f'unsupported mesh format "{path.suffix}" (use .obj or .ply)')
    tm = trimesh.load(str(path), force='mesh', process=False)
    if len(tm.faces) == 0:
        return TriangleMesh.empty()
    return TriangleMesh(np.asarray(tm.vertices), np.asarray(tm.faces))
