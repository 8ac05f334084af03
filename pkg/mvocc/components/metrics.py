"""
Reconstruction metrics (volumetric IoU, Chamfer-L1, normal consistency, F-score)
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .config import BOUNDS, MetricConfig
from .errors import EmptyMesh, EmptyTarget
from .meshing import cell_size, evaluate_grid, marching_cubes
from .scenegen import occupancy_at, sample_surface_points, shape_key, smoothed_occupancy
from .stores import generate_mesh_cache_key, get_or_build

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ['iou', 'chamfer_l1', 'normal_consistency', 'f_score']


@dataclass
class MetricRow:
    iou: float
    chamfer_l1: float
    normal_consistency: float
    f_score: float
    status: str = 'ok'

    def as_dict(self):
        return asdict(self)


def nearest_neighbor(query, target):
    """Exact Euclidean nearest neighbor of every query point

    Returns:
        tuple: (indices into target, distances)
    """
    target = np.asarray(target, dtype=np.float64)
    if len(target) == 0:
        raise EmptyTarget('nearest-neighbor target set is empty')
    query = np.asarray(query, dtype=np.float64)
    if target.ndim == 1:
        target = target[:, None]
        query = query.reshape(-1, 1)
    distances, indices = cKDTree(target).query(np.atleast_2d(query), k=1)
    return indices, distances


def uniform_points(cfg, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return rng.uniform(-BOUNDS, BOUNDS, size=(cfg.iou_samples, 3))


def volumetric_iou(occ_a, occ_b, cfg, seed=None):
    """Monte Carlo IoU of two occupancy callables over the bounds cube; 1.0 when both are empty"""
    points = uniform_points(cfg, seed)
    a = np.asarray(occ_a(points)).astype(bool)
    b = np.asarray(occ_b(points)).astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


def _surface_samples(mesh, cfg):
    if mesh is None or mesh.is_empty:
        raise EmptyMesh('metric needs a non-empty mesh')
    return sample_surface_points(mesh, cfg.surface_samples, cfg.seed)


def surface_matches(mesh_a, mesh_b, cfg):
    """Seeded surface samples of both meshes matched to each other in both directions"""
    points_a, normals_a = _surface_samples(mesh_a, cfg)
    points_b, normals_b = _surface_samples(mesh_b, cfg)
    idx_ab, dist_ab = nearest_neighbor(points_a, points_b)
    idx_ba, dist_ba = nearest_neighbor(points_b, points_a)
    return {
        'dist_ab': dist_ab, 'dist_ba': dist_ba,
        'dot_ab': np.abs(np.einsum('ij,ij->i', normals_a, normals_b[idx_ab])),
        'dot_ba': np.abs(np.einsum('ij,ij->i', normals_b, normals_a[idx_ba])),
    }


def _chamfer(matches):
    return float((matches['dist_ab'].mean() + matches['dist_ba'].mean()) / 2.0)


def _normal_consistency(matches):
    return float(np.clip((matches['dot_ab'].mean() + matches['dot_ba'].mean()) / 2.0, 0.0, 1.0))


def _f_score(matches, threshold):
    precision = float(np.mean(matches['dist_ab'] <= threshold))
    recall = float(np.mean(matches['dist_ba'] <= threshold))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def chamfer_l1(mesh_a, mesh_b, cfg):
    """Mean nearest-surface distance, averaged over both directions (no squaring)"""
    return _chamfer(surface_matches(mesh_a, mesh_b, cfg))


def normal_consistency(mesh_a, mesh_b, cfg):
    return _normal_consistency(surface_matches(mesh_a, mesh_b, cfg))


def f_score(mesh_a, mesh_b, cfg):
    """Harmonic mean of precision and recall at cfg.f_threshold"""
    return _f_score(surface_matches(mesh_a, mesh_b, cfg), cfg.f_threshold)


def ground_truth_mesh(shape, cfg: MetricConfig):
    """Marching-cubes mesh of the smoothed oracle occupancy, cached per shape"""
    key = generate_mesh_cache_key(shape_key(shape), {'resolution': cfg.gt_resolution, 'iso': cfg.iso})
    build = lambda: marching_cubes(evaluate_grid(partial(smoothed_occupancy, shape), cfg.gt_resolution), cfg.iso)
    return get_or_build(key, build)


def oracle_occupancy(shape):
    return partial(occupancy_at, shape)


def field_occupancy(field, iso=0.5):
    """Threshold a probability field into an occupancy callable"""
    return lambda points: (np.asarray(field(points)) >= iso).astype(np.uint8)


def grid_occupancy(grid, iso=0.5):
    """Occupancy from trilinear interpolation of a grid's cell-center values (zero outside)"""
    h = cell_size(grid.resolution)

    def occupancy(points):
        coords = (np.asarray(points, dtype=np.float64) + BOUNDS) / h - 0.5
        values = ndimage.map_coordinates(grid.values, coords.T, order=1, mode='constant', cval=0.0)
        return (values >= iso).astype(np.uint8)

    return occupancy


def _surface_row(predicted_mesh, gt_mesh, iou, cfg, status='ok'):
    if predicted_mesh is None or predicted_mesh.is_empty:
        return MetricRow(iou, float('nan'), 0.0, 0.0, status='empty_mesh')
    matches = surface_matches(predicted_mesh, gt_mesh, cfg)
    return MetricRow(iou, _chamfer(matches), _normal_consistency(matches), _f_score(matches, cfg.f_threshold),
                     status=status)


def compare_meshes(predicted_mesh, gt_mesh, cfg):
    """Surface metrics of a mesh against a ground-truth mesh

    Neither side carries an occupancy field, so IoU is NaN and status is
    'surface_only' ('empty_mesh' when the prediction has no triangles).

    Raises:
        EmptyMesh: the ground-truth mesh is empty
    """
    if gt_mesh is None or gt_mesh.is_empty:
        raise EmptyMesh('ground-truth mesh has no triangles')
    return _surface_row(predicted_mesh, gt_mesh, float('nan'), cfg, status='surface_only')


def evaluate_pair(predicted_mesh, shape, occupancy, cfg, gt_mesh=None):
    """Full metric row for one prediction against the ground-truth shape

    Args:
        predicted_mesh: TriangleMesh extracted from the prediction
        shape: ShapeSpec whose oracle supplies ground-truth occupancy
        occupancy: predicted occupancy callable (field or grid based)
        cfg: MetricConfig
        gt_mesh: ground-truth surface; defaults to the cached oracle mesh

    Returns:
        MetricRow, with status 'empty_mesh' when the prediction has no surface
    """
    iou = volumetric_iou(oracle_occupancy(shape), occupancy, cfg)
    if predicted_mesh is None or predicted_mesh.is_empty:
        logger.warning(f'Empty predicted mesh for a {shape.family} shape; surface metrics flagged')
        return _surface_row(predicted_mesh, gt_mesh, iou, cfg)
    gt_mesh = ground_truth_mesh(shape, cfg) if gt_mesh is None else gt_mesh
    return _surface_row(predicted_mesh, gt_mesh, iou, cfg)
