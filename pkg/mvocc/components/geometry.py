"""
Pinhole camera model, rigid transforms, projection and coordinate-frame canonicalization
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .config import EPS_DEPTH, ORTHONORMAL_TOL
from .errors import BadIndex, DegenerateFrame, PointBehindCamera

logger = logging.getLogger(__name__)


class CoordinateMode(enum.Enum):
    VIEW_CENTRIC = 'view'
    OBJECT_CENTRIC = 'object'


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f'focal lengths must be positive, got fx={self.fx}, fy={self.fy}')
        if self.width <= 0 or self.height <= 0:
            raise ValueError('image size must be positive')
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f'principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}')

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def centered(cls, size, focal):
        """Square image with the principal point at the image center (texel centers sit on integers)"""
        center = (size - 1) / 2.0
        return cls(fx=float(focal), fy=float(focal), cx=center, cy=center, width=int(size), height=int(size))


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """World-to-camera transform p_cam = R p + t"""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError('rotation is not orthonormal')
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError('rotation must have determinant +1')
        if not np.all(np.isfinite(translation)):
            raise ValueError('translation must be finite')
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: Intrinsics
    extrinsics: Extrinsics


def world_to_camera(p, e):
    """Map world points (3,) or (N, 3) into the camera frame of e"""
    p = np.asarray(p, dtype=np.float64)
    return p @ e.rotation.T + e.translation


def project_points(points, rig):
    """Project world points without the behind-camera guard

    Returns:
        tuple: (uv (N, 2), depth (N,)) - uv is only meaningful where depth > EPS_DEPTH
    """
    cam = world_to_camera(np.atleast_2d(points), rig.extrinsics)
    homog = cam @ rig.intrinsics.matrix.T
    depth = homog[:, 2]
    safe = np.where(depth > EPS_DEPTH, depth, 1.0)
    uv = homog[:, :2] / safe[:, None]
    return uv, depth


def project(p, rig, eps_depth=EPS_DEPTH):
    """Project world point(s) to pixel coordinates, (u', v', w') = K T p

    Args:
        p: (3,) point or (N, 3) points in world coordinates
        rig: CameraRig

    Returns:
        tuple: (u, v, depth) as floats for a single point, arrays for a batch

    Raises:
        PointBehindCamera: when any depth w' <= eps_depth
    """
    single = np.ndim(p) == 1
    cam = world_to_camera(np.atleast_2d(p), rig.extrinsics)
    homog = cam @ rig.intrinsics.matrix.T
    depth = homog[:, 2]
    if np.any(depth <= eps_depth):
        raise PointBehindCamera(f'{int(np.sum(depth <= eps_depth))} point(s) at depth <= {eps_depth}')
    u = homog[:, 0] / depth
    v = homog[:, 1] / depth
    if single:
        return float(u[0]), float(v[0]), float(depth[0])
    return u, v, depth


def camera_center(e):
    """Camera position in world coordinates, -R^T t"""
    return -e.rotation.T @ e.translation


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Extrinsics for a camera at eye whose +z axis points at target (v axis points down)"""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    dist = np.linalg.norm(forward)
    if dist <= 1e-9:
        raise DegenerateFrame('eye and target coincide')
    forward = forward / dist
    right = np.cross(forward, up)
    right_norm = np.linalg.norm(right)
    if right_norm <= 1e-9 * max(np.linalg.norm(up), 1.0):
        raise DegenerateFrame('up vector is parallel to the viewing direction')
    right = right / right_norm
    down = np.cross(forward, right)
    # rows are the camera axes expressed in world coordinates
    rotation = np.stack([right, down, forward])
    translation = -rotation @ eye
    return Extrinsics(rotation, translation)


def apply_rigid_motion(points, rigs, Q, d):
    """Move a scene rigidly by p -> Q p + d, re-posing cameras so camera-frame coordinates are unchanged"""
    Q = np.asarray(Q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    moved_points = points @ Q.T + d
    moved_rigs = []
    for rig in rigs:
        R = rig.extrinsics.rotation
        new_rotation = R @ Q.T
        new_translation = rig.extrinsics.translation - new_rotation @ d
        moved_rigs.append(CameraRig(rig.intrinsics, Extrinsics(new_rotation, new_translation)))
    return moved_points, moved_rigs


def canonicalize(sample_rigs, query_points, mode, ref=0):
    """Express rigs and query points in the frame selected by mode

    ObjectCentric keeps the world frame. ViewCentric re-bases the world frame
    onto the camera frame of view `ref`; all views share that one frame.
    """
    if not 0 <= ref < len(sample_rigs):
        raise BadIndex(f'reference view {ref} out of range for {len(sample_rigs)} view(s)')
    mode = CoordinateMode(mode)
    if mode is CoordinateMode.OBJECT_CENTRIC:
        return list(sample_rigs), np.asarray(query_points, dtype=np.float64)

    ref_e = sample_rigs[ref].extrinsics
    points, rigs = apply_rigid_motion(query_points, sample_rigs, ref_e.rotation, ref_e.translation)
    rigs[ref] = CameraRig(sample_rigs[ref].intrinsics, Extrinsics.identity())
    return rigs, points


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(np.radians(degrees) * axis / np.linalg.norm(axis)).as_matrix()
