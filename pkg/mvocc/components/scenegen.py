"""
Procedural CSG shape families with analytic SDF / occupancy oracles, point and
surface sampling, camera pose sampling, a sphere-traced renderer and the
on-disk dataset format
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import trimesh
from PIL import Image as PILImage
from tqdm import tqdm

from .config import BOUNDS, MAX_TREE_DEPTH, SCENE_RADIUS, RUN_MANIFEST, DatasetConfig, json_text
from .errors import ConfigError, DegenerateFrame, EmptyMesh, ShapeSpecError
from .geometry import CameraRig, Extrinsics, Intrinsics, camera_center, look_at, rotation_about

logger = logging.getLogger(__name__)

LIGHT_DIR = np.array([1.0, 1.0, -1.0]) / np.sqrt(3.0)
AMBIENT = 0.15
BACKGROUND = 0.9
MAX_TRACE_STEPS = 128
HIT_TOLERANCE = 1e-4


def _vec(values):
    return tuple(float(v) for v in np.asarray(values, dtype=np.float64).reshape(3))


def _check_positive(name, *values):
    if any(not v > 0 for v in values):
        raise ShapeSpecError(f'{name}: radii and extents must be > 0, got {values}')


# ---------------------------------------------------------------------------
# CSG nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'center', _vec(self.center))
        _check_positive('Sphere', self.radius)


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        object.__setattr__(self, 'center', _vec(self.center))
        object.__setattr__(self, 'half_extents', _vec(self.half_extents))
        _check_positive('Box', *self.half_extents)


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'a', _vec(self.a))
        object.__setattr__(self, 'b', _vec(self.b))
        _check_positive('Capsule', self.radius)


@dataclass(frozen=True)
class Torus:
    center: tuple
    major: float
    minor: float
    axis: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm <= 0:
            raise ShapeSpecError('Torus: axis must be non-zero')
        object.__setattr__(self, 'center', _vec(self.center))
        if abs(norm - 1.0) > 1e-12:
            axis = axis / norm
        object.__setattr__(self, 'axis', _vec(axis))
        _check_positive('Torus', self.major, self.minor)
        if not self.minor < self.major:
            raise ShapeSpecError(f'Torus: minor ({self.minor}) must be < major ({self.major})')


@dataclass(frozen=True)
class Union:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, 'children', tuple(self.children))
        if not self.children:
            raise ShapeSpecError('Union needs at least one child')


@dataclass(frozen=True)
class Intersection:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, 'children', tuple(self.children))
        if not self.children:
            raise ShapeSpecError('Intersection needs at least one child')


@dataclass(frozen=True)
class Difference:
    left: object
    right: object


@dataclass(frozen=True)
class Transformed:
    """child placed by p_world = rotation @ p_local + translation"""
    rotation: tuple
    translation: tuple
    child: object

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-9 or np.linalg.det(rotation) < 0:
            raise ShapeSpecError('Transformed: rotation must be a proper rotation')
        object.__setattr__(self, 'rotation', tuple(tuple(float(v) for v in row) for row in rotation))
        object.__setattr__(self, 'translation', _vec(self.translation))


def tree_depth(node):
    match node:
        case Union(children=children) | Intersection(children=children):
            return 1 + max(tree_depth(c) for c in children)
        case Difference(left=left, right=right):
            return 1 + max(tree_depth(left), tree_depth(right))
        case Transformed(child=child):
            return 1 + tree_depth(child)
        case _:
            return 1


def node_bounds(node):
    """Conservative axis-aligned bounds (lo, hi) of a node"""
    match node:
        case Sphere(center=c, radius=r):
            c = np.array(c)
            return c - r, c + r
        case Box(center=c, half_extents=h):
            return np.array(c) - np.array(h), np.array(c) + np.array(h)
        case Capsule(a=a, b=b, radius=r):
            a, b = np.array(a), np.array(b)
            return np.minimum(a, b) - r, np.maximum(a, b) + r
        case Torus(center=c, major=major, minor=minor, axis=axis):
            axis = np.array(axis)
            extent = major * np.sqrt(np.clip(1.0 - axis ** 2, 0.0, 1.0)) + minor
            return np.array(c) - extent, np.array(c) + extent
        case Union(children=children):
            boxes = [node_bounds(c) for c in children]
            return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)
        case Intersection(children=children):
            boxes = [node_bounds(c) for c in children]
            return np.max([b[0] for b in boxes], axis=0), np.min([b[1] for b in boxes], axis=0)
        case Difference(left=left):
            return node_bounds(left)
        case Transformed(rotation=rotation, translation=translation, child=child):
            lo, hi = node_bounds(child)
            corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
            moved = corners @ np.array(rotation).T + np.array(translation)
            return moved.min(axis=0), moved.max(axis=0)
    raise ShapeSpecError(f'unknown node type {type(node).__name__}')


@dataclass(frozen=True)
class ShapeSpec:
    node: object
    family: str
    albedo: tuple = (0.7, 0.7, 0.7)

    def __post_init__(self):
        albedo = _vec(self.albedo)
        if any(not 0.0 <= a <= 1.0 for a in albedo):
            raise ShapeSpecError(f'albedo must lie in [0, 1], got {albedo}')
        object.__setattr__(self, 'albedo', albedo)
        depth = tree_depth(self.node)
        if depth > MAX_TREE_DEPTH:
            raise ShapeSpecError(f'tree depth {depth} exceeds {MAX_TREE_DEPTH}')
        lo, hi = node_bounds(self.node)
        if np.all(lo <= hi) and (np.any(lo < -BOUNDS - 1e-12) or np.any(hi > BOUNDS + 1e-12)):
            raise ShapeSpecError(f'shape bounds {lo.round(4)}..{hi.round(4)} leave the scene cube')


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def _node_sdf(node, p):
    match node:
        case Sphere(center=c, radius=r):
            return np.linalg.norm(p - np.array(c), axis=-1) - r
        case Box(center=c, half_extents=h):
            q = np.abs(p - np.array(c)) - np.array(h)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        case Capsule(a=a, b=b, radius=r):
            a, b = np.array(a), np.array(b)
            ba = b - a
            pa = p - a
            h = np.clip((pa @ ba) / max(float(ba @ ba), 1e-12), 0.0, 1.0)
            return np.linalg.norm(pa - h[:, None] * ba, axis=-1) - r
        case Torus(center=c, major=major, minor=minor, axis=axis):
            axis = np.array(axis)
            rel = p - np.array(c)
            axial = rel @ axis
            radial = np.linalg.norm(rel - axial[:, None] * axis, axis=-1)
            return np.hypot(radial - major, axial) - minor
        case Union(children=children):
            return np.minimum.reduce([_node_sdf(c, p) for c in children])
        case Intersection(children=children):
            return np.maximum.reduce([_node_sdf(c, p) for c in children])
        case Difference(left=left, right=right):
            return np.maximum(_node_sdf(left, p), -_node_sdf(right, p))
        case Transformed(rotation=rotation, translation=translation, child=child):
            # row-wise R^T (p - t)
            local = (p - np.array(translation)) @ np.array(rotation)
            return _node_sdf(child, local)
    raise ShapeSpecError(f'unknown node type {type(node).__name__}')


def sdf(shape, p):
    """Signed distance bound: negative inside, exact for primitives, sign-exact for CSG

    Args:
        shape: ShapeSpec or bare CSG node
        p: (3,) point or (N, 3) points

    Returns:
        float for a single point, (N,) array otherwise
    """
    node = shape.node if isinstance(shape, ShapeSpec) else shape
    single = np.ndim(p) == 1
    values = _node_sdf(node, np.atleast_2d(np.asarray(p, dtype=np.float64)))
    return float(values[0]) if single else values


def occupancy_at(shape, p):
    """1 where sdf < 0 (points on the boundary count as outside)"""
    values = sdf(shape, p)
    if np.ndim(values) == 0:
        return int(values < 0)
    return (values < 0).astype(np.uint8)


def smoothed_occupancy(shape, p, sharpness=0.02):
    """sigmoid(-sdf / sharpness); gives marching cubes a signal to interpolate"""
    return 1.0 / (1.0 + np.exp(np.clip(sdf(shape, p) / sharpness, -60.0, 60.0)))


def shape_to_dict(node):
    match node:
        case ShapeSpec(node=inner, family=family, albedo=albedo):
            return {'family': family, 'albedo': list(albedo), 'node': shape_to_dict(inner)}
        case Sphere(center=c, radius=r):
            return {'type': 'sphere', 'center': list(c), 'radius': r}
        case Box(center=c, half_extents=h):
            return {'type': 'box', 'center': list(c), 'half_extents': list(h)}
        case Capsule(a=a, b=b, radius=r):
            return {'type': 'capsule', 'a': list(a), 'b': list(b), 'radius': r}
        case Torus(center=c, major=major, minor=minor, axis=axis):
            return {'type': 'torus', 'center': list(c), 'major': major, 'minor': minor, 'axis': list(axis)}
        case Union(children=children):
            return {'type': 'union', 'children': [shape_to_dict(c) for c in children]}
        case Intersection(children=children):
            return {'type': 'intersection', 'children': [shape_to_dict(c) for c in children]}
        case Difference(left=left, right=right):
            return {'type': 'difference', 'left': shape_to_dict(left), 'right': shape_to_dict(right)}
        case Transformed(rotation=rotation, translation=translation, child=child):
            return {'type': 'transformed', 'rotation': [list(r) for r in rotation],
                    'translation': list(translation), 'child': shape_to_dict(child)}
    raise ShapeSpecError(f'unknown node type {type(node).__name__}')


def shape_from_dict(data):
    if 'family' in data:
        return ShapeSpec(shape_from_dict(data['node']), data['family'], tuple(data['albedo']))
    kind = data['type']
    if kind == 'sphere':
        return Sphere(data['center'], data['radius'])
    if kind == 'box':
        return Box(data['center'], data['half_extents'])
    if kind == 'capsule':
        return Capsule(data['a'], data['b'], data['radius'])
    if kind == 'torus':
        return Torus(data['center'], data['major'], data['minor'], data['axis'])
    if kind == 'union':
        return Union([shape_from_dict(c) for c in data['children']])
    if kind == 'intersection':
        return Intersection([shape_from_dict(c) for c in data['children']])
    if kind == 'difference':
        return Difference(shape_from_dict(data['left']), shape_from_dict(data['right']))
    if kind == 'transformed':
        return Transformed(data['rotation'], data['translation'], shape_from_dict(data['child']))
    raise ShapeSpecError(f'unknown node type "{kind}"')


def shape_key(shape):
    """Stable cache key for a shape"""
    return hashlib.md5(json.dumps(shape_to_dict(shape), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class PointBatch:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError(f'{len(self.points)} points but {len(self.labels)} labels')

    def __len__(self):
        return len(self.labels)


def sample_occupancy_points(shape, n, seed):
    """n points uniform in the padded cube, labeled by the occupancy oracle"""
    if n < 1:
        raise ValueError('n must be >= 1')
    rng = np.random.default_rng(seed)
    points = rng.uniform(-BOUNDS, BOUNDS, size=(n, 3))
    return PointBatch(points, occupancy_at(shape, points))


def sample_surface_points(mesh, n, seed):
    """Area-weighted surface samples with the face normal of the sampled triangle

    Returns:
        tuple: (points (n, 3), unit normals (n, 3))
    """
    if mesh is None or len(mesh.triangles) == 0:
        raise EmptyMesh('cannot sample an empty mesh')
    tm = mesh.to_trimesh() if hasattr(mesh, 'to_trimesh') else mesh
    points, face_index = trimesh.sample.sample_surface(tm, int(n), seed=seed)
    normals = np.asarray(tm.face_normals)[face_index]
    return np.asarray(points, dtype=np.float64), np.asarray(normals, dtype=np.float64)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass
class Image:
    pixels: np.ndarray
    mask: np.ndarray

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def to_uint8(self):
        return np.round(np.clip(self.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, rgb, mask):
        return cls(np.asarray(rgb, dtype=np.float32) / np.float32(255.0), np.asarray(mask, dtype=bool))


def pixel_rays(rig):
    """World-space ray origin and unit directions through every pixel center, (H, W, 3)"""
    intr = rig.intrinsics
    jj, ii = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    dirs = np.stack([(jj - intr.cx) / intr.fx, (ii - intr.cy) / intr.fy, np.ones_like(jj)], axis=-1)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    # row-wise R^T d
    dirs = dirs @ rig.extrinsics.rotation
    return camera_center(rig.extrinsics), dirs


def sphere_trace(shape, origin, dirs, max_steps=MAX_TRACE_STEPS, tol=HIT_TOLERANCE):
    """Sphere-trace rays (N, 3) from one origin

    Returns:
        tuple: (hit mask (N,), ray parameter t (N,))
    """
    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    t_far = np.linalg.norm(origin) + 2.0 * SCENE_RADIUS
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        dist = sdf(shape, origin + t[idx, None] * dirs[idx])
        landed = dist < tol
        hit[idx[landed]] = True
        t[idx[~landed]] += dist[~landed]
        active[idx[landed]] = False
        active &= t <= t_far
    return hit, t


def sdf_normals(shape, points, h=1e-4):
    offsets = np.eye(3) * h
    grad = np.stack([sdf(shape, points + o) - sdf(shape, points - o) for o in offsets], axis=-1)
    return grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)


def render_view(shape, rig):
    """Lambertian sphere-traced rendering of a shape from one posed camera"""
    center = camera_center(rig.extrinsics)
    if np.linalg.norm(center) <= SCENE_RADIUS:
        logger.warning(f'camera at {center.round(3)} lies inside the scene sphere')
    intr = rig.intrinsics
    origin, dirs = pixel_rays(rig)
    flat_dirs = dirs.reshape(-1, 3)
    hit, t = sphere_trace(shape, origin, flat_dirs)

    pixels = np.full((intr.height * intr.width, 3), BACKGROUND, dtype=np.float64)
    if hit.any():
        points = origin + t[hit, None] * flat_dirs[hit]
        normals = sdf_normals(shape, points)
        lambert = np.maximum(0.0, normals @ LIGHT_DIR)
        pixels[hit] = np.clip(np.array(shape.albedo) * lambert[:, None] + AMBIENT, 0.0, 1.0)
    return Image(pixels.reshape(intr.height, intr.width, 3).astype(np.float32),
                 hit.reshape(intr.height, intr.width))


def sample_camera_pose(seed, radius_range):
    """Camera on a random direction at a random radius, looking at the origin"""
    rmin, rmax = radius_range
    if rmin <= SCENE_RADIUS or rmax < rmin:
        raise ValueError(f'radius range {radius_range} must satisfy {SCENE_RADIUS} < rmin <= rmax')
    rng = np.random.default_rng(seed)
    while True:
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            continue
        eye = direction / norm * rng.uniform(rmin, rmax)
        try:
            return look_at(eye, np.zeros(3), up=(0.0, 1.0, 0.0))
        except DegenerateFrame:
            logger.debug('re-drawing camera pose parallel to the up vector')


# ---------------------------------------------------------------------------
# Shape families
# ---------------------------------------------------------------------------

def _center(rng, margin):
    limit = max(0.5 - margin, 0.0)
    return rng.uniform(-limit, limit, size=3)


def _blobby(rng):
    spheres = []
    for _ in range(rng.integers(2, 6)):
        r = rng.uniform(0.1, 0.25)
        spheres.append(Sphere(_center(rng, r) * 0.7, r))
    return Union(spheres)


def _cuboid(rng):
    boxes = []
    for _ in range(rng.integers(2, 5)):
        h = rng.uniform(0.06, 0.22, size=3)
        rot = rotation_about((0.0, 1.0, 0.0), rng.uniform(0.0, 90.0))
        boxes.append(Transformed(rot, _center(rng, np.linalg.norm(h)) * 0.8, Box((0, 0, 0), h)))
    return Union(boxes)


def _capsule(rng):
    capsules = []
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(0.05, 0.12)
        capsules.append(Capsule(_center(rng, r), _center(rng, r), r))
    return Union(capsules)


def _torus(rng):
    tori = []
    for _ in range(rng.integers(1, 3)):
        major = rng.uniform(0.18, 0.32)
        minor = rng.uniform(0.05, min(0.11, major - 0.05))
        axis = rng.normal(size=3)
        tori.append(Torus(_center(rng, major + minor), major, minor, axis))
    return Union(tori)


def _wedge(rng):
    h = rng.uniform(0.2, 0.35, size=3)
    center = _center(rng, np.max(h))
    cut_axis = np.eye(3)[rng.integers(0, 3)]
    cut = rotation_about(cut_axis, 45.0)
    offset = rng.uniform(-0.1, 0.1, size=3) + np.array(center)
    cutter = Transformed(cut, offset + np.abs(h) * 0.5, Box((0, 0, 0), (0.5, 0.5, 0.5)))
    return Difference(Box(center, h), cutter)


def _mixed(rng):
    r = rng.uniform(0.1, 0.2)
    sphere = Sphere(_center(rng, r), r)
    cap_r = rng.uniform(0.05, 0.1)
    capsule = Capsule(_center(rng, cap_r), _center(rng, cap_r), cap_r)
    h = rng.uniform(0.1, 0.22, size=3)
    box_center = _center(rng, np.max(h))
    hole = Sphere(box_center + rng.uniform(-0.1, 0.1, size=3), rng.uniform(0.08, float(np.min(h)) + 0.05))
    return Union([sphere, capsule, Difference(Box(box_center, h), hole)])


FAMILY_BUILDERS = {
    'blobby': _blobby,
    'cuboid': _cuboid,
    'capsule': _capsule,
    'torus': _torus,
    'wedge': _wedge,
    'mixed': _mixed,
}


def random_shape(family, rng, max_tries=100):
    """Draw a ShapeSpec of the given family that fits the scene cube and has volume"""
    if family not in FAMILY_BUILDERS:
        raise ConfigError(f'unknown shape family "{family}"')
    check_points = rng.uniform(-BOUNDS, BOUNDS, size=(2048, 3))
    for _ in range(max_tries):
        node = FAMILY_BUILDERS[family](rng)
        albedo = rng.uniform(0.35, 0.95, size=3)
        try:
            shape = ShapeSpec(node, family, albedo)
        except ShapeSpecError:
            continue
        if occupancy_at(shape, check_points).mean() >= 0.005:
            return shape
    raise ShapeSpecError(f'could not draw a valid "{family}" shape in {max_tries} tries')


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    index: int
    family: str
    split: str
    shape: ShapeSpec
    rigs: list
    views: list
    point_pool: PointBatch


@dataclass
class Dataset:
    samples: list
    intrinsics: Intrinsics
    seen_families: tuple
    unseen_families: tuple
    train_indices: list
    test_indices: list
    seed: int
    config: dict = field(default_factory=dict)

    def split_indices(self, split):
        """Indices for 'train', 'test', 'seen' (test, seen families) or 'unseen' (test, unseen families)"""
        if split == 'train':
            return list(self.train_indices)
        if split == 'test':
            return list(self.test_indices)
        if split == 'seen':
            return [i for i in self.test_indices if self.samples[i].family in self.seen_families]
        if split == 'unseen':
            return [i for i in self.test_indices if self.samples[i].family in self.unseen_families]
        raise ValueError(f'unknown split "{split}"')


def _build_sample(job, config, intrinsics, seed):
    index, family, split = job
    rng = np.random.default_rng([seed, index])
    shape = random_shape(family, rng)
    rigs, views = [], []
    for _ in range(config.views_per_shape):
        extrinsics = sample_camera_pose(rng, (config.radius_min, config.radius_max))
        rig = CameraRig(intrinsics, extrinsics)
        image = render_view(shape, rig)
        rigs.append(rig)
        views.append(Image.from_uint8(image.to_uint8(), image.mask))
    pool = sample_occupancy_points(shape, config.pool_size, rng)
    return Sample(index, family, split, shape, rigs, views, pool)


def generate_dataset(config, seed=None, threads=1):
    """Generate the synthetic dataset: seen families in train, all families in test

    Args:
        config: DatasetConfig
        seed: overrides config.seed when given
        threads: worker threads; output does not depend on this

    Returns:
        Dataset
    """
    if not config.seen_families or not config.unseen_families:
        raise ConfigError('dataset needs non-empty seen and unseen families')
    errors = config.validate()
    if errors:
        raise ConfigError('; '.join(errors), violations=errors)
    seed = config.seed if seed is None else seed
    intrinsics = Intrinsics.centered(config.image_size, config.focal)

    jobs = []
    for family in config.seen_families:
        for _ in range(config.train_per_family):
            jobs.append((len(jobs), family, 'train'))
    for family in (*config.seen_families, *config.unseen_families):
        for _ in range(config.test_per_family):
            jobs.append((len(jobs), family, 'test'))

    logger.info(f'Generating {len(jobs)} shapes ({config.views_per_shape} views each) with seed {seed}')
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        samples = list(tqdm(pool.map(lambda job: _build_sample(job, config, intrinsics, seed), jobs),
                            total=len(jobs), desc='gen-data', leave=False))

    return Dataset(
        samples=samples,
        intrinsics=intrinsics,
        seen_families=tuple(config.seen_families),
        unseen_families=tuple(config.unseen_families),
        train_indices=[s.index for s in samples if s.split == 'train'],
        test_indices=[s.index for s in samples if s.split == 'test'],
        seed=int(seed),
        config=dict(vars(config)),
    )


def _rig_to_dict(rig):
    return {'rotation': rig.extrinsics.rotation.tolist(), 'translation': rig.extrinsics.translation.tolist()}


def save_dataset(dataset, root):
    """Write the dataset directory (layout in README_SETUP.md)"""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    intr = dataset.intrinsics
    meta = {
        'format_version': 1,
        'intrinsics': {'fx': intr.fx, 'fy': intr.fy, 'cx': intr.cx, 'cy': intr.cy,
                       'width': intr.width, 'height': intr.height},
        'seen_families': list(dataset.seen_families),
        'unseen_families': list(dataset.unseen_families),
        'train_indices': list(dataset.train_indices),
        'test_indices': list(dataset.test_indices),
        'seed': dataset.seed,
        'config': dataset.config,
        'num_samples': len(dataset.samples),
    }
    (root / 'dataset.json').write_text(json_text(meta))
    for sample in dataset.samples:
        sample_dir = root / f'sample_{sample.index:05d}'
        sample_dir.mkdir(exist_ok=True)
        manifest = {
            'index': sample.index,
            'family': sample.family,
            'split': sample.split,
            'shape': shape_to_dict(sample.shape),
            'rigs': [_rig_to_dict(r) for r in sample.rigs],
        }
        (sample_dir / 'manifest.json').write_text(json_text(manifest, indent=1))
        for k, view in enumerate(sample.views):
            PILImage.fromarray(view.to_uint8(), mode='RGB').save(sample_dir / f'view_{k:02d}.png', optimize=False)
            PILImage.fromarray(view.mask.astype(np.uint8) * 255, mode='L').save(sample_dir / f'mask_{k:02d}.png')
        with open(sample_dir / 'points.bin', 'wb') as fh:
            fh.write(sample.point_pool.points.astype('<f8').tobytes())
            fh.write(sample.point_pool.labels.astype(np.uint8).tobytes())
    logger.info(f'Wrote {len(dataset.samples)} samples to {root}')


def load_dataset(root):
    root = Path(root)
    meta = json.loads((root / 'dataset.json').read_text())
    intrinsics = Intrinsics(**meta['intrinsics'])
    samples = []
    for index in range(meta['num_samples']):
        sample_dir = root / f'sample_{index:05d}'
        manifest = json.loads((sample_dir / 'manifest.json').read_text())
        rigs = [CameraRig(intrinsics, Extrinsics(r['rotation'], r['translation'])) for r in manifest['rigs']]
        views = []
        for k in range(len(rigs)):
            rgb = np.asarray(PILImage.open(sample_dir / f'view_{k:02d}.png').convert('RGB'))
            mask = np.asarray(PILImage.open(sample_dir / f'mask_{k:02d}.png')) > 127
            views.append(Image.from_uint8(rgb, mask))
        raw = (sample_dir / 'points.bin').read_bytes()
        n = len(raw) // 25
        points = np.frombuffer(raw[:n * 24], dtype='<f8').reshape(n, 3)
        labels = np.frombuffer(raw[n * 24:], dtype=np.uint8)
        samples.append(Sample(index, manifest['family'], manifest['split'], shape_from_dict(manifest['shape']),
                              rigs, views, PointBatch(points.copy(), labels.copy())))
    logger.info(f'Loaded {len(samples)} samples from {root}')
    return Dataset(samples, intrinsics, tuple(meta['seen_families']), tuple(meta['unseen_families']),
                   meta['train_indices'], meta['test_indices'], meta['seed'], meta.get('config', {}))


def dataset_hash(root):
    """md5 over every file of a dataset directory, in sorted path order (the run manifest excluded)"""
    root = Path(root)
    digest = hashlib.md5()
    for path in sorted(p for p in root.rglob('*') if p.is_file() and p != root / RUN_MANIFEST):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
