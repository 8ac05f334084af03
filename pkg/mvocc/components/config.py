"""
Configuration constants, shape family catalogue, experiment config loading and
the JSON form of manifests
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ConfigParseError

logger = logging.getLogger(__name__)

# Scene bounds: every shape lives inside [-BOUNDS, BOUNDS]^3
BOUNDS = 0.55
BOUNDS_DIAGONAL = 2 * BOUNDS * math.sqrt(3.0)
# Radius of the sphere enclosing the bounds cube; cameras must stay outside it
SCENE_RADIUS = 0.96
EPS_DEPTH = 1e-6
ORTHONORMAL_TOL = 1e-9
MAX_TREE_DEPTH = 8

# Available shape families
# Format: 'family': {'name': 'Display Name', 'primitives': [...], 'split': 'seen/unseen'}
FAMILY_CATALOG = {
    'blobby': {'name': 'Blobby sphere unions', 'primitives': ['sphere'], 'split': 'seen'},
    'cuboid': {'name': 'Cuboid assemblies', 'primitives': ['box'], 'split': 'seen'},
    'capsule': {'name': 'Capsule assemblies', 'primitives': ['capsule'], 'split': 'seen'},
    'torus': {'name': 'Torus arrangements', 'primitives': ['torus'], 'split': 'unseen'},
    'wedge': {'name': 'Wedges (box differences)', 'primitives': ['box'], 'split': 'unseen'},
    'mixed': {'name': 'Mixed CSG', 'primitives': ['sphere', 'box', 'capsule'], 'split': 'unseen'},
}

VARIANTS = ('P', 'PC', 'PCV')
COORDINATE_MODES = ('view', 'object')
VARIANCE_MODES = ('elementwise', 'l2')
NORM_MODES = ('batch', 'sample')
FEATURE_EXTENTS = ('spatial', 'global')
IOU_SOURCES = ('field', 'grid')
DTYPES = ('float32', 'float64')

CHECKPOINT_FORMAT_VERSION = 1
RUN_MANIFEST = 'manifest.json'

# Every real written to a CSV table or a JSON manifest
REAL_FORMAT = '%.17g'
_REAL_TAG = '__real__:'
_TAGGED_REAL = re.compile(r'"__real__:([^"]+)"')


def _tuple_field(default, item=str):
    return field(default=tuple(default), metadata={'item': item})


@dataclass
class DatasetConfig:
    seen_families: tuple = _tuple_field(['blobby', 'cuboid', 'capsule'])
    unseen_families: tuple = _tuple_field(['torus', 'wedge', 'mixed'])
    train_per_family: int = 200
    test_per_family: int = 25
    image_size: int = 64
    focal: float = 40.0
    views_per_shape: int = 8
    pool_size: int = 16384
    radius_min: float = 1.8
    radius_max: float = 2.4
    seed: int = 7

    def validate(self):
        errors = []
        if len(self.seen_families) < 3:
            errors.append('dataset.seen_families: at least 3 seen families are required')
        if len(self.unseen_families) < 1:
            errors.append('dataset.unseen_families: at least 1 unseen family is required')
        for name in (*self.seen_families, *self.unseen_families):
            if name not in FAMILY_CATALOG:
                errors.append(f'dataset: unknown family "{name}"')
        overlap = set(self.seen_families) & set(self.unseen_families)
        if overlap:
            errors.append(f'dataset: families both seen and unseen: {sorted(overlap)}')
        if self.train_per_family < 1 or self.test_per_family < 1:
            errors.append('dataset: train_per_family and test_per_family must be >= 1')
        if self.image_size < 8:
            errors.append('dataset.image_size must be >= 8')
        if self.focal <= 0:
            errors.append('dataset.focal must be > 0')
        if self.views_per_shape < 1:
            errors.append('dataset.views_per_shape must be >= 1')
        if self.pool_size < 1:
            errors.append('dataset.pool_size must be >= 1')
        if self.radius_min <= SCENE_RADIUS:
            errors.append(f'dataset.radius_min must exceed the scene radius {SCENE_RADIUS}')
        if self.radius_max < self.radius_min:
            errors.append('dataset.radius_max must be >= radius_min')
        return errors


@dataclass
class ModelConfig:
    image_size: int = 64
    feature_channels: int = 128
    hidden: int = 128
    g_blocks: int = 3
    f_blocks: int = 5
    variant: str = 'PCV'
    coordinate_mode: str = 'view'
    encoder_depth: int = 3
    encoder_base: int = 32
    variance_mode: str = 'elementwise'
    norm_mode: str = 'batch'
    feature_extent: str = 'spatial'
    dtype: str = 'float32'

    def validate(self):
        errors = []
        if self.feature_channels != self.hidden:
            errors.append(
                f'model.feature_channels ({self.feature_channels}) must equal model.hidden ({self.hidden})'
            )
        if self.encoder_depth < 1:
            errors.append('model.encoder_depth must be >= 1')
        elif self.image_size % (2 ** self.encoder_depth) != 0:
            errors.append(
                f'model.image_size ({self.image_size}) must be divisible by 2^encoder_depth ({2 ** self.encoder_depth})'
            )
        if self.g_blocks < 1 or self.f_blocks < 1:
            errors.append('model.g_blocks and model.f_blocks must be >= 1')
        for key, allowed in (('variant', VARIANTS), ('coordinate_mode', COORDINATE_MODES),
                             ('variance_mode', VARIANCE_MODES), ('norm_mode', NORM_MODES),
                             ('feature_extent', FEATURE_EXTENTS), ('dtype', DTYPES)):
            value = getattr(self, key)
            if value not in allowed:
                errors.append(f'model.{key}: "{value}" not in {list(allowed)}')
        return errors


@dataclass
class TrainConfig:
    points_per_sample: int = 2048
    views_per_sample: int = 4
    batch_size: int = 16
    lr: float = 1e-4
    epochs: int = 60
    seed: int = 0
    eval_views: int = 5
    eval_every: int = 0
    eval_shapes: int = 8
    max_steps: int = 0

    def validate(self):
        errors = []
        if self.points_per_sample < 1:
            errors.append('train.points_per_sample must be >= 1')
        if self.views_per_sample < 1:
            errors.append('train.views_per_sample must be >= 1')
        if self.batch_size < 1:
            errors.append('train.batch_size must be >= 1')
        if self.lr <= 0:
            errors.append('train.lr must be > 0')
        if self.epochs < 0:
            errors.append('train.epochs must be >= 0')
        if self.eval_views not in (1, 5):
            errors.append('train.eval_views must be 1 or 5')
        if self.eval_every < 0 or self.max_steps < 0:
            errors.append('train.eval_every and train.max_steps must be >= 0')
        return errors


@dataclass
class MetricConfig:
    iou_samples: int = 100000
    surface_samples: int = 10000
    f_threshold: float = 0.01 * BOUNDS_DIAGONAL
    seed: int = 0
    resolution: int = 64
    gt_resolution: int = 128
    iso: float = 0.5
    iou_source: str = 'field'
    view_counts: tuple = _tuple_field([1, 5], item=int)
    export_meshes: int = 3
    ablation_views: int = 4
    ablation_seeds: tuple = _tuple_field([0, 1, 2], item=int)

    def validate(self):
        errors = []
        if self.iou_samples < 1 or self.surface_samples < 1:
            errors.append('eval.iou_samples and eval.surface_samples must be >= 1')
        if self.f_threshold <= 0:
            errors.append('eval.f_threshold must be > 0')
        if self.resolution < 8 or self.gt_resolution < 8:
            errors.append('eval.resolution and eval.gt_resolution must be >= 8')
        if not 0 < self.iso < 1:
            errors.append('eval.iso must lie in (0, 1)')
        if self.iou_source not in IOU_SOURCES:
            errors.append(f'eval.iou_source: "{self.iou_source}" not in {list(IOU_SOURCES)}')
        if not self.view_counts or min(self.view_counts) < 1:
            errors.append('eval.view_counts must list positive view counts')
        if not self.ablation_seeds:
            errors.append('eval.ablation_seeds must not be empty')
        return errors


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: MetricConfig = field(default_factory=MetricConfig)
    output_dir: str = 'runs/desk'
    root_seed: int = 7
    threads: int = 1

    def validate(self):
        errors = []
        errors += self.dataset.validate()
        errors += self.model.validate()
        errors += self.train.validate()
        errors += self.eval.validate()
        if self.train.points_per_sample > self.dataset.pool_size:
            errors.append(
                f'train.points_per_sample ({self.train.points_per_sample}) exceeds dataset.pool_size ({self.dataset.pool_size})'
            )
        if self.train.views_per_sample > self.dataset.views_per_shape:
            errors.append(
                f'train.views_per_sample ({self.train.views_per_sample}) exceeds dataset.views_per_shape ({self.dataset.views_per_shape})'
            )
        max_views = max([*self.eval.view_counts, self.eval.ablation_views, self.train.eval_views], default=1)
        if max_views > self.dataset.views_per_shape:
            errors.append(f'eval view counts ({max_views}) exceed dataset.views_per_shape ({self.dataset.views_per_shape})')
        if self.threads < 1:
            errors.append('output.threads must be >= 1')
        return errors


SECTIONS = {
    'dataset': DatasetConfig,
    'model': ModelConfig,
    'train': TrainConfig,
    'eval': MetricConfig,
}


def _coerce(raw, current, item_type=str):
    """Convert an INI string to the type of the field's current value"""
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ('1', 'true', 'yes', 'on'):
            return True
        if raw.lower() in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError(f'expected a boolean, got "{raw}"')
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(item_type(part.strip()) for part in raw.split(',') if part.strip())
    return raw


def _assign(section_obj, section_name, key, raw, errors):
    fields_by_name = {f.name: f for f in dataclasses.fields(section_obj)}
    if key not in fields_by_name:
        errors.append(f'{section_name}.{key}: unknown key')
        return
    current = getattr(section_obj, key)
    item_type = fields_by_name[key].metadata.get('item', str)
    try:
        setattr(section_obj, key, _coerce(raw, current, item_type))
    except ValueError as e:
        errors.append(f'{section_name}.{key}: {e}')


def parse_config_text(text, source='<string>'):
    """Parse INI text into an ExperimentConfig

    Returns:
        tuple: (config, violations) - violations lists unknown keys and bad values
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=('#', ';'))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigParseError('missing section header', line=e.lineno) from e
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigParseError(f'could not parse {source}', line=line) from e
    except configparser.Error as e:
        raise ConfigParseError(str(e).splitlines()[0], line=getattr(e, 'lineno', None)) from e

    cfg = ExperimentConfig()
    errors = []
    for section_name in parser.sections():
        if section_name in SECTIONS:
            section_obj = getattr(cfg, section_name)
            for key, raw in parser.items(section_name):
                _assign(section_obj, section_name, key, raw, errors)
        elif section_name == 'output':
            for key, raw in parser.items(section_name):
                if key == 'dir':
                    cfg.output_dir = raw.strip()
                elif key in ('root_seed', 'threads'):
                    try:
                        setattr(cfg, key, int(raw))
                    except ValueError:
                        errors.append(f'output.{key}: expected an integer, got "{raw}"')
                else:
                    errors.append(f'output.{key}: unknown key')
        else:
            errors.append(f'[{section_name}]: unknown section')
    return cfg, errors


def apply_overrides(cfg, overrides):
    """Apply dotted-key overrides such as {'train.epochs': 3}; returns violations"""
    errors = []
    for dotted, value in overrides.items():
        if value is None:
            continue
        section_name, _, key = dotted.partition('.')
        if section_name in SECTIONS:
            section_obj = getattr(cfg, section_name)
            if not hasattr(section_obj, key):
                errors.append(f'{dotted}: unknown key')
                continue
            setattr(section_obj, key, tuple(value) if isinstance(value, list) else value)
        elif hasattr(cfg, dotted):
            setattr(cfg, dotted, value)
        else:
            errors.append(f'{dotted}: unknown key')
    return errors


def validate_config(path, overrides=None):
    """Load and check an experiment config without stopping at the first problem

    Args:
        path: INI file path
        overrides: optional dotted-key overrides applied before validation

    Returns:
        tuple: (ExperimentConfig or None, list of violation strings)
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'config file not found: {path}')
    cfg, errors = parse_config_text(path.read_text(), source=str(path))
    errors += apply_overrides(cfg, overrides or {})
    errors += cfg.validate()
    if errors:
        for err in errors:
            logger.debug(f'config violation: {err}')
        return None, errors
    return cfg, []


def load_config(path, overrides=None):
    cfg, errors = validate_config(path, overrides)
    if errors:
        raise ConfigError(f'{len(errors)} config violation(s): ' + '; '.join(errors), violations=errors)
    logger.info(f'Loaded config {path}')
    return cfg


def finalize_config(cfg, overrides=None, source='<config>'):
    """Apply overrides to an already built config and raise on any violation"""
    errors = apply_overrides(cfg, overrides or {}) + cfg.validate()
    if errors:
        raise ConfigError(f'{len(errors)} violation(s) in {source}: ' + '; '.join(errors), violations=errors)
    return cfg


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_from_dict(data):
    """Rebuild an ExperimentConfig from config_to_dict output (e.g. a run manifest)"""
    cfg = ExperimentConfig()
    for section_name, cls in SECTIONS.items():
        values = dict(data.get(section_name, {}))
        defaults = getattr(cfg, section_name)
        for f in dataclasses.fields(cls):
            if f.name in values and isinstance(getattr(defaults, f.name), tuple):
                values[f.name] = tuple(values[f.name])
        setattr(cfg, section_name, cls(**values))
    for key in ('output_dir', 'root_seed', 'threads'):
        if key in data:
            setattr(cfg, key, data[key])
    return cfg


def derive_seeds(root_seed):
    """Split one root seed into independent dataset / train / eval seeds"""
    children = np.random.SeedSequence(int(root_seed)).spawn(3)
    dataset_seed, train_seed, eval_seed = (int(c.generate_state(1)[0]) for c in children)
    return {'dataset': dataset_seed, 'train': train_seed, 'eval': eval_seed}


def to_jsonable(obj):
    """Plain JSON values for what manifests carry

    Tensors and arrays become nested lists, numpy scalars Python numbers,
    paths strings and dataclasses dicts. NaN and infinities become None.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    if torch.is_tensor(obj):
        obj = obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def format_real(value):
    text = REAL_FORMAT % value
    return text if ('.' in text or 'e' in text) else text + '.0'


def _tag_reals(obj):
    if isinstance(obj, dict):
        return {k: _tag_reals(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_tag_reals(v) for v in obj]
    if isinstance(obj, float):
        return _REAL_TAG + format_real(obj)
    return obj


def json_text(data, indent=2):
    """Sorted-key JSON with every real written to 17 significant digits"""
    text = json.dumps(_tag_reals(to_jsonable(data)), indent=indent, sort_keys=True)
    return _TAGGED_REAL.sub(r'\1', text)
