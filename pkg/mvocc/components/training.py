"""
Batch assembly, the optimization loop, checkpoints, run manifests and split evaluation
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .config import REAL_FORMAT, RUN_MANIFEST, ExperimentConfig, ModelConfig, config_to_dict, json_text, to_jsonable
from .diffcore import (adam_step, forward_backward, load_records, make_optimizer, optimizer_steps, read_checkpoint,
                       write_checkpoint, zero_grads)
from .errors import InsufficientPoints, InsufficientViews, NonFiniteLoss
from .meshing import evaluate_grid, export_mesh, marching_cubes
from .metrics import METRIC_COLUMNS, evaluate_pair, field_occupancy, grid_occupancy, oracle_occupancy
from .model import ModelField, SampleBatch, build_model, occupancy_loss
from .scenegen import smoothed_occupancy

logger = logging.getLogger(__name__)

CODE_VERSION = '1.0.0'
TABLE_COLUMNS = ['shape_id', 'family', 'n_views', *METRIC_COLUMNS, 'status']


def build_batch(dataset, indices, config, rng):
    """Draw views and labeled points (both without replacement) for each sample

    Args:
        dataset: Dataset
        indices: sample indices
        config: TrainConfig
        rng: numpy Generator, advanced in place

    Returns:
        SampleBatch
    """
    images, rigs, points, labels = [], [], [], []
    for index in indices:
        sample = dataset.samples[index]
        if config.views_per_sample > len(sample.rigs):
            raise InsufficientViews(f'sample {index} has {len(sample.rigs)} views, {config.views_per_sample} requested')
        if config.points_per_sample > len(sample.point_pool):
            raise InsufficientPoints(
                f'sample {index} pool has {len(sample.point_pool)} points, {config.points_per_sample} requested'
            )
        view_idx = rng.choice(len(sample.rigs), size=config.views_per_sample, replace=False)
        point_idx = rng.choice(len(sample.point_pool), size=config.points_per_sample, replace=False)
        images.append(np.stack([sample.views[i].pixels for i in view_idx]))
        rigs.append([sample.rigs[i] for i in view_idx])
        points.append(sample.point_pool.points[point_idx])
        labels.append(sample.point_pool.labels[point_idx])
    return SampleBatch(np.stack(images), rigs, np.stack(points), np.stack(labels))


def train_step(model, optimizer, batch):
    """forward -> loss -> backward -> Adam; returns the loss value"""
    model.train()
    zero_grads(model.parameters())
    probs = model(batch)
    loss = occupancy_loss(probs, torch.as_tensor(batch.labels, dtype=probs.dtype))
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f'loss became {loss.item()}')
    forward_backward(loss)
    adam_step(optimizer)
    return float(loss.item())


@dataclass
class RunManifest:
    """What a command ran with and what it wrote

    Every sub-command that reads a config leaves one next to its outputs;
    `outputs` holds paths relative to the manifest's directory.
    """
    config: dict
    command: str = 'train'
    dataset_hash: str = ''
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    steps: int = 0
    wall_clock_seconds: float = 0.0
    code_version: str = CODE_VERSION

    def record_epoch(self, loss):
        self.epoch_losses.append(float(loss))

    def record_eval(self, epoch, row):
        """Keep the whole summary row (every metric column) for one evaluation"""
        self.evals.append(to_jsonable({'epoch': int(epoch), **{k: row[k] for k in METRIC_COLUMNS}}))

    def record_output(self, path, base):
        self.outputs.append(Path(path).relative_to(base).as_posix())

    def to_dict(self, include_timing=True):
        data = to_jsonable(self)
        if not include_timing:
            data.pop('wall_clock_seconds')
        return data

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json_text(self.to_dict()))
        logger.info(f'Wrote run manifest {path}')

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def run_seeds(config: ExperimentConfig):
    return {'root': config.root_seed, 'dataset': config.dataset.seed, 'train': config.train.seed,
            'eval': config.eval.seed}


def save_checkpoint(model, path, optimizer=None):
    header = {'model_config': asdict(model.config), 'code_version': CODE_VERSION}
    write_checkpoint(path, model, header=header, optimizer=optimizer)


def load_checkpoint(path, model=None):
    """Rebuild (or fill) a model from a checkpoint

    Raises:
        CheckpointIoError, VersionMismatch, NameMismatch
    """
    payload = read_checkpoint(path)
    if model is None:
        model = build_model(ModelConfig(**payload['header']['model_config']))
    load_records(model, payload['records'])
    model.eval()
    logger.info(f'Loaded checkpoint {path}')
    return model


def train(dataset, model, config: ExperimentConfig, out_dir=None, dataset_hash='', eval_fn=None):
    """Optimize the model on the dataset's train split

    Args:
        dataset: Dataset
        model: MultiViewOccupancyNet, variant and coordinate mode fixed
        config: ExperimentConfig (train section drives the loop)
        out_dir: when given, last.pt every epoch, best.pt on best eval IoU, manifest.json
        dataset_hash: recorded in the manifest
        eval_fn: optional model -> summary row (mapping with every metric column),
            called every train.eval_every epochs; best.pt follows its 'iou'

    Returns:
        tuple: (model, RunManifest)
    """
    tcfg = config.train
    rng = np.random.default_rng(tcfg.seed)
    manifest = RunManifest(config=config_to_dict(config), dataset_hash=dataset_hash, seeds=run_seeds(config))
    optimizer = make_optimizer(model.parameters(), tcfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    best_iou = -1.0
    start = time.perf_counter()

    train_indices = np.asarray(dataset.train_indices)
    logger.info(f'Training on {len(train_indices)} shapes for {tcfg.epochs} epoch(s), batch {tcfg.batch_size}')
    for epoch in range(tcfg.epochs):
        order = rng.permutation(train_indices)
        losses = []
        for start_idx in tqdm(range(0, len(order), tcfg.batch_size), desc=f'epoch {epoch + 1}', leave=False):
            batch = build_batch(dataset, order[start_idx:start_idx + tcfg.batch_size], tcfg, rng)
            try:
                losses.append(train_step(model, optimizer, batch))
            except NonFiniteLoss as e:
                raise NonFiniteLoss(f'epoch {epoch + 1}, step {optimizer_steps(optimizer) + 1}: {e}') from e
            if tcfg.max_steps and optimizer_steps(optimizer) >= tcfg.max_steps:
                break
        manifest.steps = optimizer_steps(optimizer)
        manifest.record_epoch(np.mean(losses) if losses else float('nan'))
        logger.info(f'Epoch {epoch + 1}/{tcfg.epochs}: loss {manifest.epoch_losses[-1]:.5f}')

        if out_dir is not None:
            save_checkpoint(model, out_dir / 'last.pt', optimizer)
        if eval_fn is not None and tcfg.eval_every and (epoch + 1) % tcfg.eval_every == 0:
            row = eval_fn(model)
            manifest.record_eval(epoch + 1, row)
            iou = float(row['iou'])
            logger.info(f'Epoch {epoch + 1}: eval IoU {iou:.4f}, F-score {float(row["f_score"]):.4f}')
            if iou > best_iou:
                best_iou = iou
                if out_dir is not None:
                    save_checkpoint(model, out_dir / 'best.pt', optimizer)
        if tcfg.max_steps and manifest.steps >= tcfg.max_steps:
            logger.info(f'Reached max_steps={tcfg.max_steps}')
            break

    model.eval()
    manifest.wall_clock_seconds = time.perf_counter() - start
    if out_dir is not None:
        for name in ('last.pt', 'best.pt'):
            if (out_dir / name).exists():
                manifest.record_output(out_dir / name, out_dir)
        manifest.save(out_dir / RUN_MANIFEST)
    return model, manifest


class ModelPredictor:
    """Predicted field for one shape from a trained model"""

    def __init__(self, model):
        self.model = model

    def field(self, sample, view_idx):
        self.model.eval()
        return ModelField(self.model, np.stack([sample.views[i].pixels for i in view_idx]),
                          [sample.rigs[i] for i in view_idx])


class OraclePredictor:
    """The shape's own smoothed occupancy, ignoring the views"""

    def field(self, sample, view_idx):
        return lambda points: smoothed_occupancy(sample.shape, points)


def eval_view_indices(sample, n_views, seed):
    """Views drawn per (seed, shape, n_views) so tables at different view counts are comparable"""
    if n_views > len(sample.rigs):
        raise InsufficientViews(f'sample {sample.index} has {len(sample.rigs)} views, {n_views} requested')
    rng = np.random.default_rng([seed, sample.index, n_views])
    return sorted(rng.choice(len(sample.rigs), size=n_views, replace=False).tolist())


def evaluate_shape(sample, predictor, n_views, cfg, seed, mesh_dir=None):
    view_idx = eval_view_indices(sample, n_views, seed)
    field_fn = predictor.field(sample, view_idx)
    grid = evaluate_grid(field_fn, cfg.resolution)
    mesh = marching_cubes(grid, cfg.iso)
    if cfg.iou_source == 'grid':
        occupancy = grid_occupancy(grid, cfg.iso)
    elif isinstance(predictor, OraclePredictor):
        occupancy = oracle_occupancy(sample.shape)
    else:
        occupancy = field_occupancy(field_fn, cfg.iso)
    row = evaluate_pair(mesh, sample.shape, occupancy, cfg)
    if mesh_dir is not None and not mesh.is_empty:
        export_mesh(mesh, Path(mesh_dir) / f'shape_{sample.index:05d}_v{n_views}.ply')
    return {'shape_id': sample.index, 'family': sample.family, 'n_views': n_views, **row.as_dict()}


def evaluate_split(dataset, predictor, split, n_views, cfg, seed=0, threads=1, mesh_dir=None,
                   export_per_family=0, limit=None):
    """Per-shape metric table for a split plus per-family and overall means

    Args:
        dataset: Dataset
        predictor: ModelPredictor or OraclePredictor
        split: 'test', 'seen', 'unseen' or 'train'
        n_views: views per shape
        cfg: MetricConfig
        seed: evaluation seed
        mesh_dir: where to export meshes of the first export_per_family shapes per family
        limit: evaluate only the first `limit` shapes

    Returns:
        tuple: (per-shape DataFrame, per-family DataFrame with an 'overall' row)
    """
    indices = dataset.split_indices(split)
    if limit:
        indices = indices[:limit]
    exported = {}
    jobs = []
    for index in indices:
        sample = dataset.samples[index]
        export = mesh_dir is not None and exported.get(sample.family, 0) < export_per_family
        if export:
            exported[sample.family] = exported.get(sample.family, 0) + 1
        jobs.append((sample, mesh_dir if export else None))

    run = lambda job: evaluate_shape(job[0], predictor, n_views, cfg, seed, job[1])
    if threads > 1 and isinstance(predictor, OraclePredictor):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(job) for job in tqdm(jobs, desc=f'eval {split} @{n_views}v', leave=False)]

    table = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    summary = summarize(table)
    if len(table):
        logger.info(f'Evaluated {len(table)} {split} shape(s) at {n_views} view(s): '
                    f'mean IoU {summary.loc["overall", "iou"]:.4f}')
    return table, summary


def summarize(table):
    """Mean metrics per family plus an 'overall' row (NaN chamfer rows are skipped)"""
    if table.empty:
        return pd.DataFrame(columns=METRIC_COLUMNS)
    by_family = table.groupby('family')[METRIC_COLUMNS].mean()
    by_family.loc['overall'] = table[METRIC_COLUMNS].mean()
    return by_family


def save_table(table, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=REAL_FORMAT)
    logger.info(f'Wrote {len(table)} row(s) to {path}')
