"""
Command-line sub-commands - dataset generation, training, evaluation, meshing,
ablations, frame comparisons, view sweeps, mesh metrics and reports
"""
import copy
import logging
import sys
import time
from pathlib import Path

import pandas as pd

# Import from our modules
#
# NOTE:
# This module supports both:
# - Package mode imports (from .components...)
# - Standalone mode imports (from components...)
#
if __package__:
    from .components.config import (COORDINATE_MODES, FEATURE_EXTENTS, RUN_MANIFEST, VARIANTS, config_from_dict,
                                    config_to_dict, derive_seeds, finalize_config, load_config, validate_config)
    from .components.diffcore import set_determinism
    from .components.errors import BadIndex, ConfigError
    from .components.meshing import export_mesh, extract_mesh, load_mesh
    from .components.metrics import METRIC_COLUMNS, compare_meshes, ground_truth_mesh
    from .components.model import build_model
    from .components.scenegen import dataset_hash, generate_dataset, load_dataset, save_dataset
    from .components.training import (ModelPredictor, OraclePredictor, RunManifest, eval_view_indices,
                                      evaluate_split, load_checkpoint, run_seeds, save_table, train)
else:
    from components.config import (COORDINATE_MODES, FEATURE_EXTENTS, RUN_MANIFEST, VARIANTS, config_from_dict,
                                   config_to_dict, derive_seeds, finalize_config, load_config, validate_config)
    from components.diffcore import set_determinism
    from components.errors import BadIndex, ConfigError
    from components.meshing import export_mesh, extract_mesh, load_mesh
    from components.metrics import METRIC_COLUMNS, compare_meshes, ground_truth_mesh
    from components.model import build_model
    from components.scenegen import dataset_hash, generate_dataset, load_dataset, save_dataset
    from components.training import (ModelPredictor, OraclePredictor, RunManifest, eval_view_indices,
                                     evaluate_split, load_checkpoint, run_seeds, save_table, train)

logger = logging.getLogger(__name__)


def parse_views(raw):
    try:
        return tuple(int(v) for v in raw.split(',') if v.strip())
    except ValueError as e:
        raise ConfigError(f'--views expects comma-separated integers, got "{raw}"') from e


def _manifest_config(path, overrides):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'run manifest not found: {path}')
    manifest = RunManifest.load(path)
    if not manifest.config:
        raise ConfigError(f'run manifest {path} ({manifest.command}) records no config')
    return finalize_config(config_from_dict(manifest.config), overrides, source=str(path))


def resolve_config(args, view_key=None):
    """Load --config (or the config recorded in --from-manifest), apply flag overrides and seed the stages

    A fresh config splits the root seed into per-stage seeds. A manifest keeps the
    seeds it recorded unless --seed is given.
    """
    overrides = {
        'root_seed': args.seed,
        'threads': args.threads,
        'eval.iso': args.iso,
        'eval.resolution': args.resolution,
    }
    if view_key is not None and args.views:
        views = parse_views(args.views)
        overrides[view_key] = views if view_key == 'eval.view_counts' else views[0]
    from_manifest = getattr(args, 'from_manifest', None)
    if from_manifest:
        cfg = _manifest_config(from_manifest, overrides)
        logger.info(f'Loaded config from run manifest {from_manifest}')
    else:
        cfg = load_config(args.config, overrides)
    if not from_manifest or args.seed is not None:
        seeds = derive_seeds(cfg.root_seed)
        cfg.dataset.seed = seeds['dataset']
        cfg.train.seed = seeds['train']
        cfg.eval.seed = seeds['eval']
    set_determinism(cfg.train.seed, cfg.threads)
    logger.debug(f'Resolved seeds {run_seeds(cfg)}')
    return cfg


def write_run_manifest(cfg, command, out, started, digest='', inputs=None):
    """Record config, seeds, dataset hash, inputs and outputs of one command

    A directory output gets manifest.json inside it, a file output a sibling
    <stem>.manifest.json.
    """
    out = Path(out)
    if out.is_dir():
        path = out / RUN_MANIFEST
        outputs = sorted(p.name + ('/' if p.is_dir() else '') for p in out.iterdir() if p.name != RUN_MANIFEST)
    else:
        path = out.with_name(f'{out.stem}.manifest.json')
        outputs = [out.name]
    manifest = RunManifest(
        config=config_to_dict(cfg) if cfg is not None else {},
        command=command,
        dataset_hash=digest,
        seeds=run_seeds(cfg) if cfg is not None else {},
        inputs=dict(inputs or {}),
        outputs=outputs,
        wall_clock_seconds=time.perf_counter() - started,
    )
    manifest.save(path)
    return path


def _dataset_dir(args, cfg):
    return Path(args.data) if getattr(args, 'data', None) else Path(cfg.output_dir) / 'dataset'


def _load_model(path):
    model = load_checkpoint(path)
    model.eval()
    return model


def _sample(dataset, index):
    if not 0 <= index < len(dataset.samples):
        raise BadIndex(f'shape index {index} out of range for {len(dataset.samples)} samples')
    return dataset.samples[index]


def seen_summary_fn(dataset, cfg):
    """Overall metric row over the first eval_shapes seen-family test shapes, used for best-checkpoint tracking"""
    def evaluate(model):
        _, summary = evaluate_split(dataset, ModelPredictor(model), 'seen', cfg.train.eval_views, cfg.eval,
                                    seed=cfg.eval.seed, limit=cfg.train.eval_shapes)
        return summary.loc['overall', METRIC_COLUMNS].to_dict()
    return evaluate


def train_grid(dataset, cfg, settings, out, digest=''):
    """Train one model per setting and seed offset and score each on the unseen families

    Args:
        dataset: Dataset
        cfg: resolved ExperimentConfig; eval.ablation_seeds are offsets on the train seed
        settings: list of ModelConfig overrides, e.g. [{'variant': 'P'}, {'variant': 'PC'}]
        out: run directories land in out/<values>_s<offset>

    Returns:
        per-shape DataFrame: one column per setting key, then 'seed', then the metric table
    """
    runs = []
    for setting in settings:
        label = '_'.join(str(v) for v in setting.values())
        for offset in cfg.eval.ablation_seeds:
            run_cfg = copy.deepcopy(cfg)
            for key, value in setting.items():
                setattr(run_cfg.model, key, value)
            run_cfg.train.seed = cfg.train.seed + int(offset)
            set_determinism(run_cfg.train.seed, cfg.threads)
            logger.info(f'Run {label}, seed offset {offset}')
            model, _ = train(dataset, build_model(run_cfg.model), run_cfg, out_dir=out / f'{label}_s{offset}',
                             dataset_hash=digest)
            table, _ = evaluate_split(dataset, ModelPredictor(model), 'unseen', cfg.eval.ablation_views, cfg.eval,
                                      seed=cfg.eval.seed)
            for position, (key, value) in enumerate(setting.items()):
                table.insert(position, key, value)
            table.insert(len(setting), 'seed', int(offset))
            runs.append(table)
    return pd.concat(runs, ignore_index=True)


def grid_summary(per_shape, keys):
    """Mean metrics per setting and family, in run order"""
    return per_shape.groupby([*keys, 'family'], sort=False, as_index=False)[METRIC_COLUMNS].mean()


def report_table(tables):
    """Merge per-shape tables into per-family means with one 'overall' row per group"""
    merged = pd.concat(tables, ignore_index=True)
    keys = [k for k in ('variant', 'split', 'n_views') if k in merged.columns]
    groups = merged.groupby(keys, sort=True) if keys else [((), merged)]
    rows = []
    for key, group in groups:
        base = dict(zip(keys, key if isinstance(key, tuple) else (key,)))
        for family, members in group.groupby('family', sort=True):
            rows.append({**base, 'family': family, **members[METRIC_COLUMNS].mean().to_dict(),
                         'shapes': len(members)})
        rows.append({**base, 'family': 'overall', **group[METRIC_COLUMNS].mean().to_dict(), 'shapes': len(group)})
    return pd.DataFrame(rows, columns=[*keys, 'family', *METRIC_COLUMNS, 'shapes'])


def register_commands(subparsers, common):
    """Register every sub-command on an argparse sub-parser group"""

    def command(name, help_text):
        return subparsers.add_parser(name, help=help_text, parents=[common])

    gen = command('gen-data', 'generate the synthetic multi-view dataset')

    def gen_data(args):
        started = time.perf_counter()
        cfg = resolve_config(args)
        out = Path(args.out) if args.out else Path(cfg.output_dir) / 'dataset'
        if out.exists() and any(out.iterdir()):
            raise FileExistsError(f'dataset directory {out} is not empty')
        dataset = generate_dataset(cfg.dataset, seed=cfg.dataset.seed, threads=cfg.threads)
        save_dataset(dataset, out)
        digest = dataset_hash(out)
        write_run_manifest(cfg, 'gen-data', out, started, digest)
        logger.info(f'Dataset hash {digest}')
        print(digest)
        return 0
    gen.set_defaults(handler=gen_data)

    trn = command('train', 'train a model and write checkpoints and a run manifest')
    trn.add_argument('--data', help='dataset directory (default <output dir>/dataset)')
    trn.add_argument('--variant', choices=VARIANTS)
    trn.add_argument('--coordinate-mode', choices=COORDINATE_MODES)
    trn.add_argument('--feature-extent', choices=FEATURE_EXTENTS,
                     help='per-point features sampled at the projection (spatial) or pooled per view (global)')

    def train_cmd(args):
        cfg = resolve_config(args, view_key='train.views_per_sample')
        for key in ('variant', 'coordinate_mode', 'feature_extent'):
            if getattr(args, key):
                setattr(cfg.model, key, getattr(args, key))
        data_dir = _dataset_dir(args, cfg)
        dataset = load_dataset(data_dir)
        out = Path(args.out) if args.out else Path(cfg.output_dir) / f'train_{cfg.model.variant}'
        model = build_model(cfg.model)
        _, manifest = train(dataset, model, cfg, out_dir=out, dataset_hash=dataset_hash(data_dir),
                            eval_fn=seen_summary_fn(dataset, cfg))
        manifest.inputs = {'data': str(data_dir)}
        manifest.save(out / RUN_MANIFEST)
        return 0
    trn.set_defaults(handler=train_cmd)

    ev = command('eval', 'evaluate a checkpoint and write metric CSVs and meshes')
    ev.add_argument('--data')
    ev.add_argument('--checkpoint', required=True)
    ev.add_argument('--split', default='test', choices=('test', 'seen', 'unseen', 'train'))

    def eval_cmd(args):
        started = time.perf_counter()
        cfg = resolve_config(args, view_key='eval.view_counts')
        data_dir = _dataset_dir(args, cfg)
        dataset = load_dataset(data_dir)
        model = _load_model(args.checkpoint)
        out = Path(args.out) if args.out else Path(args.checkpoint).parent / 'eval'
        for n_views in cfg.eval.view_counts:
            table, summary = evaluate_split(dataset, ModelPredictor(model), args.split, n_views, cfg.eval,
                                            seed=cfg.eval.seed, threads=cfg.threads, mesh_dir=out / 'meshes',
                                            export_per_family=cfg.eval.export_meshes)
            table.insert(2, 'split', args.split)
            save_table(table, out / f'metrics_{args.split}_v{n_views}.csv')
            save_table(summary.rename_axis('family').reset_index(), out / f'summary_{args.split}_v{n_views}.csv')
        write_run_manifest(cfg, 'eval', out, started, dataset_hash(data_dir),
                           inputs={'data': data_dir, 'checkpoint': args.checkpoint, 'split': args.split})
        return 0
    ev.set_defaults(handler=eval_cmd)

    msh = command('mesh', 'extract one mesh from a checkpoint (or the oracle)')
    msh.add_argument('--data')
    msh.add_argument('--checkpoint', help='omit to mesh the ground-truth oracle')
    msh.add_argument('--shape', type=int, default=0, help='sample index')

    def mesh_cmd(args):
        started = time.perf_counter()
        cfg = resolve_config(args, view_key='eval.view_counts')
        data_dir = _dataset_dir(args, cfg)
        dataset = load_dataset(data_dir)
        sample = _sample(dataset, args.shape)
        n_views = cfg.eval.view_counts[0]
        predictor = ModelPredictor(_load_model(args.checkpoint)) if args.checkpoint else OraclePredictor()
        view_idx = eval_view_indices(sample, n_views, cfg.eval.seed)
        mesh = extract_mesh(predictor.field(sample, view_idx), cfg.eval.resolution, cfg.eval.iso)
        out = Path(args.out) if args.out else Path(cfg.output_dir) / f'shape_{sample.index:05d}.obj'
        export_mesh(mesh, out)
        write_run_manifest(cfg, 'mesh', out, started, dataset_hash(data_dir),
                           inputs={'data': data_dir, 'checkpoint': args.checkpoint or 'oracle',
                                   'shape': sample.index, 'views': view_idx})
        logger.info(f'Mesh of shape {sample.index} ({sample.family}, {n_views} view(s)): '
                    f'{len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {out}')
        return 0
    msh.set_defaults(handler=mesh_cmd)

    met = command('metrics', 'score a mesh file against a ground-truth mesh or a dataset shape')
    met.add_argument('--pred', required=True, help='predicted mesh (.obj or .ply)')
    met.add_argument('--gt', help='ground-truth mesh (.obj or .ply)')
    met.add_argument('--data')
    met.add_argument('--shape', type=int, help='sample whose oracle surface is the ground truth (instead of --gt)')

    def metrics_cmd(args):
        started = time.perf_counter()
        if (args.gt is None) == (args.shape is None):
            raise ConfigError('metrics needs exactly one of --gt and --shape')
        cfg = resolve_config(args)
        predicted = load_mesh(args.pred)
        digest = ''
        inputs = {'pred': args.pred}
        if args.gt is not None:
            gt_mesh, gt_name = load_mesh(args.gt), args.gt
            inputs['gt'] = args.gt
        else:
            data_dir = _dataset_dir(args, cfg)
            sample = _sample(load_dataset(data_dir), args.shape)
            gt_mesh, gt_name = ground_truth_mesh(sample.shape, cfg.eval), f'shape_{sample.index:05d}'
            digest = dataset_hash(data_dir)
            inputs.update(data=data_dir, shape=sample.index)
        row = compare_meshes(predicted, gt_mesh, cfg.eval)
        table = pd.DataFrame([{'pred': args.pred, 'gt': gt_name, **row.as_dict()}],
                             columns=['pred', 'gt', *METRIC_COLUMNS, 'status'])
        out = Path(args.out) if args.out else Path(cfg.output_dir) / 'mesh_metrics.csv'
        save_table(table, out)
        write_run_manifest(cfg, 'metrics', out, started, digest, inputs=inputs)
        print(table.to_string(index=False))
        return 0
    met.set_defaults(handler=metrics_cmd)

    abl = command('ablate', 'train P, PC and PCV on identical seeds and compare on unseen families')
    abl.add_argument('--data')

    def ablate_cmd(args):
        started = time.perf_counter()
        cfg = resolve_config(args, view_key='eval.ablation_views')
        data_dir = _dataset_dir(args, cfg)
        digest = dataset_hash(data_dir)
        out = Path(args.out) if args.out else Path(cfg.output_dir) / 'ablation'
        per_shape = train_grid(load_dataset(data_dir), cfg, [{'variant': v} for v in VARIANTS], out, digest)
        save_table(per_shape, out / 'ablation_runs.csv')
        comparison = grid_summary(per_shape, ['variant'])
        save_table(comparison, out / 'ablation.csv')
        write_run_manifest(cfg, 'ablate', out, started, digest, inputs={'data': data_dir})
        print(comparison.to_string(index=False))
        return 0
    abl.set_defaults(handler=ablate_cmd)

    frm = command('compare-frames', 'train every coordinate mode x feature extent pair and compare on unseen families')
    frm.add_argument('--data')
    frm.add_argument('--variant', choices=VARIANTS, help='variant trained for every pair (default from config)')

    def compare_frames_cmd(args):
        started = time.perf_counter()
        cfg = resolve_config(args, view_key='eval.ablation_views')
        if args.variant:
            cfg.model.variant = args.variant
        data_dir = _dataset_dir(args, cfg)
        digest = dataset_hash(data_dir)
        out = Path(args.out) if args.out else Path(cfg.output_dir) / 'frames'
        settings = [{'coordinate_mode': mode, 'feature_extent': extent}
                    for mode in COORDINATE_MODES for extent in FEATURE_EXTENTS]
        per_shape = train_grid(load_dataset(data_dir), cfg, settings, out, digest)
        save_table(per_shape, out / 'frames_runs.csv')
        comparison = grid_summary(per_shape, ['coordinate_mode', 'feature_extent'])
        save_table(comparison, out / 'frames.csv')
        write_run_manifest(cfg, 'compare-frames', out, started, digest, inputs={'data': data_dir})
        print(comparison.to_string(index=False))
        return 0
    frm.set_defaults(handler=compare_frames_cmd)

    swp = command('sweep-views', 'evaluate a checkpoint at several view counts')
    swp.add_argument('--data')
    swp.add_argument('--checkpoint', required=True)

    def sweep_cmd(args):
        started = time.perf_counter()
        cfg = resolve_config(args, view_key='eval.view_counts')
        data_dir = _dataset_dir(args, cfg)
        dataset = load_dataset(data_dir)
        model = _load_model(args.checkpoint)
        out = Path(args.out) if args.out else Path(args.checkpoint).parent / 'sweep'
        tables = []
        for split in ('seen', 'unseen'):
            for n_views in cfg.eval.view_counts:
                table, _ = evaluate_split(dataset, ModelPredictor(model), split, n_views, cfg.eval, seed=cfg.eval.seed)
                table.insert(2, 'split', split)
                tables.append(table)
        per_shape = pd.concat(tables, ignore_index=True)
        save_table(per_shape, out / 'sweep_views_runs.csv')
        sweep = report_table([per_shape])
        save_table(sweep, out / 'sweep_views.csv')
        write_run_manifest(cfg, 'sweep-views', out, started, dataset_hash(data_dir),
                           inputs={'data': data_dir, 'checkpoint': args.checkpoint})
        print(sweep.to_string(index=False))
        return 0
    swp.set_defaults(handler=sweep_cmd)

    rep = command('report', 'merge metric CSVs into one summary table')
    rep.add_argument('inputs', nargs='+', help='per-shape metric CSV files')

    def report_cmd(args):
        started = time.perf_counter()
        missing = [p for p in args.inputs if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f'missing input CSV(s): {missing}')
        summary = report_table([pd.read_csv(p) for p in args.inputs])
        out = Path(args.out) if args.out else Path('report.csv')
        save_table(summary, out)
        # merges existing tables only; no config is read
        write_run_manifest(None, 'report', out, started, inputs={'tables': list(args.inputs)})
        print(summary.to_string(index=False))
        return 0
    rep.set_defaults(handler=report_cmd)

    val = command('validate-config', 'check a config file and list every violation')

    def validate_cmd(args):
        _, errors = validate_config(args.config)
        for err in errors:
            print(f'violation: {err}', file=sys.stderr)
        if errors:
            raise ConfigError(f'{len(errors)} config violation(s): ' + '; '.join(errors), violations=errors)
        print(f'{args.config}: ok')
        return 0
    val.set_defaults(handler=validate_cmd)

    return subparsers
