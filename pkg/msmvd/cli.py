# cli.py
# Command-line entry points: gen-data, train, eval, infer, plot

import argparse
import json
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
import numpy as np
import msmvd
from msmvd.config import config_hash, load_config, save_config
from msmvd.datasets import MANIFEST_FILE, annotation_positions, load_dataset, make_target_maps
from msmvd.lib.checksums import file_checksum
from msmvd.lib.errors import ConfigError, DomainError, LoadError, MSMVDError
from msmvd.lib.runlog import Logger, VoidLogger

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

@dataclass
class RunManifest:
    command: str
    config_hash: str = None
    dataset_hash: str = None
    code_version: str = msmvd.__version__
    started: str = None
    finished: str = None
    status: int = None
    outputs: list = field(default_factory = list)

    def save(self, path: str | os.PathLike):
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok = True)
        with open(path, 'w', encoding = 'utf-8', newline = '\n') as f:
            json.dump(asdict(self), f, indent = 2, sort_keys = True)
            f.write('\n')

def _now() -> str:
    return datetime.now(timezone.utc).isoformat()

def run_manifest_path(out: str) -> str:
    return os.path.normpath(out) + '.run.json'

def dataset_hash(path: str) -> str:
    manifest = os.path.join(path, MANIFEST_FILE)
    return file_checksum(manifest) if os.path.exists(manifest) else None

def _image_size(text: str):
    if text is None:
        return None
    try:
        h, w = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise ConfigError(f'cli: --image-size must look like 720x1280 (got {text!r})')
    return (h, w)

def _resolve_config(args, extra: dict = None) -> dict:
    overrides = {'train' : {}, 'data' : {}}
    for flag, section, key in (('seed', 'train', 'seed'), ('device', 'train', 'device'), ('threshold', 'train', 'threshold'),
                               ('data', 'data', 'path'), ('adapter', 'data', 'adapter'), ('image_size', 'data', 'image_size')):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[section][key] = value
    for (section, key), value in (extra or {}).items():
        overrides[section][key] = value
    return load_config(getattr(args, 'config', None), ablation = getattr(args, 'ablation', None), overrides = overrides)

def _load_data(config: dict, silent: bool):
    path = config['data']['path']
    if path is None:
        raise ConfigError('cli: no dataset given (use --data or data.path in the config)')
    if not os.path.isdir(path):
        raise LoadError(f'cli: dataset directory {path} not found')
    size = config['data']['image_size']
    return load_dataset(path, adapter = config['data']['adapter'], adapter_options = config['data']['adapter_options'],
                        image_size = None if size is None else tuple(size), silent = silent)

def cmd_gen_data(args, manifest: RunManifest) -> int:
    from msmvd.scenegen import SceneSpec, generate_dataset
    spec = SceneSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    logfile = os.path.normpath(args.out) + '.log'
    logger = VoidLogger() if args.nolog else Logger(logfile = logfile)
    result = generate_dataset(spec, args.out, nproc = args.nproc, logger = logger, silent = args.silent)
    manifest.config_hash = config_hash(spec.to_dict())
    manifest.dataset_hash = result.checksum
    manifest.outputs = [args.out] if args.nolog else [args.out, logfile]
    print(f'dataset {result.name}: {result.n_frames} frames, {result.n_views} views, checksum {result.checksum}')
    return EXIT_OK

def cmd_train(args, manifest: RunManifest) -> int:
    from msmvd.network import build_model
    from msmvd.trainer import fit
    extra = {} if args.out is None else {('train', 'out_dir') : args.out}
    config = _resolve_config(args, extra)
    calibrations, grid, index = _load_data(config, args.silent)
    out_dir = config['train']['out_dir']
    os.makedirs(out_dir, exist_ok = True)
    save_config(config, os.path.join(out_dir, 'config.json'))
    manifest.config_hash = config_hash(config)
    manifest.dataset_hash = dataset_hash(config['data']['path'])
    model = build_model(config['model'], len(grid.heights))
    report = fit(model, (calibrations, grid, index), config, silent = args.silent)
    report.history.to_csv(os.path.join(out_dir, 'history.csv'), index = False, lineterminator = '\n')
    manifest.outputs = [out_dir, report.best_checkpoint, report.last_checkpoint, report.log_path, os.path.join(out_dir, 'history.csv')]
    print(f'best MODA {100 * report.best_moda:.1f} at epoch {report.best_epoch}; checkpoint {report.best_checkpoint}')
    return EXIT_OK

def cmd_eval(args, manifest: RunManifest) -> int:
    from msmvd.inference import read_detections
    from msmvd.metrics import evaluate
    config = _resolve_config(args)
    calibrations, grid, index = _load_data(config, args.silent)
    index = index.split(args.split)
    truth = {f : annotation_positions(index.annotations(f)) for f in index.frame_ids}
    if args.detections is not None:
        detections = read_detections(args.detections)
        detections = {f : d for f, d in detections.items() if f in truth}
        result = evaluate(detections, truth, config['train']['radius'])
    else:
        from msmvd.network import load_checkpoint
        from msmvd.trainer import TrainConfig, make_samples, seed_everything, validate
        seed_everything(config['train']['seed'])
        model, _ = load_checkpoint(args.checkpoint, config['train']['device'])
        samples = make_samples(model, calibrations, grid, index, config['data'])
        result, _ = validate(model, samples, grid, TrainConfig.from_dict(config['train']), silent = args.silent)
    manifest.config_hash = config_hash(config)
    manifest.dataset_hash = dataset_hash(config['data']['path'])
    print(result.table())
    if args.out is not None:
        result.save(args.out)
        manifest.outputs = [args.out]
    return EXIT_OK

def cmd_infer(args, manifest: RunManifest) -> int:
    from msmvd.inference import infer_dataset, write_detections, write_mvpd
    from msmvd.network import load_checkpoint
    from msmvd.trainer import make_samples, seed_everything
    config = _resolve_config(args)
    seed_everything(config['train']['seed'])
    calibrations, grid, index = _load_data(config, args.silent)
    index = index.split(args.split)
    model, _ = load_checkpoint(args.checkpoint, config['train']['device'])
    samples = make_samples(model, calibrations, grid, index, config['data'])
    train = config['train']
    detections, maps = infer_dataset(model, samples, grid, threshold = train['threshold'], level = train['inference_level'],
                                     window = train['nms_window'], device = train['device'], keep_maps = True, silent = args.silent)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok = True)
    write_detections(detections, args.out)
    manifest.outputs = [args.out]
    if args.mvpd is not None:
        write_mvpd(detections, grid, args.mvpd)
        manifest.outputs.append(args.mvpd)
    if args.maps is not None:
        np.savez_compressed(args.maps, **{f'{frame_id}_{key}' : m for frame_id, frame_maps in maps.items() for key, m in frame_maps.items()})
        manifest.outputs.append(args.maps)
    manifest.config_hash = config_hash(config)
    manifest.dataset_hash = dataset_hash(config['data']['path'])
    print(f'{sum(len(d) for d in detections)} detections in {len(detections)} frames -> {args.out}')
    return EXIT_OK

def cmd_plot(args, manifest: RunManifest) -> int:
    from msmvd.inference import read_detections
    from msmvd.plotting import close, plot_bev
    config = _resolve_config(args)
    calibrations, grid, index = _load_data(config, True)
    M, level_maps = None, None
    if args.maps is not None:
        if not os.path.exists(args.maps):
            raise LoadError(f'cli: maps file {args.maps} not found')
        with np.load(args.maps) as data:
            frame_maps = {name.split('_', 1)[1] : data[name] for name in data.files if name.split('_', 1)[0] == str(args.frame)}
        M = frame_maps.get('merged')
        if args.per_level:
            level_maps = {int(k) : v for k, v in frame_maps.items() if k.isdigit()}
    elif args.targets:
        M = make_target_maps(index.annotations(args.frame), 3, grid).occupancy[0]
        if args.per_level:
            level_maps = {l : make_target_maps(index.annotations(args.frame), l, grid).occupancy[0] for l in (3, 4, 5)}
    detections = None
    if args.detections is not None:
        d = read_detections(args.detections).get(args.frame)
        detections = None if d is None else d.positions
    truth = annotation_positions(index.annotations(args.frame)) if args.frame in index.frame_ids else None
    fig = plot_bev(M, grid, detections, truth, args.out, level_maps = level_maps, title = f'frame {args.frame}')
    close(fig)
    manifest.outputs = [args.out]
    return EXIT_OK

COMMANDS = {
    'gen-data' : cmd_gen_data,
    'train' : cmd_train,
    'eval' : cmd_eval,
    'infer' : cmd_infer,
    'plot' : cmd_plot,
}

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog = 'msmvd', description = 'Multi-scale multi-view pedestrian detection')
    parser.add_argument('--silent', action = 'store_true', help = 'suppress progress output')
    sub = parser.add_subparsers(dest = 'command', required = True)

    def common(p, out_required = True):
        p.add_argument('--config', help = 'JSON run configuration (model / train / data sections)')
        p.add_argument('--ablation', help = 'ablation mode, e.g. baseline, msp_only, no_offset, single_scale_3')
        p.add_argument('--data', help = 'dataset directory')
        p.add_argument('--adapter', help = 'public dataset layout: wildtrack, multiviewx or gmvd')
        p.add_argument('--image-size', help = 'resize views on load, e.g. 720x1280')
        p.add_argument('--device', help = 'torch device, e.g. cpu or cuda')
        p.add_argument('--threshold', type = float, help = 'detection threshold')
        p.add_argument('--seed', type = int, help = 'random seed (train.seed)')
        p.add_argument('--out', required = out_required, help = 'output path')

    p = sub.add_parser('gen-data', help = 'generate a synthetic dataset')
    p.add_argument('spec', help = 'scene spec JSON file')
    p.add_argument('--out', required = True, help = 'dataset directory to write')
    p.add_argument('--seed', type = int, help = 'override the scene seed')
    p.add_argument('-n', '--nproc', type = int, default = 1, help = 'number of rendering processes')
    p.add_argument('--nolog', action = 'store_true', help = 'do not write <out>.log')

    p = sub.add_parser('train', help = 'train a model')
    common(p, out_required = False)

    p = sub.add_parser('eval', help = 'evaluate a checkpoint or a detection file')
    common(p, out_required = False)
    source = p.add_mutually_exclusive_group(required = True)
    source.add_argument('--checkpoint', help = 'model checkpoint')
    source.add_argument('--detections', help = 'detection CSV (frame_id,x,y,score)')
    p.add_argument('--split', default = 'all', help = 'frames to evaluate: all, train or val')

    p = sub.add_parser('infer', help = 'write detections for a dataset')
    common(p)
    p.add_argument('--checkpoint', required = True, help = 'model checkpoint')
    p.add_argument('--split', default = 'all', help = 'frames to process: all, train or val')
    p.add_argument('--maps', help = 'also save probability maps to this .npz file')
    p.add_argument('--mvpd', help = 'also write grid-cell records for public evaluation kits')

    p = sub.add_parser('plot', help = 'render a BEV occupancy figure')
    common(p)
    p.add_argument('--frame', type = int, default = 0, help = 'frame id')
    p.add_argument('--maps', help = '.npz maps written by infer --maps')
    p.add_argument('--targets', action = 'store_true', help = 'plot ground-truth target maps instead of predictions')
    p.add_argument('--detections', help = 'detection CSV to overlay')
    p.add_argument('--per-level', action = 'store_true', help = 'draw M_3, M_4 and M_5 side by side')
    return parser

def main(argv = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, 'image_size') and args.image_size is not None:
        try:
            args.image_size = _image_size(args.image_size)
        except ConfigError as e:
            print(f'error: {e}', file = sys.stderr)
            return EXIT_USAGE
    manifest = RunManifest(command = args.command, started = _now())
    status = EXIT_RUNTIME
    try:
        status = COMMANDS[args.command](args, manifest)
    except (ConfigError, DomainError, LoadError) as e:
        print(f'error: {e}', file = sys.stderr)
        status = EXIT_USAGE
    except MSMVDError as e:
        print(f'error: {e}', file = sys.stderr)
        status = EXIT_RUNTIME
    except Exception as e:
        traceback.print_exc()
        print(f'error: {type(e).__name__}: {e}', file = sys.stderr)
        status = EXIT_RUNTIME
    manifest.finished = _now()
    manifest.status = status
    out = getattr(args, 'out', None) or (manifest.outputs[0] if manifest.outputs else None) \
        or getattr(args, 'checkpoint', None) or getattr(args, 'detections', None)
    if out is not None:
        try:
            manifest.save(run_manifest_path(out))
        except OSError as e:
            print(f'warning: could not write run manifest ({e})', file = sys.stderr)
    return status

if __name__ == '__main__':
    sys.exit(main())
