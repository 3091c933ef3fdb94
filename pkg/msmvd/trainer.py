# trainer.py
# Training loop: gradient accumulation, cosine schedule, validation, checkpoints

import json
import math
import os
import random
from dataclasses import dataclass, field, fields
import numpy as np
import pandas as pd
import torch
from tqdm import tqdm
from msmvd.config import TRAIN_DEFAULTS, config_hash
from msmvd.datasets import FrameSamples, annotation_positions
from msmvd.inference import infer_dataset
from msmvd.losses import total_loss
from msmvd.metrics import evaluate
from msmvd.network import save_checkpoint
from msmvd.lib.checksums import array_checksum
from msmvd.lib.errors import ConfigError, DomainError, TrainingError
from msmvd.lib.runlog import JsonLinesLogger

@dataclass
class TrainConfig:
    epochs: int = TRAIN_DEFAULTS['epochs']
    lr_start: float = TRAIN_DEFAULTS['lr_start']
    lr_end: float = TRAIN_DEFAULTS['lr_end']
    batch_size: int = TRAIN_DEFAULTS['batch_size']
    accumulation: int = TRAIN_DEFAULTS['accumulation']
    augment: bool = TRAIN_DEFAULTS['augment']
    scale_range: list = field(default_factory = lambda : list(TRAIN_DEFAULTS['scale_range']))
    seed: int = TRAIN_DEFAULTS['seed']
    device: str = TRAIN_DEFAULTS['device']
    deterministic: bool = TRAIN_DEFAULTS['deterministic']
    checkpoint_every: int = TRAIN_DEFAULTS['checkpoint_every']
    aux_offset: bool = TRAIN_DEFAULTS['aux_offset']
    focal_alpha: float = TRAIN_DEFAULTS['focal_alpha']
    focal_beta: float = TRAIN_DEFAULTS['focal_beta']
    val_split: str = TRAIN_DEFAULTS['val_split']
    threshold: float = TRAIN_DEFAULTS['threshold']
    nms_window: int = TRAIN_DEFAULTS['nms_window']
    radius: float = TRAIN_DEFAULTS['radius']
    inference_level: int = TRAIN_DEFAULTS['inference_level']
    num_workers: int = TRAIN_DEFAULTS['num_workers']
    out_dir: str = TRAIN_DEFAULTS['out_dir']

    def __post_init__(self):
        if not self.lr_end < self.lr_start:
            raise ConfigError(f'trainer.TrainConfig: lr_end ({self.lr_end}) must be below lr_start ({self.lr_start})')
        if self.accumulation < 1:
            raise ConfigError(f'trainer.TrainConfig: accumulation must be at least 1 (got {self.accumulation})')

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f'trainer.TrainConfig: unknown options {unknown}')
        return cls(**d)

@dataclass
class TrainReport:
    epochs: int
    steps: int
    best_epoch: int
    best_moda: float
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    history: pd.DataFrame

def lr_at(step: int, total_steps: int, cfg) -> float:
    """
    Cosine decay from lr_start at step 0 to lr_end at total_steps
    """
    if total_steps <= 0:
        return cfg.lr_start
    if not 0 <= step <= total_steps:
        raise DomainError(f'trainer.lr_at: step {step} outside [0, {total_steps}]')
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + math.cos(math.pi * step / total_steps))

def seed_everything(seed: int, deterministic: bool = False):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
        torch.backends.cudnn.benchmark = False
        torch.use_deterministic_algorithms(True, warn_only = True)

def accumulate_gradients(model: torch.nn.Module, loss_fn, samples) -> list[float]:
    """
    Backpropagate loss_fn(model, sample) / len(samples) for each sample,
        so the summed gradient equals that of the mean loss over the group
    """
    losses = []
    for sample in samples:
        loss = loss_fn(model, sample)
        (loss / len(samples)).backward()
        losses.append(float(loss.detach()))
    return losses

def frame_groups(samples, size: int):
    """
    Consecutive groups of `size` samples; the last group may be shorter
    """
    group = []
    for sample in samples:
        group.append(sample)
        if len(group) == size:
            yield group
            group = []
    if group:
        yield group

def first_item(batch):
    return batch[0]

def sample_to_device(sample: dict, device) -> dict:
    return {
        **sample,
        'images' : sample['images'].to(device),
        'grids' : {l : (c.to(device), m.to(device)) for l, (c, m) in sample['grids'].items()},
        'targets' : {l : {k : v.to(device) for k, v in t.items()} for l, t in sample['targets'].items()},
    }

def make_samples(model, calibrations, grid, index, data_cfg: dict, *, augment: bool = False,
                 scale_range = (0.8, 1.2), seed: int = 0) -> FrameSamples:
    return FrameSamples(index, calibrations, grid,
                        projection_levels = model.projection_levels,
                        target_levels = model.output_levels,
                        shared_bev_resolution = model.shared_bev_resolution,
                        kernel_diameters = data_cfg.get('kernel_diameters'),
                        augment = augment, scale_range = scale_range, seed = seed,
                        cache_dir = data_cfg.get('grid_cache'))

def validate(model, samples: FrameSamples, grid, cfg: TrainConfig, *, silent: bool = True):
    """
    Full inference plus metrics on `samples`; returns (EvalResult, detections)
    """
    detections = infer_dataset(model, samples, grid, threshold = cfg.threshold, level = cfg.inference_level,
                               window = cfg.nms_window, device = cfg.device, silent = silent)
    truth = {f : annotation_positions(samples.index.annotations(f)) for f in samples.index.frame_ids}
    result = evaluate({d.frame_id : d for d in detections}, truth, cfg.radius)
    return result, detections

def _dump_nonfinite(out_dir: str, sample: dict, step: int, epoch: int, lr: float, losses: dict) -> str:
    path = os.path.join(out_dir, 'nonfinite.json')
    with open(path, 'w', encoding = 'utf-8', newline = '\n') as f:
        json.dump({'step' : step, 'epoch' : epoch, 'lr' : lr, 'frame_id' : int(sample['frame_id']),
                   'inputs_hash' : array_checksum(sample['images'].detach().cpu().numpy()),
                   'losses' : {k : repr(v) for k, v in losses.items()}}, f, indent = 2, sort_keys = True)
    return path

def fit(model, dataset, config: dict, *, logger = None, silent: bool = False) -> TrainReport:
    """
    Train `model` on dataset = (calibrations, grid, frame index) under a
        resolved config (model / train / data sections).
    Keeps the checkpoint with the best validation MODA.
    """
    cfg = TrainConfig.from_dict(config['train'])
    calibrations, grid, index = dataset
    os.makedirs(cfg.out_dir, exist_ok = True)
    log_path = os.path.join(cfg.out_dir, 'train.jsonl')
    logger = JsonLinesLogger(log_path) if logger is None else logger
    seed_everything(cfg.seed, cfg.deterministic)
    model.to(cfg.device)

    train_index = index.split('train')
    val_index = index.split(cfg.val_split)
    if len(train_index) == 0:
        raise TrainingError('trainer.fit: the train split has no frames')
    if len(val_index) == 0:
        raise TrainingError(f'trainer.fit: the {cfg.val_split!r} split has no frames to validate on')
    train_samples = make_samples(model, calibrations, grid, train_index, config['data'], augment = cfg.augment,
                                 scale_range = cfg.scale_range, seed = cfg.seed)
    val_samples = make_samples(model, calibrations, grid, val_index, config['data'])
    loader = torch.utils.data.DataLoader(train_samples, batch_size = 1, shuffle = True, num_workers = cfg.num_workers,
                                         collate_fn = first_item, generator = torch.Generator().manual_seed(cfg.seed))

    optimizer = torch.optim.Adam(model.parameters(), lr = cfg.lr_start, betas = (0.9, 0.999), weight_decay = 0.)
    n_train = len(train_samples)
    steps_per_epoch = math.ceil(n_train / cfg.accumulation)
    total_steps = cfg.epochs * steps_per_epoch
    hash_ = config_hash(config)
    best_path = os.path.join(cfg.out_dir, 'best.pt')
    last_path = os.path.join(cfg.out_dir, 'last.pt')
    if not silent:
        print(f'trainer.fit() - {cfg.epochs} epochs x {n_train} frames, {total_steps} optimizer steps, device {cfg.device}')
    logger.record(event = 'start', config_hash = hash_, epochs = cfg.epochs, frames = n_train, total_steps = total_steps)

    step, epoch, lr = 0, 0, cfg.lr_start
    epoch_losses = []

    def frame_loss(model, sample):
        sample = sample_to_device(sample, cfg.device)
        outputs = model(sample['images'], sample['grids'])
        breakdown = total_loss(outputs, sample['targets'], aux_offset = cfg.aux_offset,
                               alpha = cfg.focal_alpha, beta = cfg.focal_beta)
        losses = breakdown.as_floats()
        if not math.isfinite(losses['total']):
            path = _dump_nonfinite(cfg.out_dir, sample, step, epoch, lr, losses)
            logger.record(event = 'nonfinite', step = step, epoch = epoch, dump = path)
            raise TrainingError(f'trainer.fit: non-finite loss at step {step} (epoch {epoch}, frame {int(sample["frame_id"])}); '
                                f'diagnostics in {path}')
        epoch_losses.append(losses['total'])
        logger.record(event = 'step', epoch = epoch, step = step, frame_id = int(sample['frame_id']), lr = lr, **losses)
        return breakdown.total

    best_moda, best_epoch = -math.inf, -1
    history = []
    epochs = range(cfg.epochs) if silent else tqdm(range(cfg.epochs))
    for epoch in epochs:
        model.train()
        train_samples.set_epoch(epoch)
        optimizer.zero_grad()
        epoch_losses = []
        for group in frame_groups(loader, cfg.accumulation):
            lr = lr_at(step, total_steps, cfg)
            accumulate_gradients(model, frame_loss, group)
            for param_group in optimizer.param_groups:
                param_group['lr'] = lr
            optimizer.step()
            optimizer.zero_grad()
            step += 1

        result, _ = validate(model, val_samples, grid, cfg)
        summary = result.summary()
        logger.record(event = 'validation', epoch = epoch, step = step, **summary)
        history.append({'epoch' : epoch, 'loss' : float(np.mean(epoch_losses)), **summary})
        extra = {'epoch' : epoch, 'metrics' : summary}
        if result.moda > best_moda:
            best_moda, best_epoch = result.moda, epoch
            save_checkpoint(best_path, model, config['model'], grid.to_dict(), hash_, **extra)
        if (epoch + 1) % max(cfg.checkpoint_every, 1) == 0 or epoch + 1 == cfg.epochs:
            save_checkpoint(last_path, model, config['model'], grid.to_dict(), hash_, **extra)
        if not silent:
            tqdm.write(f'\tEpoch {epoch}: loss {history[-1]["loss"]:.4f}, MODA {100 * result.moda:.1f}, MODP {100 * result.modp:.1f}')

    logger.record(event = 'end', steps = step, best_epoch = best_epoch, best_moda = best_moda)
    if not silent:
        print(f'\tCompleted training, best MODA {100 * best_moda:.1f} at epoch {best_epoch}')
    return TrainReport(epochs = cfg.epochs, steps = step, best_epoch = best_epoch, best_moda = best_moda,
                       best_checkpoint = best_path, last_checkpoint = last_path,
                       log_path = getattr(logger, 'logfile', None), history = pd.DataFrame(history))
