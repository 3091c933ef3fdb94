# config.py
# Run configuration: defaults, JSON files, environment overrides, ablation modes

import copy
import json
import os
from msmvd.lib.errors import ConfigError
from msmvd.lib.checksums import dict_checksum

ENV_PREFIX = 'MSMVD_'

MODEL_DEFAULTS = {
    'backbone' : 'resnet18',        # resnet18, resnet34, resnet50, resnet101, small
    'channels' : 256,               # C
    'mode' : 'full',                # full, msp_only, baseline
    'pooling' : 'max',              # max, mean
    'image_bottom_up' : True,
    'bev_bottom_up' : True,
    'share_heads' : True,
    'use_offset' : True,
    'shared_bev_resolution' : False,
    'head_prior' : 0.01,
}

TRAIN_DEFAULTS = {
    'epochs' : 10,
    'lr_start' : 1e-3,
    'lr_end' : 1e-6,
    'batch_size' : 1,
    'accumulation' : 16,
    'augment' : True,
    'scale_range' : [0.8, 1.2],
    'seed' : 0,
    'device' : 'cpu',
    'deterministic' : False,
    'checkpoint_every' : 1,
    'aux_offset' : True,
    'focal_alpha' : 2.,
    'focal_beta' : 4.,
    'val_split' : 'val',
    'threshold' : 0.4,
    'nms_window' : 3,
    'radius' : 0.5,
    'inference_level' : None,       # None merges levels 3-5; 3, 4 or 5 for single-scale
    'num_workers' : 0,
    'out_dir' : 'runs/default',
}

DATA_DEFAULTS = {
    'path' : None,
    'adapter' : None,               # None for the canonical layout, else wildtrack, multiviewx, gmvd
    'adapter_options' : {},         # adapter keyword arguments, e.g. {"cells_x": 480, "cells_y": 1000} for a GMVD scene
    'image_size' : None,
    'kernel_diameters' : {'3' : 20, '4' : 10, '5' : 5},
    'grid_cache' : None,
}

DEFAULTS = {'model' : MODEL_DEFAULTS, 'train' : TRAIN_DEFAULTS, 'data' : DATA_DEFAULTS}

CHOICES = {
    ('model', 'backbone') : ('resnet18', 'resnet34', 'resnet50', 'resnet101', 'small'),
    ('model', 'mode') : ('full', 'msp_only', 'baseline'),
    ('model', 'pooling') : ('max', 'mean'),
    ('train', 'inference_level') : (None, 3, 4, 5),
}

ABLATIONS = {
    'full' : {},
    'msp_only' : {'model' : {'mode' : 'msp_only'}},
    'baseline' : {'model' : {'mode' : 'baseline'}},
    'mean_pool' : {'model' : {'pooling' : 'mean'}},
    'no_bottom_up' : {'model' : {'image_bottom_up' : False, 'bev_bottom_up' : False}},
    'no_image_bottom_up' : {'model' : {'image_bottom_up' : False}},
    'no_bev_bottom_up' : {'model' : {'bev_bottom_up' : False}},
    'no_aux_offset' : {'train' : {'aux_offset' : False}},
    'no_offset' : {'model' : {'use_offset' : False}},
    'shared_bev_resolution' : {'model' : {'shared_bev_resolution' : True}},
    'single_scale_3' : {'train' : {'inference_level' : 3}},
    'single_scale_4' : {'train' : {'inference_level' : 4}},
    'single_scale_5' : {'train' : {'inference_level' : 5}},
}

def merge(config: dict, overrides: dict, source: str = 'overrides') -> dict:
    """
    Section-wise update of `config`; unknown sections or keys raise ConfigError
    """
    result = copy.deepcopy(config)
    for section, values in overrides.items():
        if section not in result:
            raise ConfigError(f'config.merge: unknown section {section!r} in {source}')
        if not isinstance(values, dict):
            raise ConfigError(f'config.merge: section {section!r} in {source} must be a mapping')
        for key, value in values.items():
            if key not in result[section]:
                raise ConfigError(f'config.merge: unknown key {section}.{key} in {source}')
            result[section][key] = value
    return result

def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text

def env_overrides(environ = None) -> dict:
    """
    MSMVD_<SECTION>__<KEY>=<value> variables as an overrides dictionary
    """
    environ = os.environ if environ is None else environ
    overrides = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX) or '__' not in name:
            continue
        section, key = name[len(ENV_PREFIX):].split('__', 1)
        overrides.setdefault(section.lower(), {})[key.lower()] = _parse_env_value(text)
    return overrides

def validate(config: dict) -> dict:
    for (section, key), allowed in CHOICES.items():
        if config[section][key] not in allowed:
            raise ConfigError(f'config.validate: {section}.{key} must be one of {list(allowed)} (got {config[section][key]!r})')
    train = config['train']
    if not train['lr_end'] < train['lr_start']:
        raise ConfigError(f'config.validate: train.lr_end ({train["lr_end"]}) must be below train.lr_start ({train["lr_start"]})')
    if int(train['accumulation']) < 1:
        raise ConfigError(f'config.validate: train.accumulation must be at least 1 (got {train["accumulation"]})')
    if int(train['batch_size']) != 1:
        raise ConfigError('config.validate: train.batch_size must be 1 (one frame of N views per step)')
    if not 0 < float(train['threshold']) < 1:
        raise ConfigError(f'config.validate: train.threshold must lie in (0, 1) (got {train["threshold"]})')
    if not float(train['radius']) > 0:
        raise ConfigError(f'config.validate: train.radius must be positive (got {train["radius"]})')
    lo, hi = train['scale_range']
    if not 0 < lo <= hi:
        raise ConfigError(f'config.validate: invalid train.scale_range {train["scale_range"]}')
    if int(config['model']['channels']) <= 0:
        raise ConfigError('config.validate: model.channels must be positive')
    return config

def load_config(path: str | os.PathLike = None, *, ablation: str = None, overrides: dict = None, environ = None) -> dict:
    """
    Resolve a run configuration. Precedence, lowest first:
        defaults, config file, environment, ablation mode, explicit overrides.
    An ablation therefore also applies on top of a saved full config.
    """
    if ablation is not None and ablation not in ABLATIONS:
        raise ConfigError(f'config.load_config: unknown ablation {ablation!r} (have {", ".join(ABLATIONS)})')
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f'config.load_config: config file {path} not found')
        try:
            with open(path, 'r', encoding = 'utf-8') as f:
                from_file = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f'config.load_config: {path} is not valid JSON ({e})') from e
        config = merge(config, from_file, str(path))
    config = merge(config, env_overrides(environ), 'environment')
    if ablation is not None:
        config = merge(config, ABLATIONS[ablation], f'ablation {ablation}')
    if overrides:
        config = merge(config, overrides, 'command line')
    return validate(config)

def config_hash(config: dict) -> str:
    return dict_checksum(config)

def save_config(config: dict, path: str | os.PathLike):
    with open(path, 'w', encoding = 'utf-8', newline = '\n') as f:
        json.dump(config, f, indent = 2, sort_keys = True)
        f.write('\n')
