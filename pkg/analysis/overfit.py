import dataclasses
import json
import os
import sys
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import msmvd.config as config
from msmvd.datasets import load_dataset
from msmvd.lib.checksums import dict_checksum
from msmvd.network import build_model, load_checkpoint
from msmvd.scenegen import SceneSpec, generate_dataset
from msmvd.trainer import TrainConfig, fit, make_samples, validate

OUTDIR = 'results/overfit' # pass -d followed by another directory to write elsewhere

RULES = {
    'scene' : {
        'region' : [6., 6.],
        'n_cameras' : 4,
        'camera_layout' : 'ring',
        'n_pedestrians_range' : [5, 10],
        'n_frames' : 22,
        'val_fraction' : 0.1, # 20 training frames
        'image_size' : [128, 192],
        'cell_size' : 0.05,
        'seed' : 0,
        'name' : 'overfit',
    },
    'model' : {'backbone' : 'small', 'channels' : 32},
    'train' : {
        'epochs' : 200,
        'accumulation' : 1,
        'augment' : False,
        'val_split' : 'train', # checkpoint selection on the split being overfit
        'deterministic' : True,
    },
    'modes' : ['full', 'msp_only', 'baseline'],
    'single_scale_levels' : [3, 4, 5],
    'tolerance' : 0.02,
    'target_moda' : 0.9,
    'target_modp' : 0.75,
}

def prepare_scene(outdir: str, rules: dict, regenerate: bool = False) -> str:
    print('START SCENE GENERATION')
    spec = SceneSpec.from_dict(rules['scene'])
    root = f'{outdir}/scene_{dict_checksum(spec.to_dict())[:12]}'
    if os.path.exists(f'{root}/manifest.json') and not regenerate:
        print(f'Scene already generated in {root}, reusing it (pass -r to regenerate)')
        return root
    manifest = generate_dataset(spec, root)
    print(f'END SCENE GENERATION ({manifest.n_frames} frames, checksum {manifest.checksum})')
    return root

def run_mode(mode: str, dataset, outdir: str, rules: dict) -> list[dict]:
    """
    Train one ablation mode on the training split and score its best
        checkpoint there, merged and (full mode only) at single levels
    """
    print(f'START TRAINING ({mode})')
    train = {**rules['train'], 'out_dir' : f'{outdir}/runs/{mode}'}
    if 'device' not in train:
        train['device'] = DEVICE
    cfg = config.load_config(ablation = mode, overrides = {'model' : rules['model'], 'train' : train})
    calibrations, grid, index = dataset
    model = build_model(cfg['model'], len(grid.heights))
    report = fit(model, dataset, cfg, silent = not DETAILS)
    model, _ = load_checkpoint(report.best_checkpoint, train['device'])
    samples = make_samples(model, calibrations, grid, index.split('train'), cfg['data'])
    levels = [None] + (rules['single_scale_levels'] if mode == 'full' else [])
    rows = []
    for level in levels:
        train_cfg = dataclasses.replace(TrainConfig.from_dict(cfg['train']), inference_level = level)
        result, _ = validate(model, samples, grid, train_cfg)
        rows.append({'mode' : mode, 'inference' : 'merged' if level is None else f'level {level}',
                     'best_epoch' : report.best_epoch, **result.summary()})
        print(f'\t{mode} ({rows[-1]["inference"]}): MODA {100 * result.moda:.1f}, MODP {100 * result.modp:.1f}')
    print(f'END TRAINING ({mode})')
    return rows

def direction_checks(results: pd.DataFrame, rules: dict) -> dict:
    merged = results[results['inference'] == 'merged'].set_index('mode')['moda']
    tol = rules['tolerance']
    checks = {}
    full = results[(results['mode'] == 'full') & (results['inference'] == 'merged')]
    if len(full):
        checks['full reaches target MODA'] = bool(full['moda'].iloc[0] >= rules['target_moda'])
        checks['full reaches target MODP'] = bool(full['modp'].iloc[0] >= rules['target_modp'])
    if {'full', 'msp_only'} <= set(merged.index):
        checks['full >= msp_only'] = bool(merged['full'] >= merged['msp_only'] - tol)
    if {'msp_only', 'baseline'} <= set(merged.index):
        checks['msp_only >= baseline'] = bool(merged['msp_only'] >= merged['baseline'] - tol)
    if {'full', 'baseline'} <= set(merged.index):
        checks['full > baseline'] = bool(merged['full'] > merged['baseline'])
    single = results[(results['mode'] == 'full') & (results['inference'] != 'merged')]
    for _, row in single.iterrows():
        checks[f'merged >= {row["inference"]}'] = bool(merged['full'] >= row['moda'] - tol)
    return checks

def plot_results(results: pd.DataFrame, saveto: str):
    labels = [f'{m}\n{i}' for m, i in zip(results['mode'], results['inference'])]
    fig, ax = plt.subplots(figsize = (1.2 * len(results) + 2, 4))
    x = range(len(results))
    ax.bar([i - 0.2 for i in x], 100 * results['moda'], width = 0.4, label = 'MODA', color = 'tab:blue')
    ax.bar([i + 0.2 for i in x], 100 * results['modp'], width = 0.4, label = 'MODP', color = 'tab:orange')
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize = 8)
    ax.set_ylabel('training split, %')
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(saveto, dpi = 150)
    plt.close(fig)

def save_summary(outdir: str, rules: dict, results: pd.DataFrame, checks: dict):
    summary = {**rules, '_rules_chksum' : dict_checksum(rules), 'checks' : checks,
               'results' : results.to_dict(orient = 'records')}
    savepath = f'{outdir}/{summary["_rules_chksum"][:12]}'
    print(f'Saving to record subdirectory for rules checksum {summary["_rules_chksum"][:12]}')
    os.makedirs(savepath, exist_ok = True)
    with open(f'{savepath}/summary.json', 'w') as f:
        json.dump(summary, f, indent = 2)
    results.to_csv(f'{savepath}/results.csv', index = False)
    plot_results(results, f'{savepath}/results.png')
    return savepath

if __name__ == '__main__':
    REGENERATE = False # Regenerate the synthetic scene
    DETAILS = False # Progress bars and per-epoch lines during training
    DEVICE = 'cpu'
    if len(sys.argv) > 1:
        if '-r' in sys.argv:
            REGENERATE = True
        if '-v' in sys.argv:
            DETAILS = True
        if '-d' in sys.argv:
            d_index = sys.argv.index('-d')
            if d_index == len(sys.argv) - 1:
                raise Exception('Must follow -d flag with an output directory')
            OUTDIR = sys.argv[d_index + 1]
        if '-g' in sys.argv:
            g_index = sys.argv.index('-g')
            if g_index == len(sys.argv) - 1:
                raise Exception('Must follow -g flag with a torch device, e.g. cuda')
            DEVICE = sys.argv[g_index + 1]
        if '-e' in sys.argv:
            e_index = sys.argv.index('-e')
            try:
                RULES['train']['epochs'] = int(sys.argv[e_index + 1])
                assert RULES['train']['epochs'] > 0
            except (IndexError, ValueError, AssertionError):
                raise Exception('Must follow -e flag with a positive integer number of epochs')
        if '-m' in sys.argv:
            m_index = sys.argv.index('-m')
            if m_index == len(sys.argv) - 1:
                raise Exception('Must follow -m flag with comma-separated ablation modes, e.g. full,baseline')
            RULES['modes'] = sys.argv[m_index + 1].split(',')

    os.makedirs(OUTDIR, exist_ok = True)
    root = prepare_scene(OUTDIR, RULES, REGENERATE)
    dataset = load_dataset(root)

    rows = []
    for mode in RULES['modes']:
        rows.extend(run_mode(mode, dataset, OUTDIR, RULES))
    results = pd.DataFrame(rows)

    checks = direction_checks(results, RULES)
    print('Direction checks:')
    for name, passed in checks.items():
        print(f'\t{"PASS" if passed else "FAIL"}  {name}')
    savepath = save_summary(OUTDIR, RULES, results, checks)
    print(f'Results saved in {savepath}')
    sys.exit(0 if all(checks.values()) else 1)
