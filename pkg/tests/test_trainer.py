import copy
import math
import os
import tempfile
import torch
from msmvd.config import load_config
from msmvd.datasets import load_dataset
from msmvd.lib.errors import ConfigError, DomainError, TrainingError
from msmvd.lib.runlog import read_records
from msmvd.network import build_model, load_checkpoint
from msmvd.losses import total_loss
from msmvd.trainer import TrainConfig, accumulate_gradients, fit, frame_groups, lr_at, make_samples
from runner import run_tests, tiny_dataset

SMALL = {'backbone' : 'small', 'channels' : 8}

def tiny_config(**train) -> dict:
    values = {'epochs' : 1, 'accumulation' : 2, 'out_dir' : tempfile.mkdtemp(prefix = 'msmvd_run_')}
    values.update(train)
    return load_config(overrides = {'model' : SMALL, 'train' : values}, environ = {})

def test_cosine_schedule():
    cfg = TrainConfig()
    assert math.isclose(lr_at(0, 100, cfg), 1e-3)
    assert math.isclose(lr_at(50, 100, cfg), 5.005e-4)
    assert math.isclose(lr_at(100, 100, cfg), 1e-6)
    rates = [lr_at(s, 100, cfg) for s in range(101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    for step in (-1, 101):
        try:
            lr_at(step, 100, cfg)
        except DomainError:
            continue
        assert False, f'expected DomainError for step {step}'

def test_train_config():
    for changes in ({'lr_end' : 1e-3}, {'accumulation' : 0}, {'momentum' : 0.9}):
        try:
            TrainConfig.from_dict(changes)
        except ConfigError:
            continue
        assert False, f'expected ConfigError for {changes}'

def test_accumulation_matches_mean_loss():
    torch.manual_seed(0)
    model = torch.nn.Linear(3, 1)
    samples = [torch.randn(4, 3) for _ in range(5)]
    loss_fn = lambda m, x : m(x).pow(2).sum()
    losses = accumulate_gradients(model, loss_fn, samples)
    accumulated = [p.grad.clone() for p in model.parameters()]
    model.zero_grad()
    torch.stack([loss_fn(model, x) for x in samples]).mean().backward()
    for a, p in zip(accumulated, model.parameters()):
        assert torch.allclose(a, p.grad, atol = 1e-6)
    assert len(losses) == 5

def test_frame_groups():
    assert [len(g) for g in frame_groups(range(7), 3)] == [3, 3, 1]
    assert [g for g in frame_groups(range(4), 2)] == [[0, 1], [2, 3]]
    assert list(frame_groups([], 4)) == []

def test_fit_step_is_group_mean():
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    # all 3 training frames in one group: one optimizer step
    config = tiny_config(accumulation = 3, augment = False)
    torch.manual_seed(0)
    model = build_model(config['model'], len(grid.heights))
    reference = copy.deepcopy(model)
    report = fit(model, (calibrations, grid, index), config, silent = True)
    assert report.steps == 1
    records = [r for r in read_records(report.log_path) if r['event'] == 'step']
    assert len(records) == 3 and len({r['lr'] for r in records}) == 1

    cfg = TrainConfig.from_dict(config['train'])
    samples = make_samples(reference, calibrations, grid, index.split('train'), config['data'])
    by_frame = {int(samples[i]['frame_id']) : samples[i] for i in range(len(samples))}
    reference.train()
    for r in records:
        sample = by_frame[r['frame_id']]
        loss = total_loss(reference(sample['images'], sample['grids']), sample['targets'], aux_offset = cfg.aux_offset,
                          alpha = cfg.focal_alpha, beta = cfg.focal_beta).total
        assert math.isclose(float(loss), r['total'], rel_tol = 1e-5)
        (loss / 3).backward()
    optimizer = torch.optim.Adam(reference.parameters(), lr = records[0]['lr'], betas = (0.9, 0.999), weight_decay = 0.)
    optimizer.step()
    for a, b in zip(model.parameters(), reference.parameters()):
        assert torch.allclose(a.detach().cpu(), b.detach(), atol = 1e-6)

def test_one_epoch():
    torch.manual_seed(0)
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    config = tiny_config()
    model = build_model(config['model'], len(grid.heights))
    report = fit(model, (calibrations, grid, index), config, silent = True)
    # 3 training frames in groups of 2
    assert report.steps == 2 and report.epochs == 1 and report.best_epoch == 0
    assert len(report.history) == 1 and math.isfinite(report.history['loss'][0])
    out_dir = config['train']['out_dir']
    for name in ('best.pt', 'last.pt', 'train.jsonl'):
        assert os.path.exists(os.path.join(out_dir, name)), name
    events = [r['event'] for r in read_records(report.log_path)]
    assert events[0] == 'start' and events[-1] == 'end'
    assert events.count('step') == 3 and events.count('validation') == 1
    restored, payload = load_checkpoint(report.best_checkpoint)
    assert payload['epoch'] == 0 and 'moda' in payload['metrics']
    for a, b in zip(model.state_dict().values(), restored.state_dict().values()):
        assert torch.allclose(a.cpu().float(), b.float(), atol = 1e-6)

def test_seeded_runs_repeat():
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    curves = []
    for _ in range(2):
        config = tiny_config(epochs = 2, seed = 11, deterministic = True)
        assert config['train']['augment']
        torch.manual_seed(0)
        model = build_model(config['model'], len(grid.heights))
        report = fit(model, (calibrations, grid, index), config, silent = True)
        steps = [r for r in read_records(report.log_path) if r['event'] == 'step']
        curves.append([(r['frame_id'], r['total']) for r in steps])
    assert len(curves[0]) == 6
    assert [f for f, _ in curves[0]] == [f for f, _ in curves[1]]
    for (_, a), (_, b) in zip(*curves):
        assert abs(a - b) <= 0.01 * abs(a)

def test_nonfinite_loss():
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    config = tiny_config(augment = False)
    model = build_model(config['model'], len(grid.heights))
    with torch.no_grad():
        model.heads.occupancy['shared'].out.bias.fill_(float('nan'))
    try:
        fit(model, (calibrations, grid, index), config, silent = True)
    except TrainingError as e:
        assert 'non-finite' in str(e)
    else:
        assert False, 'expected TrainingError'
    out_dir = config['train']['out_dir']
    assert os.path.exists(os.path.join(out_dir, 'nonfinite.json'))
    assert read_records(os.path.join(out_dir, 'train.jsonl'))[-1]['event'] == 'nonfinite'

def test_empty_validation_split():
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    config = tiny_config()
    model = build_model(config['model'], len(grid.heights))
    index.splits['val'] = []
    try:
        fit(model, (calibrations, grid, index), config, silent = True)
    except TrainingError as e:
        assert 'no frames to validate on' in str(e)
    else:
        assert False, 'expected TrainingError'

TESTS = {
    'cosine schedule' : test_cosine_schedule,
    'train config' : test_train_config,
    'accumulation matches mean loss' : test_accumulation_matches_mean_loss,
    'frame groups' : test_frame_groups,
    'fit step is the group mean' : test_fit_step_is_group_mean,
    'one epoch' : test_one_epoch,
    'seeded runs repeat' : test_seeded_runs_repeat,
    'non-finite loss' : test_nonfinite_loss,
    'empty validation split' : test_empty_validation_split,
}

if __name__ == '__main__':
    run_tests(TESTS)
