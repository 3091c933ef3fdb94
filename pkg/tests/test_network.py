import itertools
import math
import os
import tempfile
import numpy as np
import torch
from msmvd.datasets import FrameSamples, load_dataset
from msmvd.geometry import BevGridSpec
from msmvd.lib.errors import ConfigError, ContractError, LoadError
from msmvd.losses import total_loss
from msmvd.network import (Backbone, FeaturePyramid, Heads, PyramidFeatures, bev_fpn_forward, build_model, load_backbone_weights,
                           load_checkpoint, pool_views, sample_views, save_checkpoint)
from runner import run_tests, tiny_dataset

SMALL = {'backbone' : 'small', 'channels' : 8}

def tiny_sample(shared_bev_resolution = False) -> dict:
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    return FrameSamples(index, calibrations, grid, shared_bev_resolution = shared_bev_resolution)[0]

def pass_through(block):
    c = block.reduce.out_channels
    with torch.no_grad():
        block.reduce.weight.zero_()
        block.reduce.bias.zero_()
        block.reduce.weight[:, :c, 0, 0] = torch.eye(c)
        block.refine[3].weight.zero_()
        block.refine[3].bias.zero_()

def test_backbone_shapes():
    torch.manual_seed(0)
    backbone = Backbone('small').eval()
    with torch.no_grad():
        features = backbone(torch.rand(2, 3, 256, 256))
    assert features.levels == (3, 4, 5)
    assert features.shapes == {3 : (2, 32, 32, 32), 4 : (2, 64, 16, 16), 5 : (2, 128, 8, 8)}
    with torch.no_grad():
        features = backbone(torch.rand(1, 3, 720, 1280))
    assert {l : s[-2:] for l, s in features.shapes.items()} == {3 : (90, 160), 4 : (45, 80), 5 : (23, 40)}
    assert Backbone('resnet18').channels == (128, 256, 512)

def test_bottleneck_backbones():
    torch.manual_seed(0)
    backbone = Backbone('resnet50').eval()
    assert backbone.channels == (512, 1024, 2048)
    with torch.no_grad():
        features = backbone(torch.rand(1, 3, 64, 96))
    assert features.shapes == {3 : (1, 512, 8, 12), 4 : (1, 1024, 4, 6), 5 : (1, 2048, 2, 3)}
    assert [len(layer) for layer in (backbone.layer1, backbone.layer2, backbone.layer3, backbone.layer4)] == [3, 4, 6, 3]
    deep = Backbone('resnet101')
    assert deep.channels == (512, 1024, 2048) and len(deep.layer3) == 23
    model = build_model({'backbone' : 'resnet50', 'channels' : 8})
    assert model.image_fpn.lateral['5'].in_channels == 2048

def test_backbone_errors():
    backbone = Backbone('small')
    for images, error in ((torch.rand(3, 64, 64), ContractError), (torch.rand(1, 1, 64, 64), ContractError),
                          (torch.rand(1, 3, 62, 64), ConfigError)):
        try:
            backbone(images)
        except error:
            continue
        assert False, f'expected {error.__name__} for {tuple(images.shape)}'
    try:
        Backbone('vgg')
    except ConfigError:
        pass
    else:
        assert False, 'expected ConfigError'

def test_image_fpn_shapes():
    torch.manual_seed(0)
    backbone = Backbone('small')
    fpn = FeaturePyramid(backbone.channels, 16)
    with torch.no_grad():
        out = fpn(backbone(torch.rand(1, 3, 720, 1280)))
    assert out.shapes == {3 : (1, 16, 90, 160), 4 : (1, 16, 45, 80), 5 : (1, 16, 23, 40)}
    try:
        bev_fpn_forward(fpn, backbone(torch.rand(1, 3, 64, 64)))
    except ContractError as e:
        assert 'bev' in str(e)
    else:
        assert False, 'expected ContractError'

def test_fpn_pass_through():
    torch.manual_seed(1)
    fpn = FeaturePyramid((8, 8, 8), 8, bottom_up = True)
    with torch.no_grad():
        for l in ('3', '4', '5'):
            fpn.lateral[l].weight.copy_(torch.eye(8)[:, :, None, None])
            fpn.lateral[l].bias.zero_()
    for block in list(fpn.top_down.values()) + list(fpn.bottom_up_fuse.values()):
        pass_through(block)
    features = PyramidFeatures('bev', {3 : torch.rand(1, 8, 12, 12), 4 : torch.rand(1, 8, 6, 6), 5 : torch.rand(1, 8, 3, 3)})
    with torch.no_grad():
        out = fpn(features)
    for l in (3, 4, 5):
        assert torch.allclose(out[l], features[l], atol = 1e-6)

def test_top_down_information_flow():
    torch.manual_seed(2)
    for bottom_up in (True, False):
        fpn = FeaturePyramid((8, 8, 8), 8, bottom_up = bottom_up).eval()
        base = {3 : torch.rand(1, 8, 12, 12), 4 : torch.rand(1, 8, 6, 6), 5 : torch.rand(1, 8, 3, 3)}
        with torch.no_grad():
            out = fpn(PyramidFeatures('bev', base))
            changed5 = fpn(PyramidFeatures('bev', {**base, 5 : base[5] + 1.}))
            changed3 = fpn(PyramidFeatures('bev', {**base, 3 : base[3] + 1.}))
        assert not torch.allclose(out[3], changed5[3])
        assert not torch.allclose(out[5], changed3[5]) if bottom_up else torch.equal(out[5], changed3[5])

def test_sample_views():
    features = torch.zeros(1, 1, 4, 5)
    features[0, 0, 2, 3] = 1.
    coords = torch.tensor([[3., 2.], [3.5, 2.], [3., 2.5], [0., 0.], [3., 2.]]).reshape(1, 1, 5, 1, 2)
    mask = torch.tensor([True, True, True, True, False]).reshape(1, 1, 5, 1)
    out = sample_views(features, coords, mask)
    assert tuple(out.shape) == (1, 1, 5, 1)
    assert torch.allclose(out[0, 0, :, 0], torch.tensor([1., 0.5, 0.5, 0., 0.]))
    constant = torch.full((2, 3, 4, 5), 3.)
    coords = torch.rand(2, 2, 6, 7, 2) * torch.tensor([4., 3.])
    mask = torch.rand(2, 2, 6, 7) > 0.3
    out = sample_views(constant, coords, mask)
    assert tuple(out.shape) == (2, 6, 6, 7)
    expected = 3. * mask.float().repeat_interleave(3, dim = 1)
    assert torch.allclose(out, expected, atol = 1e-5)

def test_sample_views_linear():
    torch.manual_seed(3)
    f1, f2 = torch.rand(2, 4, 8, 10), torch.rand(2, 4, 8, 10)
    coords = torch.rand(2, 3, 5, 5, 2) * torch.tensor([9., 7.])
    mask = torch.ones(2, 3, 5, 5, dtype = torch.bool)
    combined = sample_views(2. * f1 - 0.5 * f2, coords, mask)
    assert torch.allclose(combined, 2. * sample_views(f1, coords, mask) - 0.5 * sample_views(f2, coords, mask), atol = 1e-5)

def test_pool_views():
    a = torch.tensor([[[[1., 5.]]], [[[3., 2.]]]])
    views = PyramidFeatures('bev', {3 : a})
    assert torch.equal(pool_views(views, 'max')[3], torch.tensor([[[[3., 5.]]]]))
    assert torch.equal(pool_views(views, 'mean')[3], torch.tensor([[[[2., 3.5]]]]))
    try:
        pool_views(views, 'sum')
    except ConfigError:
        pass
    else:
        assert False, 'expected ConfigError'

def test_head_prior():
    torch.manual_seed(4)
    heads = Heads(8, (3, 4, 5), share = True, prior = 0.01)
    assert math.isclose(float(heads.occupancy['shared'].out.bias), math.log(0.01 / 0.99), rel_tol = 1e-6)
    bev = PyramidFeatures('bev', {3 : torch.rand(1, 8, 20, 20), 4 : torch.rand(1, 8, 10, 10), 5 : torch.rand(1, 8, 5, 5)})
    with torch.no_grad():
        out = heads(bev)
    p = out.probabilities(3)
    assert 0.005 < float(p.mean()) < 0.02
    assert set(out.offset) == {3, 4, 5} and tuple(out.offset[4].shape) == (1, 2, 10, 10)
    separate = Heads(8, (3, 4, 5), share = False)
    assert set(separate.occupancy.keys()) == {'3', '4', '5'}
    assert Heads(8, (3,), use_offset = False)(PyramidFeatures('bev', {3 : bev[3]})).offset is None

def test_model_shapes():
    torch.manual_seed(5)
    sample = tiny_sample()
    model = build_model(SMALL).eval()
    with torch.no_grad():
        out = model(sample['images'], sample['grids'], return_features = True)
    assert out.levels == (3, 4, 5)
    assert {l : tuple(o.shape) for l, o in out.occupancy.items()} == {3 : (1, 1, 20, 20), 4 : (1, 1, 10, 10), 5 : (1, 1, 5, 5)}
    assert tuple(out.offset[5].shape) == (1, 2, 5, 5)
    assert tuple(out.features['views'][3].shape) == (4, 8, 20, 20)
    msp_only = build_model({**SMALL, 'mode' : 'msp_only'}).eval()
    assert msp_only.bev_fpn is None
    baseline = build_model({**SMALL, 'mode' : 'baseline'}).eval()
    assert baseline.projection_levels == (5,) and baseline.output_levels == (3,)
    with torch.no_grad():
        out = baseline(sample['images'], {5 : tiny_sample(shared_bev_resolution = True)['grids'][5]})
    assert out.levels == (3,) and tuple(out.occupancy[3].shape) == (1, 1, 20, 20)
    shared = build_model({**SMALL, 'shared_bev_resolution' : True}).eval()
    with torch.no_grad():
        out = shared(sample['images'], tiny_sample(shared_bev_resolution = True)['grids'])
    assert all(tuple(o.shape) == (1, 1, 20, 20) for o in out.occupancy.values())
    try:
        build_model({'depth' : 3})
    except ConfigError:
        pass
    else:
        assert False, 'expected ConfigError'

def test_shapes_across_sizes():
    torch.manual_seed(11)
    model = build_model({'backbone' : 'small', 'channels' : 4}).eval()
    for (h, w), (cx, cy) in itertools.product(((256, 256), (720, 1280)), ((64, 64), (480, 1440))):
        grid = BevGridSpec(cx, cy, 0.025)
        grids = {}
        for l in (3, 4, 5):
            xl, yl = grid.level_shape(l)
            scale = torch.tensor([math.ceil(w / 2 ** l) - 1., math.ceil(h / 2 ** l) - 1.])
            grids[l] = (torch.rand(1, 5, xl, yl, 2) * scale, torch.rand(1, 5, xl, yl) > 0.2)
        with torch.no_grad():
            out = model(torch.rand(1, 3, h, w), grids, return_features = True)
        for l in (3, 4, 5):
            image = (1, 4, math.ceil(h / 2 ** l), math.ceil(w / 2 ** l))
            bev = (1, 4) + grid.level_shape(l)
            case = ((h, w), (cx, cy), l)
            assert tuple(out.features['image'][l].shape) == image, case
            for key in ('views', 'bev', 'fused'):
                assert tuple(out.features[key][l].shape) == bev, (case, key)
            assert tuple(out.occupancy[l].shape) == (1, 1) + grid.level_shape(l), case
            assert tuple(out.offset[l].shape) == (1, 2) + grid.level_shape(l), case
        del out

def test_missing_grid():
    sample = tiny_sample()
    model = build_model(SMALL).eval()
    try:
        with torch.no_grad():
            model(sample['images'], {3 : sample['grids'][3]})
    except ConfigError as e:
        assert 'level 4' in str(e)
    else:
        assert False, 'expected ConfigError'

def test_view_permutation_invariance():
    torch.manual_seed(6)
    sample = tiny_sample()
    model = build_model(SMALL).eval()
    order = torch.tensor([2, 0, 3, 1])
    permuted = {l : (c[order], m[order]) for l, (c, m) in sample['grids'].items()}
    with torch.no_grad():
        a = model(sample['images'], sample['grids'])
        b = model(sample['images'][order], permuted)
    for l in a.levels:
        assert torch.allclose(a.occupancy[l], b.occupancy[l], atol = 1e-5)
        assert torch.allclose(a.offset[l], b.offset[l], atol = 1e-5)

def test_gradient_finite_difference():
    torch.manual_seed(7)
    sample = tiny_sample()
    model = build_model({**SMALL, 'pooling' : 'mean'}).double().eval()
    images = sample['images'].double()
    grids = sample['grids']

    def objective():
        out = model(images, grids)
        return sum((torch.sigmoid(out.occupancy[l]) ** 2).sum() + out.offset[l].sum() for l in out.levels)

    parameters = [(model.msp.fuse['4'].weight, (1, 3, 0, 0)), (model.bev_fpn.lateral['5'].bias, (2,)),
                  (model.heads.occupancy['shared'].body[2].weight, (0, 1, 1, 1))]
    model.zero_grad()
    objective().backward()
    eps = 1e-6
    for parameter, index in parameters:
        analytic = float(parameter.grad[index])
        with torch.no_grad():
            parameter[index] += eps
            up = float(objective())
            parameter[index] -= 2 * eps
            down = float(objective())
            parameter[index] += eps
        numeric = (up - down) / (2 * eps)
        assert math.isclose(analytic, numeric, rel_tol = 1e-4, abs_tol = 1e-7), (analytic, numeric)

def test_loss_gradient_wrt_pixels():
    torch.manual_seed(10)
    sample = tiny_sample()
    model = build_model({**SMALL, 'pooling' : 'mean'}).double().eval()
    images = sample['images'].double().clone().requires_grad_(True)
    grids, targets = sample['grids'], sample['targets']

    def objective(x):
        return total_loss(model(x, grids), targets).total

    objective(images).backward()
    analytic = images.grad.detach().clone()
    rng = np.random.default_rng(10)
    eps = 1e-5
    n, c, h, w = images.shape
    for index in zip(rng.integers(0, n, 20), rng.integers(0, c, 20), rng.integers(0, h, 20), rng.integers(0, w, 20)):
        index = tuple(int(k) for k in index)
        with torch.no_grad():
            x = images.detach().clone()
            x[index] += eps
            up = float(objective(x))
            x[index] -= 2 * eps
            down = float(objective(x))
        numeric = (up - down) / (2 * eps)
        expected = float(analytic[index])
        assert abs(numeric - expected) <= 1e-3 * abs(expected) + 1e-9, (index, expected, numeric)

def test_checkpoint_round_trip():
    torch.manual_seed(8)
    sample = tiny_sample()
    model = build_model(SMALL).eval()
    path = os.path.join(tempfile.mkdtemp(), 'model.pt')
    save_checkpoint(path, model, SMALL, {'cells_x' : 40, 'cells_y' : 40, 'cell_size' : 0.1,
                                         'origin' : [0.05, 0.05], 'heights' : [0., 0.3, 0.6, 0.9, 1.2]}, 'abc', epoch = 3)
    loaded, payload = load_checkpoint(path)
    assert payload['epoch'] == 3 and payload['config_hash'] == 'abc'
    with torch.no_grad():
        a = model(sample['images'], sample['grids'])
        b = loaded.eval()(sample['images'], sample['grids'])
    for l in a.levels:
        assert torch.allclose(a.occupancy[l], b.occupancy[l], atol = 1e-6)
    torch.save({'format_version' : 99}, path)
    for bad in (path, path + '.missing'):
        try:
            load_checkpoint(bad)
        except LoadError:
            continue
        assert False, f'expected LoadError for {bad}'

def test_backbone_weights():
    torch.manual_seed(9)
    source = build_model(SMALL)
    path = os.path.join(tempfile.mkdtemp(), 'backbone.pt')
    torch.save({f'backbone.{k}' : v for k, v in source.backbone.state_dict().items()}, path)
    target = build_model(SMALL)
    missing, unexpected = load_backbone_weights(target, path)
    assert missing == [] and unexpected == []
    for k, v in source.backbone.state_dict().items():
        assert torch.equal(v, target.backbone.state_dict()[k])
    torch.save({'fc.weight' : torch.zeros(3, 3)}, path)
    try:
        load_backbone_weights(target, path)
    except LoadError:
        pass
    else:
        assert False, 'expected LoadError'

TESTS = {
    'backbone shapes' : test_backbone_shapes,
    'bottleneck backbones' : test_bottleneck_backbones,
    'backbone errors' : test_backbone_errors,
    'image fpn shapes' : test_image_fpn_shapes,
    'fpn pass-through' : test_fpn_pass_through,
    'top-down information flow' : test_top_down_information_flow,
    'sample views' : test_sample_views,
    'sample views linear' : test_sample_views_linear,
    'pool views' : test_pool_views,
    'head prior' : test_head_prior,
    'model shapes' : test_model_shapes,
    'shapes across sizes' : test_shapes_across_sizes,
    'missing grid' : test_missing_grid,
    'view permutation invariance' : test_view_permutation_invariance,
    'gradient finite difference' : test_gradient_finite_difference,
    'loss gradient wrt pixels' : test_loss_gradient_wrt_pixels,
    'checkpoint round trip' : test_checkpoint_round_trip,
    'backbone weights' : test_backbone_weights,
}

if __name__ == '__main__':
    run_tests(TESTS)
