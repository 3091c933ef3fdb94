import math
import torch
from msmvd.lib.errors import ContractError
from msmvd.losses import focal_loss, offset_loss, total_loss
from msmvd.network import HeadOutputs
from runner import run_tests

def test_focal_single_positive():
    p = torch.tensor([[0.5]])
    target = torch.tensor([[1.]])
    assert math.isclose(float(focal_loss(p, target)), 0.25 * math.log(2), rel_tol = 1e-6)

def test_focal_no_positives():
    p = torch.full((2, 2), 0.5)
    target = torch.zeros(2, 2)
    # normalizer falls back to 1
    assert math.isclose(float(focal_loss(p, target)), math.log(2), rel_tol = 1e-6)

def test_focal_mixed():
    p = torch.tensor([0.9, 0.2, 0.3], dtype = torch.float64)
    target = torch.tensor([1., 0.5, 0.], dtype = torch.float64)
    expected = -(0.1 ** 2 * math.log(0.9) + 0.5 ** 4 * 0.2 ** 2 * math.log(0.8) + 0.3 ** 2 * math.log(0.7))
    assert math.isclose(float(focal_loss(p, target)), expected, rel_tol = 1e-9)
    # an explicit mask overrides target == 1
    mask = torch.tensor([True, True, False])
    expected = -(0.1 ** 2 * math.log(0.9) + 0.8 ** 2 * math.log(0.2) + 0.3 ** 2 * math.log(0.7)) / 2
    assert math.isclose(float(focal_loss(p, target, mask)), expected, rel_tol = 1e-9)

def test_focal_perfect_prediction():
    target = torch.zeros(1, 5, 5)
    target[0, 1, 2] = target[0, 3, 3] = 1.
    assert 0. <= float(focal_loss(target.clone(), target)) <= 1e-5
    assert math.isclose(float(focal_loss(torch.tensor([0.5]), torch.tensor([0.]))), 0.25 * math.log(2), rel_tol = 1e-6)

def test_focal_permutation_invariance():
    torch.manual_seed(2)
    p = torch.rand(8, 8, dtype = torch.float64) * 0.98 + 0.01
    target = torch.rand(8, 8, dtype = torch.float64)
    target[2, 5] = target[6, 1] = 1.
    order = torch.randperm(64)
    shuffled = focal_loss(p.reshape(-1)[order], target.reshape(-1)[order])
    assert math.isclose(float(shuffled), float(focal_loss(p, target)), rel_tol = 1e-12)

def test_focal_exponents():
    p = torch.tensor([0.6, 0.4], dtype = torch.float64)
    target = torch.tensor([1., 0.25], dtype = torch.float64)
    expected = -(0.4 ** 3 * math.log(0.6) + 0.75 ** 2 * 0.4 ** 3 * math.log(0.6))
    assert math.isclose(float(focal_loss(p, target, alpha = 3, beta = 2)), expected, rel_tol = 1e-9)

def test_focal_clamps():
    p = torch.tensor([0., 1.])
    target = torch.tensor([1., 0.])
    assert math.isfinite(float(focal_loss(p, target)))

def test_focal_gradcheck():
    torch.manual_seed(0)
    p = (0.1 + 0.8 * torch.rand(1, 6, 6, dtype = torch.float64)).requires_grad_()
    target = torch.rand(1, 6, 6, dtype = torch.float64) * 0.9
    target[0, 2, 3] = 1.
    assert torch.autograd.gradcheck(lambda q : focal_loss(q, target), (p,))
    offsets = torch.rand(2, 8, 8, dtype = torch.float64, requires_grad = True)
    offset_target = torch.rand(2, 8, 8, dtype = torch.float64) + 2.
    mask = torch.rand(8, 8) > 0.5
    assert torch.autograd.gradcheck(lambda o : offset_loss(o, offset_target, mask), (offsets,))

def test_offset_loss():
    offsets = torch.zeros(2, 3, 3)
    target = torch.zeros(2, 3, 3)
    target[:, 1, 1] = torch.tensor([0.25, 0.75])
    target[:, 0, 2] = torch.tensor([0.5, 0.5])
    offsets[:, 2, 2] = 7.
    mask = torch.zeros(3, 3, dtype = torch.bool)
    mask[1, 1] = mask[0, 2] = True
    assert math.isclose(float(offset_loss(offsets, target, mask)), (1. + 1.) / 2)
    assert float(offset_loss(offsets, target, torch.zeros(3, 3, dtype = torch.bool))) == 0.
    one = torch.zeros(3, 3, dtype = torch.bool)
    one[1, 1] = True
    assert math.isclose(float(offset_loss(torch.full((2, 3, 3), 0.5), target, one)), 0.5)
    assert float(offset_loss(target.clone(), target, mask)) == 0.
    try:
        offset_loss(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4), mask)
    except ContractError:
        pass
    else:
        assert False, 'expected ContractError'

def make_case(levels = (3, 4, 5)):
    torch.manual_seed(1)
    occupancy, offset, targets = {}, {}, {}
    for l in levels:
        size = 2 ** (6 - l)
        occupancy[l] = torch.randn(1, 1, size, size, requires_grad = True)
        offset[l] = torch.rand(1, 2, size, size, requires_grad = True)
        pos_mask = torch.zeros(size, size, dtype = torch.bool)
        pos_mask[0, 0] = True
        target = torch.rand(1, size, size) * 0.5
        target[0, 0, 0] = 1.
        targets[l] = {'occupancy' : target, 'offset' : torch.rand(2, size, size), 'pos_mask' : pos_mask}
    return HeadOutputs(occupancy, offset), targets

def test_total_breakdown():
    outputs, targets = make_case()
    breakdown = total_loss(outputs, targets)
    assert set(breakdown.det) == set(breakdown.off) == {3, 4, 5}
    parts = sum(float(v) for v in breakdown.det.values()) + sum(float(v) for v in breakdown.off.values())
    assert math.isclose(float(breakdown.total), parts, rel_tol = 1e-5)
    floats = breakdown.as_floats()
    assert set(floats) == {'det_3', 'det_4', 'det_5', 'off_3', 'off_4', 'off_5', 'total'}
    breakdown.total.backward()
    assert all(outputs.occupancy[l].grad is not None for l in (3, 4, 5))

def test_total_without_aux_offset():
    outputs, targets = make_case()
    breakdown = total_loss(outputs, targets, aux_offset = False)
    assert set(breakdown.off) == {3} and set(breakdown.det) == {3, 4, 5}
    breakdown.total.backward()
    assert outputs.offset[4].grad is None
    single = total_loss(HeadOutputs(outputs.occupancy, None), targets)
    assert single.off == {}

def test_total_missing_level():
    outputs, targets = make_case()
    del targets[4]
    try:
        total_loss(outputs, targets)
    except ContractError as e:
        assert 'level 4' in str(e)
    else:
        assert False, 'expected ContractError'

TESTS = {
    'focal single positive' : test_focal_single_positive,
    'focal no positives' : test_focal_no_positives,
    'focal mixed' : test_focal_mixed,
    'focal perfect prediction' : test_focal_perfect_prediction,
    'focal permutation invariance' : test_focal_permutation_invariance,
    'focal exponents' : test_focal_exponents,
    'focal clamps' : test_focal_clamps,
    'focal gradcheck' : test_focal_gradcheck,
    'offset loss' : test_offset_loss,
    'total breakdown' : test_total_breakdown,
    'total without aux offset' : test_total_without_aux_offset,
    'total missing level' : test_total_missing_level,
}

if __name__ == '__main__':
    run_tests(TESTS)
