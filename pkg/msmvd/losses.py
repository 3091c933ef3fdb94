# losses.py
# Penalty-reduced focal loss, offset L1 loss, and their per-level sum

from dataclasses import dataclass, field
import torch
from msmvd.lib.errors import ContractError

EPSILON = 1e-6

@dataclass
class LossBreakdown:
    det: dict = field(default_factory = dict)
    off: dict = field(default_factory = dict)
    total: torch.Tensor = None

    def as_floats(self) -> dict:
        """
        Flat {name: float} view for logging, e.g. det_3, off_3, total
        """
        result = {f'det_{l}' : float(v) for l, v in sorted(self.det.items())}
        result.update({f'off_{l}' : float(v) for l, v in sorted(self.off.items())})
        result['total'] = float(self.total)
        return result

def _check_shapes(function: str, a: torch.Tensor, b: torch.Tensor):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(f'losses.{function}: prediction shape {tuple(a.shape)} does not match target shape {tuple(b.shape)}')

def focal_loss(probabilities: torch.Tensor, target: torch.Tensor, pos_mask: torch.Tensor = None,
               alpha: float = 2., beta: float = 4.) -> torch.Tensor:
    """
    Penalty-reduced pixel-wise focal loss, normalized by the number of positive
        cells (at least 1). Positives are `pos_mask` cells, or target == 1 when
        no mask is given.
    """
    _check_shapes('focal_loss', probabilities, target)
    if pos_mask is None:
        pos_mask = target == 1
    else:
        pos_mask = pos_mask.reshape(target.shape).bool()
    p = probabilities.clamp(EPSILON, 1 - EPSILON)
    pos = (1 - p) ** alpha * torch.log(p)
    neg = (1 - target) ** beta * p ** alpha * torch.log(1 - p)
    n_pos = pos_mask.sum().clamp(min = 1)
    return -torch.where(pos_mask, pos, neg).sum() / n_pos

def offset_loss(offsets: torch.Tensor, target: torch.Tensor, pos_mask: torch.Tensor) -> torch.Tensor:
    """
    L1 over both offset channels at positive cells, normalized by their count (at least 1).
    offsets and target are (..., 2, X, Y); pos_mask is (X, Y) or broadcastable.
    """
    _check_shapes('offset_loss', offsets, target)
    mask = pos_mask.to(offsets.dtype)
    n_pos = pos_mask.sum().clamp(min = 1)
    return ((offsets - target).abs() * mask).sum() / n_pos

def total_loss(outputs, targets: dict, *, aux_offset: bool = True, alpha: float = 2., beta: float = 4.) -> LossBreakdown:
    """
    Sum of focal and offset losses over the predicted levels, unit weights.
    With `aux_offset` off, offset losses above level 3 are left out.
    `targets` maps level -> {'occupancy', 'offset', 'pos_mask'} tensors.
    """
    breakdown = LossBreakdown()
    total = None
    for level in outputs.levels:
        if level not in targets:
            raise ContractError(f'losses.total_loss: no targets for level {level}')
        t = targets[level]
        logits = outputs.occupancy[level]
        occupancy = t['occupancy'].to(logits.dtype).reshape(logits.shape)
        pos_mask = t['pos_mask'].to(logits.device).reshape(logits.shape)
        det = focal_loss(torch.sigmoid(logits), occupancy, pos_mask, alpha, beta)
        breakdown.det[level] = det
        total = det if total is None else total + det
        if outputs.offset is not None and (aux_offset or level == min(outputs.levels)):
            prediction = outputs.offset[level]
            off = offset_loss(prediction, t['offset'].to(prediction.dtype).reshape(prediction.shape), t['pos_mask'].to(prediction.device))
            breakdown.off[level] = off
            total = total + off
    breakdown.total = total
    return breakdown
