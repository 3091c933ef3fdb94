# metrics.py
# MODA, MODP, precision and recall with radius-limited optimal matching

import json
import os
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from msmvd.lib.errors import DomainError, EvaluationError

DEFAULT_RADIUS = 0.5
METRIC_NAMES = ['moda', 'modp', 'precision', 'recall']

@dataclass
class EvalResult:
    moda: float
    modp: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    gt_count: int
    per_frame: pd.DataFrame = field(default_factory = pd.DataFrame)

    def summary(self) -> dict:
        return {'moda' : self.moda, 'modp' : self.modp, 'precision' : self.precision, 'recall' : self.recall,
                'tp' : self.tp, 'fp' : self.fp, 'fn' : self.fn, 'gt_count' : self.gt_count}

    def table(self) -> str:
        """
        Metrics x100 with one decimal, locale independent
        """
        header = ' '.join(f'{name.upper():>9}' for name in METRIC_NAMES)
        values = ' '.join(f'{100 * getattr(self, name):>9.1f}' for name in METRIC_NAMES)
        return f'{header}\n{values}'

    def save(self, path: str | os.PathLike):
        report = {**self.summary(), 'per_frame' : self.per_frame.to_dict(orient = 'records')}
        with open(path, 'w', encoding = 'utf-8', newline = '\n') as f:
            json.dump(report, f, indent = 2, sort_keys = True)
            f.write('\n')

def _positions(points) -> np.ndarray:
    if hasattr(points, 'positions'):
        points = points.positions
    a = np.asarray(points, dtype = np.float64)
    return a.reshape(-1, 2) if a.size else np.zeros((0, 2))

def match_frame(detections, ground_truth, radius: float = DEFAULT_RADIUS) -> list[tuple[int, int, float]]:
    """
    Matching of detections to ground truth that has the most pairs within
        `radius` and, among those, the least total distance.
    Returns (detection index, ground-truth index, distance) triples.
    """
    if not radius > 0:
        raise DomainError(f'metrics.match_frame: radius must be positive (got {radius})')
    det = _positions(detections)
    gt = _positions(ground_truth)
    if len(det) == 0 or len(gt) == 0:
        return []
    distance = cdist(det, gt)
    admissible = distance <= radius
    # every admissible pair costs less than the largest possible total distance of any matching
    penalty = (min(len(det), len(gt)) + 1) * radius
    cost = np.where(admissible, distance - penalty, 0.)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c), float(distance[r, c])) for r, c in zip(rows, cols) if admissible[r, c]]

def evaluate(detections: dict, ground_truth: dict, radius: float = DEFAULT_RADIUS) -> EvalResult:
    """
    Aggregate metrics over frames. Both arguments map frame_id to positions
        (an (K, 2) array, or anything with a `positions` attribute); frames
        missing from `detections` have no detections.
    """
    unknown = sorted(set(detections) - set(ground_truth))
    if unknown:
        raise EvaluationError(f'metrics.evaluate: detections for frames without ground truth {unknown[:5]}')
    rows = []
    for frame_id in sorted(ground_truth):
        det = _positions(detections.get(frame_id, np.zeros((0, 2))))
        gt = _positions(ground_truth[frame_id])
        matches = match_frame(det, gt, radius)
        tp = len(matches)
        rows.append({'frame_id' : int(frame_id), 'gt' : len(gt), 'tp' : tp, 'fp' : len(det) - tp, 'fn' : len(gt) - tp,
                     'localization' : float(sum(1 - d / radius for _, _, d in matches))})
    per_frame = pd.DataFrame(rows, columns = ['frame_id', 'gt', 'tp', 'fp', 'fn', 'localization'])
    gt_count = int(per_frame['gt'].sum())
    if gt_count == 0:
        raise EvaluationError('metrics.evaluate: no ground-truth pedestrians in the evaluated frames')
    tp, fp, fn = (int(per_frame[c].sum()) for c in ('tp', 'fp', 'fn'))
    return EvalResult(moda = 1 - (fp + fn) / gt_count,
                      modp = float(per_frame['localization'].sum()) / tp if tp else 0.,
                      precision = tp / (tp + fp) if tp + fp else 1.,
                      recall = tp / gt_count,
                      tp = tp, fp = fp, fn = fn, gt_count = gt_count,
                      per_frame = per_frame)
