# inference.py
# Multi-scale map merging, peak extraction, offset decoding, detection records

import math
import os
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.ndimage import maximum_filter
from tqdm import tqdm
from msmvd.geometry import BevGridSpec
from msmvd.lib.errors import ContractError, DomainError, LoadError

DEFAULT_THRESHOLD = 0.4
DETECTION_COLUMNS = ['frame_id', 'x', 'y', 'score']

@dataclass
class DetectionSet:
    frame_id: int
    positions: np.ndarray = field(default_factory = lambda : np.zeros((0, 2)))
    scores: np.ndarray = field(default_factory = lambda : np.zeros(0))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype = np.float64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype = np.float64).reshape(-1)
        if len(self.positions) != len(self.scores):
            raise ContractError(f'inference.DetectionSet: {len(self.positions)} positions but {len(self.scores)} scores')

    def __len__(self):
        return len(self.scores)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'frame_id' : np.full(len(self), self.frame_id, dtype = np.int64),
                             'x' : self.positions[:, 0], 'y' : self.positions[:, 1], 'score' : self.scores},
                            columns = DETECTION_COLUMNS)

def _as_map(m) -> torch.Tensor:
    t = torch.as_tensor(m).detach().to('cpu', torch.float64)
    if t.dim() < 2:
        raise ContractError(f'inference.merge_maps: maps must be at least 2-dimensional (got shape {tuple(t.shape)})')
    if any(s != 1 for s in t.shape[:-2]):
        raise ContractError(f'inference.merge_maps: expected one map per level, got shape {tuple(t.shape)}')
    return t.reshape(t.shape[-2:])

def merge_maps(occupancy: dict, *, level: int = None) -> np.ndarray:
    """
    Mean of the level maps after bilinear upsampling to the level-3 shape.
    With `level`, that level's map is returned unmerged at its own resolution.
    Maps are probabilities, shaped (X_l, Y_l) or with leading unit dimensions.
    """
    maps = {l : _as_map(m) for l, m in occupancy.items()}
    if level is not None:
        if level not in maps:
            raise DomainError(f'inference.merge_maps: no level-{level} map (have {sorted(maps)})')
        return maps[level].numpy()
    base = min(maps)
    shape = tuple(maps[base].shape)
    total = torch.zeros(shape, dtype = torch.float64)
    for l, m in sorted(maps.items()):
        factor = 2 ** (l - base)
        expected = (math.ceil(shape[0] / factor), math.ceil(shape[1] / factor))
        if tuple(m.shape) not in (expected, shape):
            raise ContractError(f'inference.merge_maps: level-{l} map has shape {tuple(m.shape)}, expected {expected}')
        if tuple(m.shape) != shape:
            m = F.interpolate(m[None, None], size = shape, mode = 'bilinear', align_corners = False)[0, 0]
        total += m
    return (total / len(maps)).clamp(0., 1.).numpy()

def local_maxima(M: np.ndarray, window: int = 3) -> np.ndarray:
    """
    Cells equal to the maximum of their window x window neighborhood; among
        equal neighbors only the lowest row-major index survives
    """
    M = np.asarray(M, dtype = np.float64)
    peaks = M == maximum_filter(M, size = window, mode = 'constant', cval = -np.inf)
    r = window // 2
    padded = np.pad(M, r, mode = 'constant', constant_values = -np.inf)
    nx, ny = M.shape
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if di > 0 or (di == 0 and dj >= 0):
                continue
            neighbor = padded[r + di:r + di + nx, r + dj:r + dj + ny]
            peaks &= ~(neighbor == M)
    return peaks

def extract_detections(M, O, grid: BevGridSpec, threshold: float = DEFAULT_THRESHOLD, *, level: int = 3,
                       window: int = 3, frame_id: int = 0) -> DetectionSet:
    """
    Peaks of M (level-l resolution) scoring at least `threshold`, decoded as
        (cell + offset) * 2^(l-2) full cells from the region corner. Without an
        offset map each peak decodes to the middle of its cell (offset 0.5).
    """
    if not 0 < threshold < 1:
        raise DomainError(f'inference.extract_detections: threshold must lie in (0, 1) (got {threshold})')
    M = np.asarray(M, dtype = np.float64)
    if O is not None:
        O = np.asarray(torch.as_tensor(O).detach().cpu(), dtype = np.float64).reshape((2,) + M.shape)
    peaks = local_maxima(M, window) & (M >= threshold)
    ii, jj = np.nonzero(peaks)
    cells = np.stack([ii, jj], axis = 1).astype(np.float64)
    offsets = np.full_like(cells, 0.5) if O is None else O[:, ii, jj].T
    g = (cells + offsets) * (2 ** (level - 2))
    lower, upper = grid.extent
    positions = np.clip(grid.region_to_world(g), lower, upper - 1e-9 * grid.cell_size)
    return DetectionSet(frame_id, positions.reshape(-1, 2), M[ii, jj])

@torch.no_grad()
def predict_frame(model, images: torch.Tensor, grids: dict, grid: BevGridSpec, *, threshold: float = DEFAULT_THRESHOLD,
                  level: int = None, window: int = 3, frame_id: int = 0) -> tuple[DetectionSet, dict]:
    """
    Run the model on one frame; returns detections and the probability maps
        per level plus the map used for peak extraction under key 'merged'.
    """
    outputs = model(images, grids)
    probabilities = {l : outputs.probabilities(l).detach().cpu().numpy()[0, 0] for l in outputs.levels}
    decode_level = min(outputs.levels) if level is None else level
    M = merge_maps(probabilities, level = level)
    O = None if outputs.offset is None else outputs.offset[decode_level][0]
    if model.shared_bev_resolution:
        decode_level = 3
    detections = extract_detections(M, O, grid, threshold, level = decode_level, window = window, frame_id = frame_id)
    return detections, {**probabilities, 'merged' : M}

def infer_dataset(model, samples, grid: BevGridSpec, *, threshold: float = DEFAULT_THRESHOLD, level: int = None,
                  window: int = 3, device = 'cpu', keep_maps: bool = False, silent: bool = False):
    """
    Detections for every frame of a FrameSamples dataset, in order
    """
    model.eval()
    detections, maps = [], {}
    iterator = range(len(samples))
    if not silent:
        print(f'inference.infer_dataset() - detecting on {len(samples)} frames')
        iterator = tqdm(iterator)
    for i in iterator:
        sample = samples[i]
        grids = {l : (c.to(device), m.to(device)) for l, (c, m) in sample['grids'].items()}
        dets, frame_maps = predict_frame(model, sample['images'].to(device), grids, grid, threshold = threshold,
                                         level = level, window = window, frame_id = int(sample['frame_id']))
        detections.append(dets)
        if keep_maps:
            maps[dets.frame_id] = frame_maps
    if not silent:
        print(f'\tCompleted, {sum(len(d) for d in detections)} detections')
    return (detections, maps) if keep_maps else detections

def detections_frame(detections: list[DetectionSet]) -> pd.DataFrame:
    frames = [d.to_frame() for d in detections]
    if not frames:
        return pd.DataFrame(columns = DETECTION_COLUMNS)
    return pd.concat(frames, ignore_index = True)

def write_detections(detections: list[DetectionSet], path: str | os.PathLike):
    """
    CSV records frame_id,x,y,score (meters); frames without detections are
        kept as a row with empty position so they survive a round trip
    """
    rows = []
    for d in detections:
        if len(d) == 0:
            rows.append(pd.DataFrame({'frame_id' : [d.frame_id], 'x' : [np.nan], 'y' : [np.nan], 'score' : [np.nan]}))
        else:
            rows.append(d.to_frame())
    df = pd.concat(rows, ignore_index = True) if rows else pd.DataFrame(columns = DETECTION_COLUMNS)
    df.to_csv(path, index = False, float_format = '%.6f', lineterminator = '\n')

def read_detections(path: str | os.PathLike) -> dict:
    """
    Detection CSV -> {frame_id: DetectionSet}
    """
    if not os.path.exists(path):
        raise LoadError(f'inference.read_detections: detection file {path} not found')
    try:
        df = pd.read_csv(path)
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise LoadError(f'inference.read_detections: {path}: {e}') from e
    missing = [c for c in DETECTION_COLUMNS if c not in df.columns]
    if missing:
        raise LoadError(f'inference.read_detections: {path} is missing columns {missing}')
    result = {}
    for frame_id, group in df.groupby('frame_id', sort = True):
        group = group.dropna(subset = ['x', 'y', 'score'])
        result[int(frame_id)] = DetectionSet(int(frame_id), group[['x', 'y']].to_numpy(), group['score'].to_numpy())
    return result

def write_mvpd(detections: list[DetectionSet], grid: BevGridSpec, path: str | os.PathLike):
    """
    Whitespace records 'frame_id grid_x grid_y' in full-resolution cell units,
        the layout read by the public multiview detection evaluation kits
    """
    with open(path, 'w', encoding = 'utf-8', newline = '\n') as f:
        for d in detections:
            cells = np.round(grid.world_to_grid(d.positions)).astype(np.int64)
            for gx, gy in cells:
                f.write(f'{d.frame_id} {gx} {gy}\n')
