# scenegen.py
# Deterministic synthetic multi-camera scenes: camera placement, pedestrian
#   random walks, flat-shaded rendering, canonical dataset output

import colorsys
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from multiprocessing import Pool
import cv2
import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull
from tqdm import tqdm
from msmvd.geometry import (BevGridSpec, CameraCalibration, DEFAULT_HEIGHTS, look_at, project_points,
                            unproject_to_height, write_calibrations)
from msmvd.datasets import (ANNOTATION_COLUMNS, CALIBRATION_FILE, MANIFEST_FILE, SCENE_FILE, annotation_relpath,
                            image_relpath, make_manifest, write_annotations, write_image, write_manifest)
from msmvd.lib.checksums import directory_checksum
from msmvd.lib.errors import ConfigError, GenerationError
from msmvd.lib.runlog import Logger, VoidLogger

LAYOUTS = ('ring', 'two_sided', 'random_pose')
PEDESTRIAN_HEIGHT = 1.7
PEDESTRIAN_WIDTH = 0.4
MIN_COVERAGE = 0.99
OCCLUSION_OVERLAP = 0.5
OCCLUSION_MIN_PEDESTRIANS = 10
MAX_SUB_SEEDS = 32
FOV_MARGIN = 1.02
SKY_GREY = 0.8

@dataclass
class SceneSpec:
    region: tuple = (8., 8.)
    n_cameras: int = 4
    camera_layout: str = 'ring'
    n_pedestrians_range: tuple = (5, 10)
    n_frames: int = 20
    image_size: tuple = (288, 512)
    seed: int = 0
    cell_size: float = 0.05
    heights: tuple = DEFAULT_HEIGHTS
    camera_height: float = 1.6
    camera_distance: float = 1.0
    walk_step: float = 0.25
    min_separation: float = 0.5
    val_fraction: float = 0.1
    name: str = 'synthetic'

    def validate(self):
        if self.camera_layout not in LAYOUTS:
            raise ConfigError(f'scenegen.SceneSpec: camera_layout must be one of {list(LAYOUTS)} (got {self.camera_layout!r})')
        if int(self.n_cameras) < 2:
            raise ConfigError(f'scenegen.SceneSpec: n_cameras must be at least 2 (got {self.n_cameras})')
        lo, hi = self.n_pedestrians_range
        if not 0 <= lo <= hi:
            raise ConfigError(f'scenegen.SceneSpec: invalid n_pedestrians_range {tuple(self.n_pedestrians_range)}')
        if min(self.region) <= 2 * PEDESTRIAN_WIDTH:
            raise ConfigError(f'scenegen.SceneSpec: region {tuple(self.region)} is too small')
        if int(self.n_frames) < 1:
            raise ConfigError(f'scenegen.SceneSpec: n_frames must be positive (got {self.n_frames})')
        if min(self.image_size) < 32:
            raise ConfigError(f'scenegen.SceneSpec: image_size {tuple(self.image_size)} is too small')
        if not self.cell_size > 0:
            raise ConfigError(f'scenegen.SceneSpec: cell_size must be positive (got {self.cell_size})')
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f'scenegen.SceneSpec: val_fraction must lie in [0, 1) (got {self.val_fraction})')
        return self

    @property
    def grid(self) -> BevGridSpec:
        return BevGridSpec.from_region(self.region[0], self.region[1], self.cell_size, heights = self.heights)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ('region', 'n_pedestrians_range', 'image_size', 'heights'):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f'scenegen.SceneSpec: unknown fields {unknown}')
        values = dict(d)
        for key in ('region', 'n_pedestrians_range', 'image_size', 'heights'):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values).validate()

    @classmethod
    def from_json(cls, path: str | os.PathLike):
        if not os.path.exists(path):
            raise ConfigError(f'scenegen.SceneSpec.from_json: spec file {path} not found')
        try:
            with open(path, 'r', encoding = 'utf-8') as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f'scenegen.SceneSpec.from_json: {path} is not valid JSON ({e})') from e

@dataclass
class DatasetManifest:
    root: str
    name: str
    n_frames: int
    n_views: int
    checksum: str
    sub_seed: int = 0
    splits: dict = field(default_factory = dict)

# --- cameras ---

def _region_corners(spec: SceneSpec) -> np.ndarray:
    w, d = spec.region
    return np.array([[0., 0., 0.], [w, 0., 0.], [0., d, 0.], [w, d, 0.]])

def _fit_intrinsics(center, target, spec: SceneSpec, view_id: int) -> CameraCalibration:
    """
    Smallest field of view (largest focal length) that keeps every ground
        corner of the region inside the image
    """
    h, w = spec.image_size
    cx, cy = (w - 1) / 2, (h - 1) / 2
    draft = look_at(center, target, view_id, np.eye(3), h, w)
    normalized, depth = project_points(_region_corners(spec), draft)
    if np.any(~(depth > 0.1)):
        raise GenerationError(f'scenegen.place_cameras: region corners lie behind camera {view_id}')
    f = min(cx / np.max(np.abs(normalized[:, 0])), cy / np.max(np.abs(normalized[:, 1]))) / FOV_MARGIN
    K = np.array([[f, 0., cx], [0., f, cy], [0., 0., 1.]])
    return draft.with_intrinsics(K)

def _ring_positions(spec: SceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    w, d = spec.region
    center = np.array([w / 2, d / 2])
    half = np.array([w / 2 + spec.camera_distance, d / 2 + spec.camera_distance])
    result = []
    for k in range(spec.n_cameras):
        theta = 2 * math.pi * k / spec.n_cameras
        direction = np.array([math.cos(theta), math.sin(theta)])
        with np.errstate(divide = 'ignore'):
            t = np.min(np.where(np.abs(direction) > 1e-12, half / np.abs(direction), np.inf))
        xy = center + t * direction
        result.append((np.array([xy[0], xy[1], spec.camera_height]), np.array([center[0], center[1], 0.])))
    return result

def _two_sided_positions(spec: SceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    w, d = spec.region
    target = np.array([w / 2, d / 2, 0.])
    south = (spec.n_cameras + 1) // 2
    north = spec.n_cameras - south
    result = []
    for count, y in ((south, -spec.camera_distance), (north, d + spec.camera_distance)):
        for k in range(count):
            result.append((np.array([w * (k + 0.5) / count, y, spec.camera_height]), target))
    return result

def _random_pose(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    w, d = spec.region
    center = np.array([w / 2, d / 2])
    radius = math.hypot(w, d) / 2
    theta = rng.uniform(0, 2 * math.pi)
    distance = radius + rng.uniform(spec.camera_distance, 2 * spec.camera_distance)
    xy = center + distance * np.array([math.cos(theta), math.sin(theta)])
    height = rng.uniform(0.8 * spec.camera_height, 2. * spec.camera_height)
    jitter = rng.uniform(-0.1, 0.1, size = 2) * np.array([w, d])
    return np.array([xy[0], xy[1], height]), np.array([*(center + jitter), 0.])

def _random_cameras(spec: SceneSpec, rng: np.random.Generator, attempts: int = 100) -> list[CameraCalibration]:
    calibrations = []
    for view_id in range(spec.n_cameras):
        for _ in range(attempts):
            try:
                calibrations.append(_fit_intrinsics(*_random_pose(spec, rng), spec, view_id))
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f'scenegen.place_cameras: no random pose for camera {view_id} sees the whole region')
    return calibrations

def place_cameras(spec: SceneSpec) -> list[CameraCalibration]:
    """
    Calibrations for the scene's camera layout. Every camera sees the whole ground
        region; the focal length is the largest that keeps it in frame, so
        pedestrians near a camera appear several times taller than far ones.
    """
    spec.validate()
    match spec.camera_layout:
        case 'ring':
            poses = _ring_positions(spec)
        case 'two_sided':
            poses = _two_sided_positions(spec)
        case 'random_pose':
            return _random_cameras(spec, np.random.default_rng([spec.seed, 101]))
        case _:
            raise ConfigError(f'scenegen.place_cameras: unknown camera_layout {spec.camera_layout!r}')
    return [_fit_intrinsics(center, target, spec, view_id) for view_id, (center, target) in enumerate(poses)]

def coverage(calibrations: list[CameraCalibration], grid: BevGridSpec) -> tuple[float, np.ndarray]:
    """
    Fraction of full-resolution ground cells visible from at least one camera,
        and the visibility mask
    """
    gx, gy = np.meshgrid(np.arange(grid.cells_x), np.arange(grid.cells_y), indexing = 'ij')
    xy = grid.grid_to_world(np.stack([gx, gy], axis = -1))
    points = np.concatenate([xy, np.zeros(xy.shape[:-1] + (1,))], axis = -1)
    visible = np.zeros(xy.shape[:-1], dtype = bool)
    for calib in calibrations:
        pixels, depth = project_points(points, calib)
        with np.errstate(invalid = 'ignore'):
            visible |= ((depth > 0) & (pixels[..., 0] >= -0.5) & (pixels[..., 0] < calib.image_width - 0.5)
                        & (pixels[..., 1] >= -0.5) & (pixels[..., 1] < calib.image_height - 0.5))
    return float(visible.mean()), visible

def check_coverage(calibrations: list[CameraCalibration], grid: BevGridSpec):
    fraction, visible = coverage(calibrations, grid)
    if fraction < MIN_COVERAGE:
        ii, jj = np.nonzero(~visible)
        lower = grid.grid_to_world([ii.min(), jj.min()])
        upper = grid.grid_to_world([ii.max(), jj.max()])
        raise GenerationError(f'scenegen.check_coverage: only {100 * fraction:.1f}% of cells are visible; uncovered cells '
                              f'span x in [{lower[0]:.2f}, {upper[0]:.2f}] m, y in [{lower[1]:.2f}, {upper[1]:.2f}] m')
    return fraction

# --- pedestrians ---

def simulate_walks(spec: SceneSpec, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Per frame: (pedestrian ids, world positions (K, 2)). A fixed population
        does a random walk clipped to the region, keeping `min_separation`;
        each frame shows a random subset of the sampled size.
    """
    lo, hi = spec.n_pedestrians_range
    w, d = spec.region
    margin = PEDESTRIAN_WIDTH / 2
    low, high = np.array([margin, margin]), np.array([w - margin, d - margin])

    def separated(p, others):
        return len(others) == 0 or np.min(np.linalg.norm(np.asarray(others) - p, axis = 1)) >= spec.min_separation

    positions = []
    for _ in range(hi):
        for _ in range(1000):
            p = rng.uniform(low, high)
            if separated(p, positions):
                positions.append(p)
                break
        else:
            raise GenerationError(f'scenegen.simulate_walks: cannot place {hi} pedestrians {spec.min_separation} m apart '
                                  f'in a {w} x {d} m region')
    positions = np.array(positions).reshape(-1, 2)

    frames = []
    for _ in range(spec.n_frames):
        count = int(rng.integers(lo, hi + 1))
        ids = np.sort(rng.choice(hi, size = count, replace = False)) if count else np.zeros(0, dtype = np.int64)
        frames.append((ids.astype(np.int64), np.round(positions[ids], 4)))
        for k in range(hi):
            step = np.clip(positions[k] + rng.normal(0., spec.walk_step, size = 2), low, high)
            if separated(step, np.delete(positions, k, axis = 0)):
                positions[k] = step
    return frames

def pedestrian_corners(xy) -> np.ndarray:
    x, y = xy
    r = PEDESTRIAN_WIDTH / 2
    return np.array([[x + dx, y + dy, z] for dx in (-r, r) for dy in (-r, r) for z in (0., PEDESTRIAN_HEIGHT)])

def pedestrian_color(pedestrian_id: int) -> tuple[int, int, int]:
    hue = (pedestrian_id * 0.618033988749895) % 1.
    return tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, 0.85, 0.9))

def silhouette(xy, calib: CameraCalibration):
    """
    Image polygon (convex hull) of a pedestrian box, or None if any corner
        is at or behind the camera
    """
    pixels, depth = project_points(pedestrian_corners(xy), calib)
    if np.any(~(depth > 0.05)):
        return None
    return pixels[ConvexHull(pixels).vertices]

def image_boxes(positions, calib: CameraCalibration) -> np.ndarray:
    """
    Axis-aligned image boxes (u0, v0, u1, v1) of each pedestrian, clipped to the image.
    Pedestrians not in front of the camera get an empty box.
    """
    boxes = np.zeros((len(positions), 4))
    for k, xy in enumerate(positions):
        polygon = silhouette(xy, calib)
        if polygon is None:
            continue
        u0, v0 = np.clip(polygon.min(axis = 0), 0, [calib.image_width, calib.image_height])
        u1, v1 = np.clip(polygon.max(axis = 0), 0, [calib.image_width, calib.image_height])
        boxes[k] = (u0, v0, u1, v1)
    return boxes

def max_overlap(boxes: np.ndarray) -> float:
    """
    Largest pairwise intersection area relative to the smaller box
    """
    best = 0.
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for a in range(len(boxes)):
        for b in range(a + 1, len(boxes)):
            smaller = min(areas[a], areas[b])
            if smaller <= 0:
                continue
            iw = min(boxes[a, 2], boxes[b, 2]) - max(boxes[a, 0], boxes[b, 0])
            ih = min(boxes[a, 3], boxes[b, 3]) - max(boxes[a, 1], boxes[b, 1])
            if iw > 0 and ih > 0:
                best = max(best, iw * ih / smaller)
    return best

def has_occlusion(frames, calibrations: list[CameraCalibration]) -> bool:
    for _, positions in frames:
        for calib in calibrations:
            if len(positions) > 1 and max_overlap(image_boxes(positions, calib)) >= OCCLUSION_OVERLAP:
                return True
    return False

# --- rendering ---

def _noise_table(spec: SceneSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 202]).uniform(-0.06, 0.06, size = (512, 512))

def ground_texture(calib: CameraCalibration, spec: SceneSpec) -> np.ndarray:
    """
    Grey-level background (H, W) in [0, 1]: checkerboard plus fixed noise on
        the ground plane, dimmed outside the region, flat above the horizon
    """
    h, w = calib.image_height, calib.image_width
    u, v = np.meshgrid(np.arange(w, dtype = np.float64), np.arange(h, dtype = np.float64))
    xy = unproject_to_height(np.stack([u, v], axis = -1), calib, 0.)[..., :2]
    sky = ~np.all(np.isfinite(xy), axis = -1)
    xy = np.where(sky[..., None], 0., xy)
    checker = (np.floor(xy[..., 0] / 0.5) + np.floor(xy[..., 1] / 0.5)) % 2
    table = _noise_table(spec)
    ti = np.floor(xy / 0.1).astype(np.int64) % table.shape[0]
    grey = 0.42 + 0.16 * checker + table[ti[..., 0], ti[..., 1]]
    inside = ((xy[..., 0] >= 0) & (xy[..., 0] < spec.region[0]) & (xy[..., 1] >= 0) & (xy[..., 1] < spec.region[1]))
    grey = np.where(inside, grey, 0.75 * grey)
    return np.where(sky, SKY_GREY, grey)

def render_view(calib: CameraCalibration, spec: SceneSpec, ids, positions, background: np.ndarray = None) -> np.ndarray:
    """
    Flat-shaded uint8 RGB image (H, W, 3) of one view; farther pedestrians
        are drawn first
    """
    if background is None:
        background = ground_texture(calib, spec)
    image = np.repeat(np.round(255 * background).astype(np.uint8)[..., None], 3, axis = -1)
    positions = np.asarray(positions, dtype = np.float64).reshape(-1, 2)
    if len(positions) == 0:
        return image
    _, depth = project_points(np.concatenate([positions, np.full((len(positions), 1), PEDESTRIAN_HEIGHT / 2)], axis = 1), calib)
    for k in np.argsort(-depth, kind = 'stable'):
        polygon = silhouette(positions[k], calib)
        if polygon is None:
            continue
        cv2.fillConvexPoly(image, np.round(polygon * 16).astype(np.int32), pedestrian_color(int(ids[k])),
                           lineType = cv2.LINE_8, shift = 4)
    return image

def _render_frame(args) -> int:
    root, spec_dict, calibrations, frame_id, ids, positions, logparent = args
    logger = logparent.sublogger()
    spec = SceneSpec.from_dict(spec_dict)
    for calib in calibrations:
        image = render_view(calib, spec, ids, positions)
        write_image(os.path.join(root, image_relpath(calib.view_id, frame_id)), image)
    logger.log(f'Rendered frame {frame_id}: {len(ids)} pedestrians in {len(calibrations)} views', timestamp = True)
    return frame_id

def generate_dataset(spec: SceneSpec, out_path: str | os.PathLike, *, nproc: int = 1, logger: Logger = None,
                     silent: bool = False) -> DatasetManifest:
    """
    Write a synthetic dataset in the canonical layout.
    Identical specs give byte-identical directories. Each rendering process
        logs the frames it draws through a sublogger of `logger`; keep the
        log file outside `out_path`, which is checksummed.
    """
    spec.validate()
    root = str(out_path)
    if logger is None:
        logger = VoidLogger()
    logger.log(f'Generating {spec.n_frames} frames of scene {spec.name!r} (seed {spec.seed}) into {root}', timestamp = True)
    if not silent:
        print(f'scenegen.generate_dataset() - {spec.n_frames} frames, {spec.n_cameras} cameras ({spec.camera_layout}) into {root}')
    grid = spec.grid
    calibrations = place_cameras(spec)
    fraction = check_coverage(calibrations, grid)
    if not silent:
        print(f'\tPlaced cameras, ground coverage {100 * fraction:.1f}%')

    need_occlusion = spec.n_pedestrians_range[1] >= OCCLUSION_MIN_PEDESTRIANS
    for sub_seed in range(MAX_SUB_SEEDS):
        frames = simulate_walks(spec, np.random.default_rng([spec.seed, sub_seed]))
        if not need_occlusion or has_occlusion(frames, calibrations):
            break
        if not silent:
            print(f'\tNo occluded pair under sub-seed {sub_seed}, retrying')
    else:
        raise GenerationError(f'scenegen.generate_dataset: no frame with an occluded pedestrian pair after {MAX_SUB_SEEDS} sub-seeds')

    try:
        os.makedirs(root, exist_ok = True)
        write_calibrations(calibrations, os.path.join(root, CALIBRATION_FILE))
        with open(os.path.join(root, SCENE_FILE), 'w', encoding = 'utf-8', newline = '\n') as f:
            json.dump({**spec.to_dict(), 'sub_seed' : sub_seed}, f, indent = 2, sort_keys = True)
            f.write('\n')
        for frame_id, (ids, positions) in enumerate(frames):
            df = pd.DataFrame({'pedestrian_id' : ids, 'world_x' : positions[:, 0], 'world_y' : positions[:, 1]}, columns = ANNOTATION_COLUMNS)
            write_annotations(df, os.path.join(root, annotation_relpath(frame_id)))
    except OSError as e:
        raise GenerationError(f'scenegen.generate_dataset: cannot write to {root} ({e})') from e

    logger.log(f'Cameras placed ({100 * fraction:.1f}% coverage), walks simulated with sub-seed {sub_seed}')
    work = [(root, spec.to_dict(), calibrations, frame_id, ids, positions, logger) for frame_id, (ids, positions) in enumerate(frames)]
    pbar = None if silent else tqdm(total = len(work))
    if nproc > 1:
        with Pool(processes = nproc) as pool:
            for _ in pool.imap(_render_frame, work):
                if pbar: pbar.update()
    else:
        for item in work:
            _render_frame(item)
            if pbar: pbar.update()
    if pbar: pbar.close()

    frame_ids = list(range(spec.n_frames))
    n_val = int(round(spec.val_fraction * spec.n_frames))
    splits = {'train' : frame_ids[:len(frame_ids) - n_val], 'val' : frame_ids[len(frame_ids) - n_val:]}
    checksum = directory_checksum(root, exclude = (MANIFEST_FILE,))
    manifest = make_manifest(spec.name, calibrations, grid, frame_ids, splits)
    manifest['checksum'] = checksum
    manifest['generator'] = {'seed' : spec.seed, 'sub_seed' : sub_seed}
    write_manifest(root, manifest)
    logger.log(f'Wrote manifest, checksum {checksum}', timestamp = True)
    if not silent:
        print(f'\tWrote {spec.n_frames} frames, checksum {checksum[:12]}')
    return DatasetManifest(root = root, name = spec.name, n_frames = spec.n_frames, n_views = len(calibrations),
                           checksum = checksum, sub_seed = sub_seed, splits = splits)
