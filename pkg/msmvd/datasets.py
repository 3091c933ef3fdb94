# datasets.py
# Canonical dataset layout, public-dataset adapters, target maps, augmentation

import json
import math
import os
import re
import warnings
import xml.etree.ElementTree as ET
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import cv2
import numpy as np
import pandas as pd
import torch
from scipy.spatial.transform import Rotation
from msmvd.geometry import (BevGridSpec, CameraCalibration, LEVELS, read_calibrations,
                            write_calibrations, build_grid_bank, cached_grid_bank)
from msmvd.lib.errors import ConfigError, DomainError, LoadError

FORMAT_VERSION = 1
MANIFEST_FILE = 'manifest.json'
CALIBRATION_FILE = 'calibrations.txt'
SCENE_FILE = 'scene.json'
ANNOTATION_COLUMNS = ['pedestrian_id', 'world_x', 'world_y']
KERNEL_DIAMETERS = {3 : 20, 4 : 10, 5 : 5}
AUGMENT_SCALE_RANGE = (0.8, 1.2)

def image_relpath(view_id: int, frame_id: int) -> str:
    return f'images/C{view_id}/{frame_id:05d}.png'

def annotation_relpath(frame_id: int) -> str:
    return f'annotations/{frame_id:05d}.csv'

def read_image(path: str | os.PathLike) -> np.ndarray:
    """
    Image file -> float32 array (3, H, W) with values in [0, 1]
    """
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise LoadError(f'datasets.read_image: could not read image {path}')
    return np.ascontiguousarray(bgr[..., ::-1].transpose(2, 0, 1)).astype(np.float32) / 255.

def write_image(path: str | os.PathLike, rgb: np.ndarray):
    """
    Write an (H, W, 3) uint8 RGB array as PNG
    """
    os.makedirs(os.path.dirname(path), exist_ok = True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(rgb[..., ::-1])):
        raise LoadError(f'datasets.write_image: could not write image {path}')

def read_annotations(path: str | os.PathLike) -> pd.DataFrame:
    if not os.path.exists(path):
        raise LoadError(f'datasets.read_annotations: annotation file {path} not found')
    try:
        df = pd.read_csv(path, dtype = {'pedestrian_id' : 'int64', 'world_x' : 'float64', 'world_y' : 'float64'})
    except (ValueError, pd.errors.ParserError) as e:
        raise LoadError(f'datasets.read_annotations: {path}: {e}') from e
    missing = [c for c in ANNOTATION_COLUMNS if c not in df.columns]
    if missing:
        raise LoadError(f'datasets.read_annotations: {path} is missing columns {missing}')
    return df[ANNOTATION_COLUMNS]

def write_annotations(df: pd.DataFrame, path: str | os.PathLike):
    os.makedirs(os.path.dirname(path), exist_ok = True)
    df[ANNOTATION_COLUMNS].to_csv(path, index = False, float_format = '%.6f', lineterminator = '\n')

def annotation_positions(annotations) -> np.ndarray:
    """
    World (x, y) array (K, 2) from a DataFrame, an (K, 2) array,
        or a sequence of (pedestrian_id, x, y) records
    """
    if isinstance(annotations, pd.DataFrame):
        return annotations[['world_x', 'world_y']].to_numpy(dtype = np.float64).reshape(-1, 2)
    a = np.asarray(annotations, dtype = np.float64)
    if a.size == 0:
        return np.zeros((0, 2))
    if a.ndim == 2 and a.shape[1] == 3:
        return a[:, 1:3]
    return a.reshape(-1, 2)

@dataclass(eq = False)
class Frame:
    frame_id: int
    images: list
    annotations: pd.DataFrame

    def __post_init__(self):
        if len(self.images) == 0:
            raise LoadError(f'datasets.Frame: frame {self.frame_id} has no views')
        shapes = {tuple(np.shape(im)) for im in self.images}
        if len(shapes) != 1:
            raise LoadError(f'datasets.Frame: views of frame {self.frame_id} differ in size {sorted(shapes)}')

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(np.shape(self.images[0])[1:])

    @property
    def positions(self) -> np.ndarray:
        return annotation_positions(self.annotations)

@dataclass(eq = False)
class FrameRecord:
    frame_id: int
    image_paths: list
    annotations: pd.DataFrame

class FrameIndex:
    """
    Lazily loadable frames. Annotations are held in memory, images are read
        on access, so an index can be shared read-only by loader workers.
    `image_size`, if given, resizes on read (calibrations are resized by load_dataset).
    """
    def __init__(self, records: list[FrameRecord], n_views: int, splits: dict = None, image_size: tuple = None):
        self._records = list(records)
        self._by_id = {r.frame_id : i for i, r in enumerate(self._records)}
        self.n_views = n_views
        self.image_size = None if image_size is None else tuple(image_size)
        self.splits = splits if splits is not None else {'train' : self.frame_ids}

    def __len__(self):
        return len(self._records)

    @property
    def frame_ids(self) -> list[int]:
        return [r.frame_id for r in self._records]

    def record(self, frame_id: int) -> FrameRecord:
        try:
            return self._records[self._by_id[frame_id]]
        except KeyError:
            raise LoadError(f'datasets.FrameIndex: unknown frame id {frame_id}')

    def annotations(self, frame_id: int) -> pd.DataFrame:
        return self.record(frame_id).annotations

    def load(self, frame_id: int) -> Frame:
        r = self.record(frame_id)
        images = []
        for path in r.image_paths:
            image = read_image(path)
            if self.image_size is not None and image.shape[1:] != self.image_size:
                h, w = self.image_size
                image = cv2.resize(image.transpose(1, 2, 0), (w, h), interpolation = cv2.INTER_LINEAR).transpose(2, 0, 1)
            images.append(np.ascontiguousarray(image))
        return Frame(frame_id = r.frame_id, images = images, annotations = r.annotations.copy())

    def __getitem__(self, i: int) -> Frame:
        return self.load(self._records[i].frame_id)

    def subset(self, frame_ids) -> 'FrameIndex':
        return FrameIndex([self.record(f) for f in frame_ids], self.n_views, {'all' : list(frame_ids)}, self.image_size)

    def split(self, name: str) -> 'FrameIndex':
        if name == 'all':
            return self
        if name not in self.splits:
            raise LoadError(f'datasets.FrameIndex.split: no split named {name!r} (have {sorted(self.splits)})')
        return self.subset(self.splits[name])

def scale_intrinsics(K, sx: float, sy: float, *, half_pixel: bool = False) -> np.ndarray:
    """
    Intrinsics after scaling the image by (sx, sy). With `half_pixel` the
        pixel-area convention of image resizing is used (u' + 0.5 = s (u + 0.5)).
    """
    A = np.array([[sx, 0., 0.], [0., sy, 0.], [0., 0., 1.]])
    if half_pixel:
        A[0, 2] = 0.5 * sx - 0.5
        A[1, 2] = 0.5 * sy - 0.5
    return A @ np.asarray(K, dtype = np.float64)

def resize_calibrations(calibrations: list[CameraCalibration], image_size: tuple) -> list[CameraCalibration]:
    h, w = image_size
    result = []
    for c in calibrations:
        K = scale_intrinsics(c.intrinsics, w / c.image_width, h / c.image_height, half_pixel = True)
        result.append(c.with_intrinsics(K, h, w))
    return result

def _validate_positions(df: pd.DataFrame, grid: BevGridSpec, path: str):
    inside = grid.contains(annotation_positions(df))
    if not np.all(inside):
        bad = df[~inside].iloc[0]
        raise LoadError(f'datasets.load_dataset: {path}: pedestrian {int(bad.pedestrian_id)} at '
                        f'({bad.world_x:.3f}, {bad.world_y:.3f}) lies outside the BEV region')

def load_canonical(path: str | os.PathLike, *, image_size: tuple = None, silent: bool = False):
    manifest_path = os.path.join(path, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise LoadError(f'datasets.load_dataset: no {MANIFEST_FILE} in {path}')
    try:
        with open(manifest_path, 'r', encoding = 'utf-8') as f:
            manifest = json.load(f)
        version = int(manifest['format_version'])
        grid = BevGridSpec.from_dict(manifest['grid'])
        n_views = int(manifest['n_views'])
        frame_ids = [int(i) for i in manifest['frames']]
        splits = {k : [int(i) for i in v] for k, v in manifest.get('splits', {'train' : frame_ids}).items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise LoadError(f'datasets.load_dataset: corrupt manifest {manifest_path} ({type(e).__name__}: {e})') from e
    if version != FORMAT_VERSION:
        raise LoadError(f'datasets.load_dataset: {manifest_path} has format version {version}, expected {FORMAT_VERSION}')

    calibrations = read_calibrations(os.path.join(path, CALIBRATION_FILE))
    if len(calibrations) != n_views:
        raise LoadError(f'datasets.load_dataset: {CALIBRATION_FILE} holds {len(calibrations)} views but the manifest declares {n_views}')

    if not silent:
        print(f'datasets.load_dataset() - indexing {len(frame_ids)} frames of {n_views} views in {path}')
    records = []
    for frame_id in frame_ids:
        image_paths = [os.path.join(path, image_relpath(c.view_id, frame_id)) for c in calibrations]
        for p in image_paths:
            if not os.path.exists(p):
                raise LoadError(f'datasets.load_dataset: missing view image {p} for frame {frame_id}')
        ann_path = os.path.join(path, annotation_relpath(frame_id))
        df = read_annotations(ann_path)
        _validate_positions(df, grid, ann_path)
        records.append(FrameRecord(frame_id, image_paths, df))
    for name, ids in splits.items():
        unknown = set(ids) - set(frame_ids)
        if unknown:
            raise LoadError(f'datasets.load_dataset: split {name!r} names unknown frames {sorted(unknown)[:5]}')

    if image_size is not None:
        calibrations = resize_calibrations(calibrations, image_size)
    if not silent:
        print(f'\tLoaded {len(records)} frames, splits {", ".join(f"{k}={len(v)}" for k, v in splits.items())}')
    return calibrations, grid, FrameIndex(records, n_views, splits, image_size)

def write_manifest(path: str | os.PathLike, manifest: dict):
    with open(os.path.join(path, MANIFEST_FILE), 'w', encoding = 'utf-8', newline = '\n') as f:
        json.dump(manifest, f, indent = 2, sort_keys = True)
        f.write('\n')

def make_manifest(name: str, calibrations: list[CameraCalibration], grid: BevGridSpec, frame_ids: list[int], splits: dict) -> dict:
    return {
        'format_version' : FORMAT_VERSION,
        'name' : name,
        'n_views' : len(calibrations),
        'image_size' : [calibrations[0].image_height, calibrations[0].image_width],
        'grid' : grid.to_dict(),
        'frames' : list(frame_ids),
        'splits' : splits,
    }

# --- public dataset adapters ---

class _TemplateAdapter(ABC):
    """
    Adapter abstract base class: translates a public MVPD directory layout
        (Image_subsets/, annotations_positions/, calibrations/) into
        calibrations, grid and a FrameIndex in canonical form.
    """
    name = 'template'
    camera_names = []
    length_unit = 1. # meters per world unit of the calibration files
    train_fraction = 0.9

    def __init__(self, grid: BevGridSpec):
        self.grid = grid

    @abstractmethod
    def position_to_grid(self, position_id: int) -> tuple[int, int]:
        """
        Template: full-resolution grid cell (x, y) of a positionID
        """
        pass

    def world_position(self, position_id: int) -> np.ndarray:
        return self.grid.grid_to_world(self.position_to_grid(position_id))

    def read_calibrations(self, root: str) -> list[CameraCalibration]:
        calibrations = []
        for view_id, camera in enumerate(self.camera_names):
            intr_path = os.path.join(root, 'calibrations', 'intrinsic_zero', f'intr_{camera}.xml')
            extr_path = os.path.join(root, 'calibrations', 'extrinsic', f'extr_{camera}.xml')
            for p in (intr_path, extr_path):
                if not os.path.exists(p):
                    raise LoadError(f'datasets.{type(self).__name__}: missing calibration file {p}')
            storage = cv2.FileStorage(intr_path, cv2.FILE_STORAGE_READ)
            K = storage.getNode('camera_matrix').mat()
            storage.release()
            if K is None:
                raise LoadError(f'datasets.{type(self).__name__}: no camera_matrix in {intr_path}')
            try:
                tree = ET.parse(extr_path).getroot()
                rvec = np.array([float(v) for v in tree.find('rvec').text.split()])
                tvec = np.array([float(v) for v in tree.find('tvec').text.split()])
            except (ET.ParseError, AttributeError, ValueError) as e:
                raise LoadError(f'datasets.{type(self).__name__}: malformed extrinsics {extr_path} ({e})') from e
            first = self._image_dir(root, view_id)
            files = sorted(os.listdir(first)) if os.path.isdir(first) else []
            if not files:
                raise LoadError(f'datasets.{type(self).__name__}: no images in {first}')
            h, w = cv2.imread(os.path.join(first, files[0])).shape[:2]
            calibrations.append(CameraCalibration(view_id = view_id,
                                                  intrinsics = K / K[2, 2],
                                                  rotation = Rotation.from_rotvec(rvec).as_matrix(),
                                                  translation = tvec * self.length_unit,
                                                  image_height = h,
                                                  image_width = w))
        return calibrations

    def _image_dir(self, root: str, view_id: int) -> str:
        return os.path.join(root, 'Image_subsets', f'C{view_id + 1}')

    def frame_records(self, root: str, calibrations: list[CameraCalibration]) -> list[FrameRecord]:
        ann_dir = os.path.join(root, 'annotations_positions')
        if not os.path.isdir(ann_dir):
            raise LoadError(f'datasets.{type(self).__name__}: missing directory {ann_dir}')
        records = []
        for filename in sorted(os.listdir(ann_dir)):
            if not filename.endswith('.json'):
                continue
            frame_id = int(os.path.splitext(filename)[0])
            path = os.path.join(ann_dir, filename)
            try:
                with open(path, 'r', encoding = 'utf-8') as f:
                    people = json.load(f)
                rows = [(int(p['personID']), *self.world_position(int(p['positionID']))) for p in people]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise LoadError(f'datasets.{type(self).__name__}: malformed annotation file {path} ({e})') from e
            df = pd.DataFrame(rows, columns = ANNOTATION_COLUMNS).astype({'pedestrian_id' : 'int64'})
            _validate_positions(df, self.grid, path)
            image_paths = []
            for view_id in range(len(calibrations)):
                p = os.path.join(self._image_dir(root, view_id), f'{frame_id:08d}.png')
                if not os.path.exists(p):
                    raise LoadError(f'datasets.{type(self).__name__}: missing view image {p} for frame {frame_id}')
                image_paths.append(p)
            records.append(FrameRecord(frame_id, image_paths, df))
        if len(records) == 0:
            raise LoadError(f'datasets.{type(self).__name__}: no annotation files in {ann_dir}')
        return records

    def load(self, root: str, *, image_size: tuple = None, silent: bool = False):
        if not silent:
            print(f'datasets.{type(self).__name__}.load() - reading {self.name} layout from {root}')
        calibrations = self.read_calibrations(root)
        records = self.frame_records(root, calibrations)
        n_train = int(round(self.train_fraction * len(records)))
        ids = [r.frame_id for r in records]
        splits = {'train' : ids[:n_train], 'val' : ids[n_train:]}
        if image_size is not None:
            calibrations = resize_calibrations(calibrations, image_size)
        if not silent:
            print(f'\tLoaded {len(records)} frames from {len(calibrations)} cameras')
        return calibrations, self.grid, FrameIndex(records, len(calibrations), splits, image_size)

class WildtrackAdapter(_TemplateAdapter):
    """
    Wildtrack: 480 x 1440 grid of 2.5 cm cells starting at (-3 m, -9 m);
        calibrations in centimeters.
    """
    name = 'wildtrack'
    camera_names = ['CVLab1', 'CVLab2', 'CVLab3', 'CVLab4', 'IDIAP1', 'IDIAP2', 'IDIAP3']
    length_unit = 0.01

    def __init__(self):
        _TemplateAdapter.__init__(self, BevGridSpec(480, 1440, 0.025, (-3.0, -9.0)))

    def position_to_grid(self, position_id: int) -> tuple[int, int]:
        return position_id % 480, position_id // 480

class MultiviewXAdapter(_TemplateAdapter):
    name = 'multiviewx'
    camera_names = [f'Camera{k}' for k in range(1, 7)]

    def __init__(self, cells_x: int = 640, cells_y: int = 1000, cell_size: float = 0.025, origin = (0., 0.)):
        _TemplateAdapter.__init__(self, BevGridSpec(cells_x, cells_y, cell_size, origin))

    def position_to_grid(self, position_id: int) -> tuple[int, int]:
        return position_id % self.grid.cells_x, position_id // self.grid.cells_x

class GMVDAdapter(MultiviewXAdapter):
    """
    One GMVD scene: MultiviewX layout with a scene-specific grid and camera count.
    Without `n_cameras` the cameras are the intr_Camera<k>.xml files found
        under calibrations/intrinsic_zero, in order of k.
    """
    name = 'gmvd'

    def __init__(self, cells_x: int = 640, cells_y: int = 1000, n_cameras: int = None, cell_size: float = 0.025, origin = (0., 0.)):
        MultiviewXAdapter.__init__(self, cells_x, cells_y, cell_size, origin)
        self.camera_names = [] if n_cameras is None else [f'Camera{k}' for k in range(1, n_cameras + 1)]

    def read_calibrations(self, root: str) -> list[CameraCalibration]:
        if not self.camera_names:
            intr_dir = os.path.join(root, 'calibrations', 'intrinsic_zero')
            found = os.listdir(intr_dir) if os.path.isdir(intr_dir) else []
            numbers = sorted(int(m.group(1)) for m in (re.fullmatch(r'intr_Camera(\d+)\.xml', f) for f in found) if m)
            if not numbers:
                raise LoadError(f'datasets.GMVDAdapter: no intr_Camera<k>.xml files in {intr_dir}')
            self.camera_names = [f'Camera{k}' for k in numbers]
        return MultiviewXAdapter.read_calibrations(self, root)

ADAPTERS = {
    'wildtrack' : WildtrackAdapter,
    'multiviewx' : MultiviewXAdapter,
    'gmvd' : GMVDAdapter,
}

def load_dataset(path: str | os.PathLike, *, adapter: _TemplateAdapter | str = None, adapter_options: dict = None,
                 image_size: tuple = None, silent: bool = False):
    """
    Load a dataset as (calibrations, BevGridSpec, FrameIndex).
    Canonical layouts are recognised by their manifest; public layouts need
        an adapter instance or the name of one in ADAPTERS, built with
        `adapter_options` as keyword arguments (e.g. a GMVD scene's grid size).
    """
    if not os.path.isdir(path):
        raise LoadError(f'datasets.load_dataset: dataset directory {path} not found')
    if adapter is None:
        return load_canonical(path, image_size = image_size, silent = silent)
    if isinstance(adapter, str):
        if adapter not in ADAPTERS:
            raise LoadError(f'datasets.load_dataset: unknown adapter {adapter!r} (have {sorted(ADAPTERS)})')
        try:
            adapter = ADAPTERS[adapter](**(adapter_options or {}))
        except TypeError as e:
            raise ConfigError(f'datasets.load_dataset: bad options for the {adapter} adapter ({e})') from e
    return adapter.load(str(path), image_size = image_size, silent = silent)

# --- target maps ---

@dataclass(eq = False)
class TargetMaps:
    level: int
    occupancy: np.ndarray
    offset: np.ndarray
    pos_mask: np.ndarray
    skipped: int = 0

def gaussian_kernel(diameter: float) -> np.ndarray:
    """
    Unnormalized Gaussian with sigma = diameter / 6, truncated to the cells
        within diameter / 2 of the center. Peak value 1.
    """
    radius = int(math.floor(diameter / 2))
    sigma = diameter / 6
    d = np.arange(-radius, radius + 1, dtype = np.float64)
    dx, dy = np.meshgrid(d, d, indexing = 'ij')
    r2 = dx * dx + dy * dy
    kernel = np.exp(-r2 / (2 * sigma * sigma))
    kernel[r2 > (diameter / 2) ** 2] = 0.
    return kernel

def _splat(occupancy: np.ndarray, center: tuple[int, int], kernel: np.ndarray):
    radius = kernel.shape[0] // 2
    nx, ny = occupancy.shape
    ci, cj = center
    left, right = min(ci, radius), min(nx - ci, radius + 1)
    top, bottom = min(cj, radius), min(ny - cj, radius + 1)
    window = occupancy[ci - left:ci + right, cj - top:cj + bottom]
    np.maximum(window, kernel[radius - left:radius + right, radius - top:radius + bottom], out = window)

def make_target_maps(annotations, level: int, grid: BevGridSpec, *, kernel_diameter: float = None, silent: bool = True) -> TargetMaps:
    """
    Occupancy and offset targets at level-l BEV resolution.
    Each pedestrian's continuous level-l coordinate c = (offset from the region
        corner in full cells) / 2^(l-2)
        puts a peak of 1 at floor(c) and the offset floor-error c - floor(c)
        there; Gaussians of overlapping pedestrians combine by maximum.
    """
    if level not in LEVELS:
        raise DomainError(f'datasets.make_target_maps: level must be one of {LEVELS} (got {level})')
    diameter = KERNEL_DIAMETERS[level] if kernel_diameter is None else kernel_diameter
    nx, ny = grid.level_shape(level)
    occupancy = np.zeros((nx, ny), dtype = np.float64)
    offset = np.zeros((2, nx, ny), dtype = np.float64)
    pos_mask = np.zeros((nx, ny), dtype = bool)
    kernel = gaussian_kernel(diameter)

    xy = annotation_positions(annotations)
    inside = grid.contains(xy) if len(xy) else np.zeros(0, dtype = bool)
    skipped = int(np.sum(~inside))
    if skipped:
        warnings.warn(f'datasets.make_target_maps: skipped {skipped} annotations outside the BEV grid')
    c = grid.world_to_region(xy[inside]) / grid.level_stride(level)
    cells = np.floor(c).astype(np.int64)
    # rounding at the upper edge
    cells[:, 0] = np.clip(cells[:, 0], 0, nx - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, ny - 1)
    frac = np.clip(c - cells, 0., np.nextafter(1., 0.))
    for (i, j), f in zip(cells, frac):
        _splat(occupancy, (i, j), kernel)
        pos_mask[i, j] = True
        offset[:, i, j] = f
    occupancy[pos_mask] = 1.
    if not silent:
        print(f'datasets.make_target_maps() - level {level}: {int(pos_mask.sum())} peaks, {skipped} skipped')
    return TargetMaps(level = level,
                      occupancy = occupancy[None].astype(np.float32),
                      offset = offset.astype(np.float32),
                      pos_mask = pos_mask,
                      skipped = skipped)

# --- augmentation ---

def augment_view(image: np.ndarray, calib: CameraCalibration, scale: float, crop_offset: tuple[int, int]):
    """
    Resize a (3, H, W) image by `scale` and crop (positive offset) or pad
        (negative offset) back to (H, W); pixel u maps to scale * u - offset.
    The intrinsics follow the same similarity transform.
    """
    _, h, w = image.shape
    ox, oy = crop_offset
    M = np.array([[scale, 0., -ox], [0., scale, -oy]])
    if scale == 1. and ox == 0 and oy == 0:
        warped = image.copy()
    else:
        warped = cv2.warpAffine(image.transpose(1, 2, 0), M, (w, h), flags = cv2.INTER_LINEAR,
                                borderMode = cv2.BORDER_CONSTANT, borderValue = 0).transpose(2, 0, 1)
    K = np.vstack([M, [0., 0., 1.]]) @ calib.intrinsics
    return np.ascontiguousarray(warped), calib.with_intrinsics(K)

def augment(frame: Frame, calibrations: list[CameraCalibration], rng: np.random.Generator,
            scale_range: tuple = AUGMENT_SCALE_RANGE):
    """
    Random resize-and-crop, sampled independently per view. World-space
        annotations are unchanged.
    """
    images = []
    augmented = []
    for image, calib in zip(frame.images, calibrations):
        _, h, w = image.shape
        s = float(rng.uniform(*scale_range))
        rw, rh = int(round(s * w)), int(round(s * h))
        ox = int(rng.integers(min(0, rw - w), max(0, rw - w) + 1))
        oy = int(rng.integers(min(0, rh - h), max(0, rh - h) + 1))
        image, calib = augment_view(image, calib, s, (ox, oy))
        images.append(image)
        augmented.append(calib)
    return Frame(frame.frame_id, images, frame.annotations.copy()), augmented

# --- torch view of a dataset ---

def stack_grids(bank: dict, n_views: int, levels, n_heights: int) -> dict:
    """
    Sampling grids as arrays per level: coords (N, D, X, Y, 2), mask (N, D, X, Y)
    """
    stacked = {}
    for level in levels:
        coords = np.stack([np.stack([bank[(n, level, h)].coords for h in range(n_heights)]) for n in range(n_views)])
        mask = np.stack([np.stack([bank[(n, level, h)].valid_mask for h in range(n_heights)]) for n in range(n_views)])
        stacked[level] = (coords.astype(np.float32), mask)
    return stacked

class FrameSamples(torch.utils.data.Dataset):
    """
    Training/evaluation samples: images, sampling grids, and target maps per level.
    Augmentation randomness is drawn from (seed, epoch, frame_id), so a
        sample does not depend on which loader worker produced it.
    """
    def __init__(self, index: FrameIndex, calibrations: list[CameraCalibration], grid: BevGridSpec, *,
                 levels = LEVELS, projection_levels = None, target_levels = None,
                 shared_bev_resolution: bool = False, kernel_diameters: dict = None,
                 augment: bool = False, scale_range: tuple = AUGMENT_SCALE_RANGE, seed: int = 0,
                 cache_dir: str = None):
        self.index = index
        self.calibrations = calibrations
        self.grid = grid
        self.projection_levels = tuple(projection_levels or levels)
        self.target_levels = tuple(target_levels or levels)
        self.shared = shared_bev_resolution
        self.kernel_diameters = dict(KERNEL_DIAMETERS if kernel_diameters is None else {int(k) : v for k, v in kernel_diameters.items()})
        self.augment = augment
        self.scale_range = tuple(scale_range)
        self.seed = seed
        self.epoch = 0
        self.cache_dir = cache_dir

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.index)

    def targets(self, annotations) -> dict:
        result = {}
        for level in self.target_levels:
            bev_level = 3 if self.shared else level
            t = make_target_maps(annotations, bev_level, self.grid, kernel_diameter = self.kernel_diameters[bev_level])
            result[level] = {
                'occupancy' : torch.from_numpy(t.occupancy),
                'offset' : torch.from_numpy(t.offset),
                'pos_mask' : torch.from_numpy(t.pos_mask),
            }
        return result

    def __getitem__(self, i: int) -> dict:
        frame = self.index[i]
        calibrations = self.calibrations
        if self.augment:
            rng = np.random.default_rng([self.seed, self.epoch, frame.frame_id])
            frame, calibrations = augment(frame, calibrations, rng, self.scale_range)
            bank = build_grid_bank(calibrations, self.grid, self.projection_levels, shared_bev_resolution = self.shared)
        else:
            bank = cached_grid_bank(calibrations, self.grid, self.projection_levels,
                                    shared_bev_resolution = self.shared, cache_dir = self.cache_dir)
        stacked = stack_grids(bank, len(calibrations), self.projection_levels, len(self.grid.heights))
        return {
            'frame_id' : frame.frame_id,
            'images' : torch.from_numpy(np.stack(frame.images)),
            'grids' : {l : (torch.from_numpy(c), torch.from_numpy(m)) for l, (c, m) in stacked.items()},
            'targets' : self.targets(frame.annotations),
            'positions' : torch.from_numpy(frame.positions),
        }
