# geometry.py
# Camera model, world <-> pixel projection, BEV sampling grids and their cache

import math
import os
import dataclasses
from dataclasses import dataclass, field
import numpy as np
from msmvd.lib.errors import DomainError, ProjectionError, ConfigError, LoadError
from msmvd.lib.checksums import dict_checksum

# World frame: z up, ground plane z = 0, meters.
LEVELS = (3, 4, 5)
DEFAULT_HEIGHTS = tuple(round(0.30 * i, 2) for i in range(5))
DEGENERATE_DEPTH = 1e-9
ORTHONORMAL_TOLERANCE = 1e-6
GRID_CACHE_VERSION = 1

@dataclass(eq = False)
class CameraCalibration:
    """
    Pinhole camera: pixel ~ K [R|T] (x, y, z, 1).
    `rotation` and `translation` map world coordinates into the camera frame
        (x right, y down, z forward).
    """
    view_id: int
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_height: int
    image_width: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype = np.float64).reshape(3, 3)
        self.rotation = np.asarray(self.rotation, dtype = np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype = np.float64).reshape(3)
        self.view_id = int(self.view_id)
        self.image_height = int(self.image_height)
        self.image_width = int(self.image_width)
        K = self.intrinsics
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise DomainError(f'geometry.CameraCalibration: intrinsics of view {self.view_id} are not upper-triangular')
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise DomainError(f'geometry.CameraCalibration: focal lengths of view {self.view_id} must be positive')
        if abs(K[2, 2] - 1.) > 1e-12:
            raise DomainError(f'geometry.CameraCalibration: K[2,2] of view {self.view_id} must be 1 (got {K[2, 2]})')
        R = self.rotation
        if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHONORMAL_TOLERANCE or abs(np.linalg.det(R) - 1.) > ORTHONORMAL_TOLERANCE:
            raise DomainError(f'geometry.CameraCalibration: rotation of view {self.view_id} is not a proper rotation')
        if self.image_height <= 0 or self.image_width <= 0:
            raise DomainError(f'geometry.CameraCalibration: invalid image size {self.image_height}x{self.image_width}')

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """
        Camera center in world coordinates
        """
        return -self.rotation.T @ self.translation

    def with_intrinsics(self, intrinsics, image_height = None, image_width = None):
        return dataclasses.replace(self,
                                   intrinsics = np.array(intrinsics, dtype = np.float64),
                                   rotation = self.rotation.copy(),
                                   translation = self.translation.copy(),
                                   image_height = self.image_height if image_height is None else image_height,
                                   image_width = self.image_width if image_width is None else image_width)

    def to_dict(self) -> dict:
        return {
            'view_id' : self.view_id,
            'K' : self.intrinsics.ravel().tolist(),
            'R' : self.rotation.ravel().tolist(),
            'T' : self.translation.tolist(),
            'image_size' : [self.image_height, self.image_width],
        }

@dataclass(eq = False)
class BevGridSpec:
    """
    Ground-plane discretization. `origin` is the world (x, y) of the center of
        full-resolution cell (0, 0); cell (i, j) has center origin + (i, j) * cell_size.
    """
    cells_x: int
    cells_y: int
    cell_size: float
    origin: np.ndarray = field(default_factory = lambda : np.zeros(2))
    heights: tuple = DEFAULT_HEIGHTS

    def __post_init__(self):
        self.cells_x = int(self.cells_x)
        self.cells_y = int(self.cells_y)
        self.cell_size = float(self.cell_size)
        self.origin = np.asarray(self.origin, dtype = np.float64).reshape(2)
        self.heights = tuple(float(h) for h in self.heights)
        if self.cells_x <= 0 or self.cells_y <= 0:
            raise DomainError(f'geometry.BevGridSpec: cell counts must be positive (got {self.cells_x}x{self.cells_y})')
        if not self.cell_size > 0:
            raise DomainError(f'geometry.BevGridSpec: cell size must be positive (got {self.cell_size})')
        if len(self.heights) == 0:
            raise DomainError('geometry.BevGridSpec: at least one projection height is required')

    @classmethod
    def from_region(cls, width: float, depth: float, cell_size: float, origin = (0., 0.), heights = DEFAULT_HEIGHTS):
        """
        Grid covering a width x depth (meters) region whose lower-left corner is `origin`.
        A 12 m x 36 m region at 0.025 m gives the 480 x 1440 Wildtrack grid.
        """
        cells_x = int(round(width / cell_size))
        cells_y = int(round(depth / cell_size))
        center0 = np.asarray(origin, dtype = np.float64) + cell_size / 2
        return cls(cells_x, cells_y, cell_size, center0, heights)

    @property
    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """
        World (x, y) of the lower and upper corners of the covered region
        """
        lower = self.origin - self.cell_size / 2
        upper = lower + self.cell_size * np.array([self.cells_x, self.cells_y])
        return lower, upper

    def level_stride(self, level: int) -> int:
        return 2 ** (level - 2)

    def level_shape(self, level: int) -> tuple[int, int]:
        s = self.level_stride(level)
        return (math.ceil(self.cells_x / s), math.ceil(self.cells_y / s))

    def world_to_grid(self, xy) -> np.ndarray:
        """
        Continuous full-resolution cell coordinates (integers at cell centers)
        """
        return (np.asarray(xy, dtype = np.float64) - self.origin) / self.cell_size

    def grid_to_world(self, g) -> np.ndarray:
        return self.origin + np.asarray(g, dtype = np.float64) * self.cell_size

    def world_to_region(self, xy) -> np.ndarray:
        """
        Continuous cell coordinates measured from the lower region corner
            (cell i spans [i, i + 1)); target maps and decoding use these
        """
        return (np.asarray(xy, dtype = np.float64) - self.extent[0]) / self.cell_size

    def region_to_world(self, g) -> np.ndarray:
        return self.extent[0] + np.asarray(g, dtype = np.float64) * self.cell_size

    def contains(self, xy) -> np.ndarray:
        lower, upper = self.extent
        xy = np.asarray(xy, dtype = np.float64)
        return np.all((xy >= lower) & (xy < upper), axis = -1)

    def to_dict(self) -> dict:
        return {
            'cells_x' : self.cells_x,
            'cells_y' : self.cells_y,
            'cell_size' : self.cell_size,
            'origin' : self.origin.tolist(),
            'heights' : list(self.heights),
        }

    @classmethod
    def from_dict(cls, d: dict):
        return cls(d['cells_x'], d['cells_y'], d['cell_size'], d.get('origin', (0., 0.)), d.get('heights', DEFAULT_HEIGHTS))

@dataclass(eq = False)
class SamplingGrid:
    """
    Feature-map coordinates (u, v) of every BEV cell of one level, for one
        view and one projection height. coords[i, j] addresses feature column u
        and row v; cells with valid_mask False contribute nothing.
    """
    level: int
    height_index: int
    coords: np.ndarray
    valid_mask: np.ndarray
    view_id: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid_mask.shape

def _check_level(level, function, minimum = 2):
    if level not in range(minimum, 6):
        raise DomainError(f'geometry.{function}: level must be in [{minimum}, 5] (got {level})')

def cell_to_world(i: int, j: int, level: int, grid: BevGridSpec) -> np.ndarray:
    """
    World (x, y) of the center of BEV cell (i, j) at level-`level` resolution.
    A level-l cell spans 2^(l-2) full-resolution cells per axis; level 2 is
        the full-resolution grid itself.
    """
    _check_level(level, 'cell_to_world')
    nx, ny = grid.level_shape(level)
    if not (0 <= i < nx and 0 <= j < ny):
        raise DomainError(f'geometry.cell_to_world: cell ({i}, {j}) outside level-{level} grid of shape {nx}x{ny}')
    s = grid.level_stride(level)
    return grid.grid_to_world([s * i + (s - 1) / 2, s * j + (s - 1) / 2])

def cell_centers(level: int, grid: BevGridSpec) -> np.ndarray:
    """
    Vectorized cell_to_world: array (X_l, Y_l, 2) of cell-center world coordinates
    """
    _check_level(level, 'cell_centers')
    nx, ny = grid.level_shape(level)
    s = grid.level_stride(level)
    gi = s * np.arange(nx) + (s - 1) / 2
    gj = s * np.arange(ny) + (s - 1) / 2
    gx, gy = np.meshgrid(gi, gj, indexing = 'ij')
    return grid.grid_to_world(np.stack([gx, gy], axis = -1))

def project_world_to_pixel(point, calib: CameraCalibration) -> tuple[np.ndarray, float]:
    """
    Project one world point through K [R|T]; returns (pixel (u, v), depth)
    """
    p = calib.projection_matrix @ np.append(np.asarray(point, dtype = np.float64).reshape(3), 1.)
    if abs(p[2]) < DEGENERATE_DEPTH:
        raise ProjectionError(f'geometry.project_world_to_pixel: point {tuple(point)} lies on the focal plane of view {calib.view_id}')
    return p[:2] / p[2], float(p[2])

def project_points(points, calib: CameraCalibration) -> tuple[np.ndarray, np.ndarray]:
    """
    Vectorized projection of an (..., 3) array of world points.
    Points on the focal plane get NaN pixels instead of raising.
    """
    points = np.asarray(points, dtype = np.float64)
    flat = points.reshape(-1, 3)
    p = calib.projection_matrix @ np.vstack([flat.T, np.ones(len(flat))])
    depth = p[2]
    degenerate = np.abs(depth) < DEGENERATE_DEPTH
    safe = np.where(degenerate, 1., depth)
    pixels = (p[:2] / safe).T
    pixels[degenerate] = np.nan
    return pixels.reshape(points.shape[:-1] + (2,)), depth.reshape(points.shape[:-1])

def unproject_to_height(pixels, calib: CameraCalibration, z: float = 0.) -> np.ndarray:
    """
    Intersect the viewing rays of (..., 2) pixels with the horizontal plane at height z.
    Rays parallel to the plane, or meeting it behind the camera, give NaN.
    """
    pixels = np.asarray(pixels, dtype = np.float64)
    flat = pixels.reshape(-1, 2)
    rays = calib.rotation.T @ np.linalg.solve(calib.intrinsics, np.vstack([flat.T, np.ones(len(flat))]))
    c = calib.center
    with np.errstate(divide = 'ignore', invalid = 'ignore'):
        t = (z - c[2]) / rays[2]
    t[~np.isfinite(t) | (t <= 0)] = np.nan
    world = c[:, None] + rays * t
    return world.T.reshape(pixels.shape[:-1] + (3,))

def feature_extent(calib: CameraCalibration, level: int) -> tuple[int, int]:
    """
    (height, width) of the level-l feature map, ceil strides
    """
    stride = 2 ** level
    return math.ceil(calib.image_height / stride), math.ceil(calib.image_width / stride)

def build_sampling_grid(calib: CameraCalibration, level: int, height_index: int, grid: BevGridSpec,
                        *, shared_bev_resolution: bool = False) -> SamplingGrid:
    """
    Feature coordinates of every level-l BEV cell, for one view and one height.
    The BEV shape per level fixes the projection scale; pixels are divided
        by the image-feature stride 2^l. With `shared_bev_resolution` every
        level samples onto the level-3 BEV shape.
    """
    if level not in LEVELS:
        raise DomainError(f'geometry.build_sampling_grid: level must be one of {LEVELS} (got {level})')
    if not 0 <= height_index < len(grid.heights):
        raise DomainError(f'geometry.build_sampling_grid: height index {height_index} out of range for {len(grid.heights)} heights')
    bev_level = 3 if shared_bev_resolution else level
    centers = cell_centers(bev_level, grid)
    z = np.full(centers.shape[:-1] + (1,), grid.heights[height_index])
    pixels, depth = project_points(np.concatenate([centers, z], axis = -1), calib)
    coords = pixels / (2 ** level)
    h_f, w_f = feature_extent(calib, level)
    finite = np.all(np.isfinite(coords), axis = -1)
    with np.errstate(invalid = 'ignore'):
        valid = (finite & (depth > 0)
                 & (coords[..., 0] >= 0) & (coords[..., 0] <= w_f - 1)
                 & (coords[..., 1] >= 0) & (coords[..., 1] <= h_f - 1))
    coords = np.where(finite[..., None], coords, -1.)
    return SamplingGrid(level = level, height_index = height_index, coords = coords, valid_mask = valid, view_id = calib.view_id)

def grid_bank_key(calibrations: list[CameraCalibration], grid: BevGridSpec, levels = LEVELS, shared_bev_resolution: bool = False) -> str:
    return dict_checksum({
        'version' : GRID_CACHE_VERSION,
        'calibrations' : [c.to_dict() for c in calibrations],
        'grid' : grid.to_dict(),
        'levels' : list(levels),
        'shared' : bool(shared_bev_resolution),
    })

def build_grid_bank(calibrations: list[CameraCalibration], grid: BevGridSpec, levels = LEVELS,
                    *, shared_bev_resolution: bool = False) -> dict:
    """
    Sampling grids for every (view position, level, height index) triple.
    Keys use the position of the view in `calibrations`, not its view_id.
    """
    bank = {}
    for n, calib in enumerate(calibrations):
        for level in levels:
            for h in range(len(grid.heights)):
                bank[(n, level, h)] = build_sampling_grid(calib, level, h, grid, shared_bev_resolution = shared_bev_resolution)
    return bank

def save_grid_bank(bank: dict, path: str | os.PathLike, key: str):
    arrays = {'version' : np.array(GRID_CACHE_VERSION), 'key' : np.array(key)}
    for (n, level, h), g in bank.items():
        arrays[f'coords_{n}_{level}_{h}'] = g.coords.astype(np.float32)
        arrays[f'mask_{n}_{level}_{h}'] = g.valid_mask
        arrays[f'view_{n}_{level}_{h}'] = np.array(g.view_id)
    np.savez_compressed(path, **arrays)

def load_grid_bank(path: str | os.PathLike, key: str) -> dict:
    with np.load(path) as data:
        if int(data['version']) != GRID_CACHE_VERSION or str(data['key']) != key:
            raise LoadError(f'geometry.load_grid_bank: cache {path} does not match the requested calibrations')
        bank = {}
        for name in data.files:
            if not name.startswith('coords_'):
                continue
            n, level, h = (int(v) for v in name.split('_')[1:])
            bank[(n, level, h)] = SamplingGrid(level = level, height_index = h,
                                               coords = data[name].astype(np.float64),
                                               valid_mask = data[f'mask_{n}_{level}_{h}'],
                                               view_id = int(data[f'view_{n}_{level}_{h}']))
    return bank

_MEMORY_CACHE = {}

def cached_grid_bank(calibrations: list[CameraCalibration], grid: BevGridSpec, levels = LEVELS, *,
                     shared_bev_resolution: bool = False, cache_dir: str | os.PathLike = None, silent: bool = True) -> dict:
    """
    build_grid_bank with an in-process cache and an optional on-disk cache
        keyed by a content hash of (calibrations, grid, levels, sharing).
    Callers must treat the returned grids as read-only.
    """
    key = grid_bank_key(calibrations, grid, levels, shared_bev_resolution)
    if key in _MEMORY_CACHE:
        return _MEMORY_CACHE[key]
    path = None if cache_dir is None else os.path.join(cache_dir, f'grids_{key[:16]}.npz')
    if path is not None and os.path.exists(path):
        try:
            bank = load_grid_bank(path, key)
            if not silent:
                print(f'geometry.cached_grid_bank() - loaded sampling grids from {path}')
            _MEMORY_CACHE[key] = bank
            return bank
        except LoadError:
            pass
    if not silent:
        print(f'geometry.cached_grid_bank() - building sampling grids for {len(calibrations)} views')
    bank = build_grid_bank(calibrations, grid, levels, shared_bev_resolution = shared_bev_resolution)
    if path is not None:
        os.makedirs(cache_dir, exist_ok = True)
        save_grid_bank(bank, path, key)
    _MEMORY_CACHE[key] = bank
    return bank

def look_at(camera_center, target, view_id: int, intrinsics, image_height: int, image_width: int) -> CameraCalibration:
    """
    Calibration of a camera at `camera_center` whose optical axis passes
        through `target`, with image rows pointing downward in the world.
    """
    c = np.asarray(camera_center, dtype = np.float64)
    forward = np.asarray(target, dtype = np.float64) - c
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0., 0., 1.])
    if np.linalg.norm(right) < 1e-9:
        raise DomainError('geometry.look_at: optical axis is vertical, camera roll is undefined')
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.vstack([right, down, forward])
    return CameraCalibration(view_id, intrinsics, R, -R @ c, image_height, image_width)

# --- calibration text files ---
# One record per line:
#   view_id=<int> K=<9 reals> R=<9 reals> T=<3 reals> image_size=<H>,<W>
# lists are comma separated, row-major; '#' starts a comment line.

_CALIBRATION_FIELDS = {'view_id' : 1, 'K' : 9, 'R' : 9, 'T' : 3, 'image_size' : 2}

def format_calibration(calib: CameraCalibration) -> str:
    join = lambda values : ','.join(repr(float(v)) for v in values)
    return (f'view_id={calib.view_id} K={join(calib.intrinsics.ravel())} R={join(calib.rotation.ravel())} '
            f'T={join(calib.translation)} image_size={calib.image_height},{calib.image_width}')

def write_calibrations(calibrations: list[CameraCalibration], path: str | os.PathLike):
    with open(path, 'w', encoding = 'utf-8', newline = '\n') as f:
        f.write('# msmvd calibration v1: K [R|T] maps world meters (z up) to pixels\n')
        for calib in calibrations:
            f.write(format_calibration(calib) + '\n')

def read_calibrations(path: str | os.PathLike) -> list[CameraCalibration]:
    if not os.path.exists(path):
        raise LoadError(f'geometry.read_calibrations: calibration file {path} not found')
    calibrations = []
    with open(path, 'r', encoding = 'utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            try:
                record = dict(token.split('=', 1) for token in line.split())
                values = {}
                for name, count in _CALIBRATION_FIELDS.items():
                    values[name] = [float(v) for v in record[name].split(',')]
                    if len(values[name]) != count:
                        raise ValueError(f'field {name} has {len(values[name])} values, expected {count}')
                calibrations.append(CameraCalibration(view_id = int(values['view_id'][0]),
                                                      intrinsics = values['K'],
                                                      rotation = values['R'],
                                                      translation = values['T'],
                                                      image_height = int(values['image_size'][0]),
                                                      image_width = int(values['image_size'][1])))
            except (KeyError, ValueError) as e:
                raise LoadError(f'geometry.read_calibrations: {path}:{lineno}: malformed calibration record ({e})') from e
    if len(calibrations) == 0:
        raise LoadError(f'geometry.read_calibrations: no calibration records in {path}')
    return calibrations
