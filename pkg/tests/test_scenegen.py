import json
import math
import os
import tempfile
import numpy as np
from msmvd.datasets import image_relpath, load_dataset, read_image
from msmvd.geometry import project_points, unproject_to_height
from msmvd.lib.checksums import directory_checksum
from msmvd.lib.errors import ConfigError, GenerationError
from msmvd.lib.runlog import Logger, VoidLogger
from msmvd.scenegen import (LAYOUTS, PEDESTRIAN_HEIGHT, SceneSpec, check_coverage, coverage, generate_dataset,
                            has_occlusion, image_boxes, max_overlap, pedestrian_color, place_cameras,
                            render_view, simulate_walks)
from runner import run_tests, tiny_dataset, tiny_spec

def color_mask(image: np.ndarray, color) -> np.ndarray:
    return np.all(image == np.array(color, dtype = np.uint8), axis = -1)

def test_deterministic_generation():
    spec = tiny_spec()
    a = generate_dataset(spec, os.path.join(tempfile.mkdtemp(), 'a'), silent = True)
    b = generate_dataset(spec, os.path.join(tempfile.mkdtemp(), 'b'), silent = True)
    assert a.checksum == b.checksum
    assert directory_checksum(a.root, exclude = ('manifest.json',)) == a.checksum
    with open(os.path.join(a.root, image_relpath(0, 1)), 'rb') as f1, open(os.path.join(b.root, image_relpath(0, 1)), 'rb') as f2:
        assert f1.read() == f2.read()
    c = generate_dataset(tiny_spec(seed = 4), os.path.join(tempfile.mkdtemp(), 'c'), silent = True)
    assert c.checksum != a.checksum

def test_render_workers_log():
    directory = tempfile.mkdtemp()
    logfile = os.path.join(directory, 'scene.log')
    serial = generate_dataset(tiny_spec(), os.path.join(directory, 'serial'), silent = True)
    pooled = generate_dataset(tiny_spec(), os.path.join(directory, 'pooled'), nproc = 2, logger = Logger(logfile = logfile), silent = True)
    assert pooled.checksum == serial.checksum
    with open(logfile) as f:
        lines = f.read().splitlines()
    assert all(line.startswith('[[') for line in lines)
    assert lines[0].startswith('[[LOGPARENT]]') and 'Generating 4 frames' in lines[0]
    rendered = [line for line in lines if 'Rendered frame' in line]
    assert len(rendered) == 4
    workers = {line[2:line.index(']]')] for line in rendered}
    assert 'LOGPARENT' not in workers and str(os.getpid()) not in workers
    assert sum('Spawned sublogger' in line for line in lines) == 4
    assert 'Wrote manifest' in lines[-1]
    void = generate_dataset(tiny_spec(), os.path.join(directory, 'void'), logger = VoidLogger(), silent = True)
    assert void.checksum == serial.checksum

def test_pedestrian_count():
    root = tiny_dataset(n_pedestrians_range = (5, 5))
    calibrations, grid, index = load_dataset(root, silent = True)
    assert len(calibrations) == 4 and len(index) == 4
    for frame_id in index.frame_ids:
        df = index.annotations(frame_id)
        assert len(df) == 5
        assert df.pedestrian_id.is_unique
        assert np.all(grid.contains(df[['world_x', 'world_y']].to_numpy()))

def test_splits():
    calibrations, grid, index = load_dataset(tiny_dataset(), silent = True)
    assert index.splits == {'train' : [0, 1, 2], 'val' : [3]}
    assert len(index.split('val')) == 1
    frame = index.load(0)
    assert frame.image_size == (64, 96) and len(frame.images) == 4

def test_ring_layout():
    calibrations = place_cameras(SceneSpec())
    assert len(calibrations) == 4
    yaws = []
    for calib in calibrations:
        R = calib.rotation
        assert np.allclose(R @ R.T, np.eye(3), atol = 1e-9) and math.isclose(np.linalg.det(R), 1., abs_tol = 1e-9)
        forward = R[2]
        yaws.append(math.degrees(math.atan2(forward[1], forward[0])))
    for a, b in zip(yaws, yaws[1:] + yaws[:1]):
        assert math.isclose((b - a) % 360, 90., abs_tol = 1e-6)

def test_coverage_all_layouts():
    for layout in LAYOUTS:
        spec = SceneSpec(camera_layout = layout, n_cameras = 5)
        calibrations = place_cameras(spec)
        assert len(calibrations) == 5
        fraction, _ = coverage(calibrations, spec.grid)
        assert fraction >= 0.99, f'{layout}: {fraction}'
        assert check_coverage(calibrations, spec.grid) == fraction

def test_coverage_failure_names_region():
    spec = SceneSpec()
    calibrations = place_cameras(spec)
    wide = SceneSpec(region = (40., 40.)).grid
    try:
        check_coverage(calibrations, wide)
    except GenerationError as e:
        assert 'uncovered cells span' in str(e)
    else:
        assert False, 'expected GenerationError'

def test_apparent_height_ratio():
    spec = SceneSpec()
    calib = place_cameras(spec)[0]
    y = spec.region[1] / 2
    heights = []
    for x in (spec.region[0] - 0.2, 0.2):
        pixels, _ = project_points(np.array([[x, y, 0.], [x, y, PEDESTRIAN_HEIGHT]]), calib)
        heights.append(abs(pixels[0, 1] - pixels[1, 1]))
    assert heights[0] / heights[1] >= 5.

def test_footprint_consistency():
    spec = tiny_spec(camera_height = 3.0, image_size = (240, 320))
    calibrations = place_cameras(spec)
    xy = np.array([spec.region[0] / 2, spec.region[1] / 2])
    color = pedestrian_color(7)
    estimates = []
    for calib in calibrations:
        image = render_view(calib, spec, [7], [xy])
        v, u = np.nonzero(color_mask(image, color))
        assert len(u) > 0
        centroid = np.array([u.mean(), v.mean()])
        estimate = unproject_to_height(centroid, calib, PEDESTRIAN_HEIGHT / 2)[:2]
        assert np.linalg.norm(estimate - xy) <= 0.35
        estimates.append(estimate)
    assert np.linalg.norm(np.mean(estimates, axis = 0) - xy) <= 2 * spec.cell_size

def test_render_matches_projection():
    spec = tiny_spec(image_size = (240, 320))
    calib = place_cameras(spec)[1]
    xy = np.array([[1.3, 2.6]])
    image = render_view(calib, spec, [3], xy)
    v, u = np.nonzero(color_mask(image, pedestrian_color(3)))
    box = image_boxes(xy, calib)[0]
    assert abs(u.min() - box[0]) <= 1.5 and abs(u.max() - box[2]) <= 1.5
    assert abs(v.min() - box[1]) <= 1.5 and abs(v.max() - box[3]) <= 1.5
    # everything else stays grey
    rest = image[~color_mask(image, pedestrian_color(3))].astype(int)
    assert np.all(rest[:, 0] == rest[:, 1]) and np.all(rest[:, 1] == rest[:, 2])

def test_rendered_annotations():
    root = tiny_dataset()
    calibrations, grid, index = load_dataset(root, silent = True)
    frame = index.load(2)
    df = frame.annotations
    spec = tiny_spec()
    for view, calib in enumerate(calibrations):
        stored = np.round(read_image(os.path.join(root, image_relpath(calib.view_id, 2))).transpose(1, 2, 0) * 255).astype(np.uint8)
        expected = render_view(calib, spec, df.pedestrian_id.to_numpy(), df[['world_x', 'world_y']].to_numpy())
        assert np.array_equal(stored, expected)

def test_occlusion_detection():
    spec = SceneSpec()
    calibrations = place_cameras(spec)
    calib = calibrations[0]
    # two pedestrians one behind the other along the view-0 optical axis
    y = spec.region[1] / 2
    positions = np.array([[6., y], [5., y]])
    assert max_overlap(image_boxes(positions, calib)) >= 0.5
    assert has_occlusion([(np.array([0, 1]), positions)], calibrations)
    apart = np.array([[6., 1.], [6., 7.]])
    assert not has_occlusion([(np.array([0, 1]), apart)], [calib])

def test_walks_keep_separation():
    spec = SceneSpec(n_pedestrians_range = (8, 8), n_frames = 30)
    frames = simulate_walks(spec, np.random.default_rng(0))
    assert len(frames) == 30
    for ids, positions in frames:
        assert len(ids) == 8
        d = np.linalg.norm(positions[:, None] - positions[None], axis = -1)
        d[np.diag_indices(8)] = np.inf
        assert d.min() >= spec.min_separation - 1e-3
        assert np.all(positions >= 0.) and np.all(positions <= np.array(spec.region))

def test_invalid_spec():
    for changes in (dict(camera_layout = 'circle'), dict(n_cameras = 1), dict(n_pedestrians_range = (4, 2)),
                    dict(val_fraction = 1.), dict(image_size = (16, 16))):
        try:
            generate_dataset(tiny_spec(**changes), tempfile.mkdtemp(), silent = True)
        except ConfigError as e:
            field_name = next(iter(changes))
            assert field_name in str(e)
        else:
            assert False, f'expected ConfigError for {changes}'

def test_spec_json():
    path = os.path.join(tempfile.mkdtemp(), 'spec.json')
    spec = tiny_spec(camera_layout = 'two_sided')
    with open(path, 'w') as f:
        json.dump(spec.to_dict(), f)
    assert SceneSpec.from_json(path) == spec
    with open(path, 'w') as f:
        f.write('{"region": [4, 4], "colour": 1}')
    try:
        SceneSpec.from_json(path)
    except ConfigError as e:
        assert 'colour' in str(e)
    else:
        assert False, 'expected ConfigError'

TESTS = {
    'deterministic generation' : test_deterministic_generation,
    'render workers log' : test_render_workers_log,
    'pedestrian count' : test_pedestrian_count,
    'splits' : test_splits,
    'ring layout' : test_ring_layout,
    'coverage of every layout' : test_coverage_all_layouts,
    'coverage failure' : test_coverage_failure_names_region,
    'apparent height ratio' : test_apparent_height_ratio,
    'footprint consistency' : test_footprint_consistency,
    'render matches projection' : test_render_matches_projection,
    'rendered annotations' : test_rendered_annotations,
    'occlusion detection' : test_occlusion_detection,
    'walks keep separation' : test_walks_keep_separation,
    'invalid spec' : test_invalid_spec,
    'spec json' : test_spec_json,
}

if __name__ == '__main__':
    run_tests(TESTS)
