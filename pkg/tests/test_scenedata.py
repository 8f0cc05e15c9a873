import json
import math
import time

import numpy as np
import pytest

from ptlane import warp as W
from ptlane.errors import DegenerateGeometry, LengthMismatch, MalformedRecord
from ptlane.geometry import build_ptl_chain
from ptlane.scenedata import (
    ABSENT,
    LANE_LINE,
    STOP_LINE,
    SceneConfig,
    TuSimpleRecord,
    generate_dataset,
    ground_to_pixel,
    load_dataset,
    read_mask,
    read_manifest,
    read_tusimple,
    render_scene,
    row_ground_distance,
    save_png,
    scene_keypoints,
    write_tusimple,
)


def back_project(cfg, u, v):
    """Closed-form ray/ground intersection; returns lateral and forward ground coordinates."""
    cx, cy = cfg.principal_point
    a, b = (u - cx) / cfg.f, (v - cy) / cfg.f
    t = cfg.camera_height / (math.cos(cfg.pitch) * b + math.sin(cfg.pitch))
    return t * a, t * (math.cos(cfg.pitch) - math.sin(cfg.pitch) * b)


def test_lane_pixels_back_project_onto_lane_curves():
    cfg = SceneConfig(width=512, height=512, f=480, lane_count=2, noise=0.0)
    s = render_scene(cfg)
    z = row_ground_distance(cfg, np.arange(cfg.height))
    checked = 0
    for k, x0 in enumerate(cfg.lane_offsets()):
        for r in range(cfg.height):
            if not cfg.near <= z[r] <= 15:
                continue
            cols = np.nonzero(s.instance[r] == k + 1)[0]
            # rows where the marking leaves the frame have a clipped centroid
            if len(cols) == 0 or cols.min() == 0 or cols.max() == cfg.width - 1:
                continue
            x, _ = back_project(cfg, cols.mean(), r)
            assert abs(x - x0) <= 0.02
            checked += 1
    assert checked > 100


def test_horizon_row_matches_far_point_projection():
    for pitch in (0.05, 0.2, 0.6):
        cfg = SceneConfig(pitch=pitch)
        far = ground_to_pixel(cfg, [0.0], [1e6])[0, 1]
        assert abs(cfg.horizon_row - far) <= 0.5
        # the complementary-angle form of the same relation
        cx, cy = cfg.principal_point
        assert math.isclose(cfg.horizon_row, cy - cfg.f / math.tan(math.pi / 2 - pitch))


def test_rendering_is_deterministic():
    a, b = render_scene(SceneConfig(seed=5)), render_scene(SceneConfig(seed=5))
    for field in ("image", "semantic", "instance"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.lanes == b.lanes
    c = render_scene(SceneConfig(seed=6))
    assert not np.array_equal(a.image, c.image)


def test_annotations_lie_on_their_lane_masks():
    for seed in range(10):
        cfg = SceneConfig(seed=seed, curvature=(seed - 5) * 3e-4, dash=(3.0, 4.0),
                          h_sample_start=0.34, h_sample_step=4)
        s = render_scene(cfg)
        for k, xs in enumerate(s.lanes):
            for row, x in zip(s.h_samples, xs):
                if x == ABSENT:
                    continue
                window = s.instance[row, max(x - 1, 0):x + 2]
                assert np.any(window == k + 1)
                assert np.any(s.semantic[row, max(x - 1, 0):x + 2] == LANE_LINE)


def test_h_samples_default():
    cfg = SceneConfig()
    assert cfg.h_samples() == list(range(52, 128, 8))


def test_stop_line_rendered():
    s = render_scene(SceneConfig(markings=("lines", "stop_line", "arrow")))
    assert np.any(s.semantic == STOP_LINE)


def test_no_visible_lane_raises():
    with pytest.raises(DegenerateGeometry):
        render_scene(SceneConfig(lane_count=1, lateral_offset=500.0))


def test_invalid_config():
    with pytest.raises(ValueError):
        SceneConfig(pitch=0.0)
    with pytest.raises(ValueError):
        SceneConfig(camera_height=-1)
    with pytest.raises(ValueError):
        SceneConfig(lane_count=0)


def test_bev_lane_width_is_constant():
    cfg = SceneConfig(width=256, height=256, f=240, noise=0.0, lane_count=4)
    s = render_scene(cfg)
    chain = build_ptl_chain(cfg.intrinsics, cfg.view, cfg.horizon, scene_keypoints(cfg), 1,
                            [cfg.width])
    h = chain.integral
    masks = np.stack([(s.instance == k + 1).astype(float) for k in range(cfg.lane_count)])
    bev = W.warp_forward(masks, h) >= 0.5
    # footprint of the camera frame; lanes clipped by it are not measured.
    # Beyond ~12 m a 0.3 m line spans only a couple of source pixels.
    inside = W.warp_forward(np.ones((1, cfg.height, cfg.width)), h)[0] >= 1 - 1e-9
    rows = []
    for r in range(h.target.height):
        pts = h.inverse().transfer([[h.target.width / 2, r]])
        z = row_ground_distance(cfg, [pts[0, 1]])[0]
        if 4.0 <= z <= 12.0:
            rows.append(r)
    assert len(rows) > 20
    measured = 0
    for k in range(cfg.lane_count):
        widths = []
        for r in rows:
            cols = np.nonzero(bev[k, r])[0]
            if len(cols) and inside[r, max(cols.min() - 3, 0):cols.max() + 4].all():
                widths.append(len(cols))
        if len(widths) < 10:
            continue
        measured += 1
        assert max(widths) - min(widths) <= 2, (k, min(widths), max(widths))
    assert measured >= 2


def test_true_integral_makes_lanes_parallel():
    cfg = SceneConfig()
    s = render_scene(cfg)
    zs = np.linspace(5, 30, 11)
    for x0 in cfg.lane_offsets():
        bev = s.integral.transfer(ground_to_pixel(cfg, np.full_like(zs, x0), zs))
        assert np.ptp(bev[:, 0]) <= 1.0


# ------------------------------------------------------------------ dataset


def test_empty_dataset(tmp_path):
    generate_dataset(SceneConfig(), 0, 0, tmp_path)
    assert read_manifest(tmp_path / "manifest.txt")["count"] == 0
    assert len(load_dataset(tmp_path)) == 0


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(SceneConfig(), 5, 3, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == 5
    for a, b in zip(ds.items, back.items):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.semantic, b.semantic)
        assert np.array_equal(a.instance, b.instance)
        assert a.record.lanes == b.record.lanes and a.record.h_samples == b.record.h_samples
    assert back.template == SceneConfig()


def test_dataset_is_seeded(tmp_path):
    a = generate_dataset(SceneConfig(), 3, 9, tmp_path / "a")
    b = generate_dataset(SceneConfig(), 3, 9, tmp_path / "b")
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.image, y.image)
    for name in ("labels.json", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.slow
def test_200_scenes_under_a_minute(tmp_path):
    start = time.perf_counter()
    generate_dataset(SceneConfig(), 200, 0, tmp_path)
    assert time.perf_counter() - start < 60


# ------------------------------------------------------------------ TuSimple I/O


def test_hand_written_record(tmp_path):
    path = tmp_path / "l.json"
    path.write_text('{"lanes": [[-2, 10, 12]], "h_samples": [160, 170, 180], '
                    '"raw_file": "clips/0001/20.jpg"}\n')
    (rec,) = read_tusimple(path)
    assert rec.lanes == [[-2, 10, 12]]
    assert rec.h_samples == [160, 170, 180]
    assert rec.raw_file == "clips/0001/20.jpg"


def test_round_trip_keeps_absent_markers(tmp_path):
    recs = [TuSimpleRecord([[-2, -2, 5], [1, 2, -2]], [10, 20, 30], "a.png"),
            TuSimpleRecord([], [10, 20, 30], "b.png")]
    write_tusimple(recs, tmp_path / "x.json")
    back = read_tusimple(tmp_path / "x.json")
    assert [r.lanes for r in back] == [r.lanes for r in recs]
    write_tusimple(back, tmp_path / "y.json")
    assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()


def test_extra_fields_survive(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"lanes": [[1]], "h_samples": [5], "raw_file": "r",
                                "run_time": 12}) + "\n")
    (rec,) = read_tusimple(path)
    assert json.loads(rec.to_json())["run_time"] == 12


@pytest.mark.parametrize("text,exc,line", [
    ('{"lanes": [[1, 2]], "h_samples": [1], "raw_file": "a"}', LengthMismatch, 1),
    ('{"lanes": [[1]], "h_samples": [1], "raw_file": "a"}\nnot json', MalformedRecord, 2),
    ('{"lanes": [[1]], "raw_file": "a"}', MalformedRecord, 1),
])
def test_malformed_records(tmp_path, text, exc, line):
    path = tmp_path / "bad.json"
    path.write_text(text + "\n")
    with pytest.raises(exc) as info:
        read_tusimple(path)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}")


def test_mask_reader_with_class_map(tmp_path):
    mask = np.array([[0, 7], [9, 7]], dtype=np.uint8)
    save_png(tmp_path / "m.png", mask)
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)
    mapped = read_mask(tmp_path / "m.png", {0: 0, 7: 1})
    assert np.array_equal(mapped, [[0, 1], [255, 1]])
