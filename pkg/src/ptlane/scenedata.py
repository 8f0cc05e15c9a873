"""Synthetic road scenes with exact ground truth, and TuSimple-format annotation I/O.

The camera sits ``camera_height`` metres above a flat road, pitched down by
``pitch`` radians below the horizontal, with zero roll.  Lane markings are
quadratic curves ``x(z) = x0 + curvature * z**2`` in ground coordinates
(``x`` lateral, ``z`` forward).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateGeometry, LengthMismatch, MalformedRecord
from .geometry import (
    CameraIntrinsics,
    GroundPlane,
    Homography,
    ViewSpec,
    build_ptl_chain,
)

ABSENT = -2

BACKGROUND, LANE_LINE, STOP_LINE, ARROW = 0, 1, 2, 3
CLASS_NAMES = ("background", "lane_line", "stop_line", "arrow")

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneConfig:
    width: int = 128
    height: int = 128
    f: float = 120.0
    cx: float | None = None
    cy: float | None = None
    camera_height: float = 1.5
    pitch: float = 0.2
    lane_count: int = 4
    lane_spacing: float = 3.6
    lateral_offset: float = 0.0
    line_width: float = 0.3
    dash: tuple | None = None
    dash_phase: float = 0.0
    curvature: float = 0.0
    markings: tuple = ("lines",)
    stop_line_distance: float = 10.0
    arrow_distance: float = 6.0
    near: float = 1.0
    far: float = 60.0
    keypoint_far: float = 35.0
    keypoint_half_width: float = 7.0
    noise: float = 0.02
    h_sample_start: float = 0.4
    h_sample_step: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.camera_height > 0:
            raise ValueError("camera height must be positive")
        if not 0 < self.pitch < math.pi / 2:
            raise ValueError("pitch must lie in (0, pi/2)")
        if self.lane_count < 1:
            raise ValueError("need at least one lane")
        if self.dash is not None:
            object.__setattr__(self, "dash", tuple(float(v) for v in self.dash))
        object.__setattr__(self, "markings", tuple(self.markings))

    @property
    def principal_point(self) -> tuple[float, float]:
        cx = (self.width - 1) / 2 if self.cx is None else self.cx
        cy = (self.height - 1) / 2 if self.cy is None else self.cy
        return cx, cy

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.f, *self.principal_point)

    @property
    def view(self) -> ViewSpec:
        return ViewSpec(self.intrinsics, self.width, self.height)

    @property
    def plane(self) -> GroundPlane:
        return GroundPlane((0.0, math.cos(self.pitch), math.sin(self.pitch)), self.camera_height)

    @property
    def forward(self) -> np.ndarray:
        """Ground-forward direction in camera coordinates."""
        return np.array([0.0, -math.sin(self.pitch), math.cos(self.pitch)])

    @property
    def horizon_row(self) -> float:
        return self.principal_point[1] - self.f * math.tan(self.pitch)

    @property
    def horizon(self) -> tuple:
        v = self.horizon_row
        return ((0.0, v), (float(self.width - 1), v))

    def h_samples(self) -> list[int]:
        start = int(math.ceil(self.h_sample_start * self.height))
        return list(range(start, self.height, self.h_sample_step))

    def lane_offsets(self) -> np.ndarray:
        k = np.arange(self.lane_count) - (self.lane_count - 1) / 2
        return k * self.lane_spacing + self.lateral_offset

    def to_dict(self) -> dict:
        d = asdict(self)
        d["markings"] = list(self.markings)
        d["dash"] = None if self.dash is None else list(self.dash)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if d.get("dash") is not None:
            d["dash"] = tuple(d["dash"])
        if "markings" in d:
            d["markings"] = tuple(d["markings"])
        return cls(**d)


@dataclass
class SceneSample:
    image: np.ndarray              # 3 x H x W in [0, 1], multiples of 1/255
    semantic: np.ndarray           # H x W uint8 class ids
    instance: np.ndarray           # H x W uint8, 0 = background
    lanes: list                    # per lane, x per h_sample or ABSENT
    h_samples: list
    horizon: tuple
    integral: Homography
    config: SceneConfig
    keypoints: np.ndarray = field(repr=False, default=None)
    raw_file: str = ""


def row_ground_distance(cfg: SceneConfig, rows) -> np.ndarray:
    """Forward ground distance (m) seen by each image row; ``inf`` at or above the horizon."""
    _, cy = cfg.principal_point
    b = (np.asarray(rows, dtype=np.float64) - cy) / cfg.f
    denom = math.cos(cfg.pitch) * b + math.sin(cfg.pitch)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0, cfg.camera_height / denom, np.inf)
        z = t * (math.cos(cfg.pitch) - math.sin(cfg.pitch) * b)
    return np.where(denom > 0, z, np.inf)


def ground_to_pixel(cfg: SceneConfig, x, z) -> np.ndarray:
    """Project ground points (lateral ``x``, forward ``z``) to pixels, shape ``(n, 2)``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    pts = (x[:, None] * np.array([1.0, 0.0, 0.0]) + z[:, None] * cfg.forward
           + cfg.camera_height * cfg.plane.normal)
    pix = pts @ cfg.intrinsics.matrix.T
    return pix[:, :2] / pix[:, 2:3]


def scene_keypoints(cfg: SceneConfig) -> np.ndarray:
    """Ground-region border points in the front view, clipped to the image."""
    W, H = cfg.width, cfg.height
    far_row = ground_to_pixel(cfg, [0.0], [cfg.keypoint_far])[0, 1]
    if far_row <= cfg.horizon_row or far_row >= H - 1:
        raise DegenerateGeometry("key-point far distance is not visible")
    xs = ground_to_pixel(cfg, [-cfg.keypoint_half_width, cfg.keypoint_half_width],
                         [cfg.keypoint_far] * 2)[:, 0]
    left, right = max(0.0, xs[0]), min(W - 1.0, xs[1])
    return np.array([[0.0, H - 1.0, 1.0], [W - 1.0, H - 1.0, 1.0],
                     [right, far_row, 1.0], [left, far_row, 1.0]])


def true_integral_homography(cfg: SceneConfig, width: int | None = None) -> Homography:
    chain = build_ptl_chain(cfg.intrinsics, cfg.view, cfg.horizon, scene_keypoints(cfg), 1,
                            [width or cfg.width])
    return chain.integral


def _dash_on(cfg: SceneConfig, z):
    if cfg.dash is None:
        return np.ones(np.shape(z), dtype=bool)
    on, off = cfg.dash
    return np.mod(z + cfg.dash_phase, on + off) < on


def _ground_samples(cfg: SceneConfig):
    """Ground coordinates of a supersampled pixel grid (``nan`` above the horizon)."""
    ss = _SUPERSAMPLE
    cx, cy = cfg.principal_point
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    us = (np.arange(cfg.width)[:, None] + offs[None, :]).ravel()
    vs = (np.arange(cfg.height)[:, None] + offs[None, :]).ravel()
    a = (us - cx) / cfg.f
    b = (vs - cy) / cfg.f
    denom = math.cos(cfg.pitch) * b + math.sin(cfg.pitch)
    with np.errstate(divide="ignore"):
        t = np.where(denom > 1e-9, cfg.camera_height / denom, np.nan)
    z = t * (math.cos(cfg.pitch) - math.sin(cfg.pitch) * b)
    x = t[:, None] * a[None, :]
    return x, np.broadcast_to(z[:, None], x.shape)


def _coverage(mask_hi: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    ss = _SUPERSAMPLE
    return mask_hi.reshape(cfg.height, ss, cfg.width, ss).mean(axis=(1, 3))


def _arrow_mask(x, z, x0, z0):
    """Straight-ahead arrow: 2 m shaft, 1 m head, pointing away from the camera."""
    shaft = (np.abs(x - x0) < 0.09) & (z >= z0) & (z < z0 + 2.0)
    dz = z - (z0 + 2.0)
    head = (dz >= 0) & (dz < 1.0) & (np.abs(x - x0) < 0.35 * (1.0 - dz))
    return shaft | head


def render_scene(cfg: SceneConfig) -> SceneSample:
    """Render one scene; deterministic in ``cfg`` (including ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed)
    gx, gz = _ground_samples(cfg)
    ground = np.isfinite(gz)
    in_range = ground & (gz >= cfg.near) & (gz <= cfg.far)
    half = cfg.line_width / 2

    lane_cov = []
    for k, x0 in enumerate(cfg.lane_offsets()):
        centre = x0 + cfg.curvature * gz ** 2
        hit = in_range & (np.abs(gx - centre) < half)
        # outermost lines stay solid
        if 0 < k < cfg.lane_count - 1:
            hit &= _dash_on(cfg, gz)
        lane_cov.append(_coverage(hit, cfg))
    lane_cov = np.stack(lane_cov)

    extra = {}
    ego = cfg.lateral_offset
    if "stop_line" in cfg.markings:
        zs = cfg.stop_line_distance
        hit = in_range & (gz >= zs) & (gz < zs + 0.6) & (np.abs(gx - ego) < cfg.lane_spacing / 2)
        extra[STOP_LINE] = _coverage(hit, cfg)
    if "arrow" in cfg.markings:
        hit = in_range & _arrow_mask(gx, gz, ego, cfg.arrow_distance)
        extra[ARROW] = _coverage(hit, cfg)

    H, W = cfg.height, cfg.width
    rows = np.arange(H)[:, None] * np.ones((1, W))
    above = ~np.isfinite(row_ground_distance(cfg, rows))
    # road: flat grey with mild low-frequency variation
    shade = 0.32 + 0.04 * np.sin(np.arange(W) / 9.0 + rng.uniform(0, 6.28))[None, :]
    road = np.broadcast_to(shade, (H, W))
    sky = np.stack([np.full((H, W), 0.55), np.full((H, W), 0.65), np.full((H, W), 0.80)])
    image = np.where(above[None], sky, np.stack([road, road, road * 1.02]))

    paint_cov = lane_cov.sum(axis=0)
    for cov in extra.values():
        paint_cov = paint_cov + cov
    paint_cov = np.clip(paint_cov, 0.0, 1.0)
    paint = np.array([0.92, 0.92, 0.90])[:, None, None]
    image = image * (1.0 - paint_cov) + paint * paint_cov
    if cfg.noise > 0:
        image = image + rng.normal(scale=cfg.noise, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    semantic = np.zeros((H, W), dtype=np.uint8)
    instance = np.zeros((H, W), dtype=np.uint8)
    best_lane = lane_cov.argmax(axis=0)
    best_cov = lane_cov.max(axis=0)
    lane_px = best_cov >= 0.5
    semantic[lane_px] = LANE_LINE
    instance[lane_px] = best_lane[lane_px] + 1
    for cls, cov in extra.items():
        px = (cov >= 0.5) & (cov > best_cov)
        semantic[px] = cls
        instance[px] = 0

    if not lane_px.any():
        raise DegenerateGeometry("no lane marking is visible")
    h_samples = cfg.h_samples()
    lanes = _annotate_lanes(cfg, h_samples, instance)

    return SceneSample(
        image=image,
        semantic=semantic,
        instance=instance,
        lanes=lanes,
        h_samples=h_samples,
        horizon=cfg.horizon,
        integral=true_integral_homography(cfg),
        config=cfg,
        keypoints=scene_keypoints(cfg),
    )


def _annotate_lanes(cfg: SceneConfig, h_samples, instance) -> list:
    cx, _ = cfg.principal_point
    z = row_ground_distance(cfg, h_samples)
    lanes = []
    for k, x0 in enumerate(cfg.lane_offsets()):
        xs = []
        for row, zr in zip(h_samples, z):
            if not (cfg.near <= zr <= cfg.far):
                xs.append(ABSENT)
                continue
            lateral = x0 + cfg.curvature * zr ** 2
            u = ground_to_pixel(cfg, [lateral], [zr])[0, 0]
            col = int(round(u))
            lo, hi = max(col - 1, 0), min(col + 2, cfg.width)
            if lo >= hi or not np.any(instance[row, lo:hi] == k + 1):
                xs.append(ABSENT)
            else:
                xs.append(col)
        lanes.append(xs)
    return lanes


def randomized_config(template: SceneConfig, seed: int, index: int) -> SceneConfig:
    """Per-sample variation drawn from a generator seeded by ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    dash = None
    if rng.uniform() < 0.5:
        dash = (float(rng.uniform(2.0, 4.0)), float(rng.uniform(3.0, 6.0)))
    return replace(
        template,
        lateral_offset=float(rng.uniform(-0.8, 0.8)),
        curvature=float(rng.uniform(-1.5e-3, 1.5e-3)),
        lane_spacing=float(template.lane_spacing * rng.uniform(0.9, 1.1)),
        dash=dash,
        dash_phase=float(rng.uniform(0.0, 10.0)),
        seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


# --------------------------------------------------------------------------- I/O


@dataclass
class TuSimpleRecord:
    lanes: list
    h_samples: list
    raw_file: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {"lanes": self.lanes, "h_samples": self.h_samples, "raw_file": self.raw_file}
        obj.update(self.extra)
        return json.dumps(obj)


def _parse_record(line: str, lineno: int) -> TuSimpleRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise MalformedRecord("record is not an object", lineno)
    for key in ("lanes", "h_samples", "raw_file"):
        if key not in obj:
            raise MalformedRecord(f"missing field {key!r}", lineno)
    lanes, h_samples = obj.pop("lanes"), obj.pop("h_samples")
    raw_file = obj.pop("raw_file")
    if not isinstance(lanes, list) or not all(isinstance(l, list) for l in lanes):
        raise MalformedRecord("'lanes' must be a list of lists", lineno)
    if not isinstance(h_samples, list):
        raise MalformedRecord("'h_samples' must be a list", lineno)
    for i, lane in enumerate(lanes):
        if len(lane) != len(h_samples):
            raise LengthMismatch(f"lane {i} has {len(lane)} entries, h_samples has "
                                 f"{len(h_samples)}", lineno)
    return TuSimpleRecord(lanes, h_samples, raw_file, obj)


def read_tusimple(path) -> list[TuSimpleRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(_parse_record(line, lineno))
    return records


def write_tusimple(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def save_png(path, array):
    """Write a ``3 x H x W`` float image in [0, 1] or an ``H x W`` uint8 mask."""
    array = np.asarray(array)
    if array.ndim == 3:
        data = np.round(np.clip(array, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(data, mode="RGB").save(path)
    else:
        Image.fromarray(array.astype(np.uint8), mode="L").save(path)


def load_image(path) -> np.ndarray:
    data = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return data.transpose(2, 0, 1) / 255.0


def read_mask(path, class_map: dict | None = None, ignore_index: int = 255) -> np.ndarray:
    """Single-channel id mask; ``class_map`` relabels raw ids (unmapped -> ignore)."""
    raw = np.asarray(Image.open(path))
    if raw.ndim != 2:
        raise MalformedRecord(f"{path}: expected a single-channel mask")
    if class_map is None:
        return raw.astype(np.uint8)
    lut = np.full(256, ignore_index, dtype=np.uint8)
    for src, dst in class_map.items():
        lut[int(src)] = int(dst)
    return lut[raw]


def write_manifest(path, entries: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {json.dumps(value, sort_keys=True)}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = json.loads(value.strip())
    return out


@dataclass
class DatasetItem:
    image: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    record: TuSimpleRecord


@dataclass
class Dataset:
    root: Path
    manifest: dict
    items: list

    @property
    def template(self) -> SceneConfig:
        return SceneConfig.from_dict(self.manifest["template"])

    def __len__(self):
        return len(self.items)


def generate_dataset(template: SceneConfig, count: int, seed: int, root) -> Dataset:
    """Render ``count`` scenes and write images, masks, annotations and a manifest."""
    root = Path(root)
    for sub in ("images", "semantic", "instance"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records, items = [], []
    for i in range(count):
        sample = render_scene(randomized_config(template, seed, i))
        name = f"{i:06d}.png"
        save_png(root / "images" / name, sample.image)
        save_png(root / "semantic" / name, sample.semantic)
        save_png(root / "instance" / name, sample.instance)
        rec = TuSimpleRecord(sample.lanes, sample.h_samples, f"images/{name}")
        records.append(rec)
        items.append(DatasetItem(sample.image, sample.semantic, sample.instance, rec))
    write_tusimple(records, root / "labels.json")
    manifest = {
        "format": "ptlane-synth/1",
        "count": count,
        "seed": seed,
        "template": template.to_dict(),
        "horizon": [list(p) for p in template.horizon],
        "classes": list(CLASS_NAMES),
    }
    write_manifest(root / "manifest.txt", manifest)
    return Dataset(root, manifest, items)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root / "manifest.txt")
    label_path = root / "labels.json"
    records = read_tusimple(label_path) if label_path.exists() else []
    items = []
    for rec in records:
        name = os.path.basename(rec.raw_file)
        items.append(DatasetItem(
            load_image(root / rec.raw_file),
            read_mask(root / "semantic" / name),
            read_mask(root / "instance" / name),
            rec,
        ))
    return Dataset(root, manifest, items)
