"""Run configuration: a sectioned INI file with typed, validated keys.

Values are JSON where that parses (numbers, lists, ``true``, ``null``) and
plain strings otherwise.  Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

AUTO = "auto"


@dataclass
class CameraSection:
    width: int = 128
    height: int = 128
    f: float = 120.0
    cx: float | None = None
    cy: float | None = None
    camera_height: float = 1.5
    pitch: float = 0.2
    # two horizon pixels "x1 y1 x2 y2", or "auto" to derive from pitch; no default
    horizon: object = None


@dataclass
class ChainSection:
    steps: int = 3
    widths: list | None = None
    # front-view border points [[x, y], ...]; default: the synthetic road quad
    keypoints: list | None = None
    keypoint_far: float = 35.0
    keypoint_half_width: float = 7.0


@dataclass
class NetworkSection:
    depth: int = 3
    base_channels: int = 16
    max_channels: int = 64
    embedding_dims: int = 4
    instance_head: bool = True
    instance_weight: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 3.0
    class_weights: list | None = field(default_factory=lambda: [1.0, 3.0, 3.0, 3.0])


@dataclass
class DataSection:
    root: str = "data/synth"
    count: int = 200
    train_count: int = 160
    seed: int = 0
    markings: list = field(default_factory=lambda: ["lines", "stop_line", "arrow"])
    lane_count: int = 4
    line_width: float = 0.3
    noise: float = 0.02
    # annotated rows: reach ~38 m so the far distance bins are populated
    h_sample_start: float = 0.34
    h_sample_step: int = 4


@dataclass
class TrainSection:
    steps: int = 1000
    batch: int = 2
    lr: float = 2e-3
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    seed: int = 0
    ptl: bool = True
    log_every: int = 1


@dataclass
class EvalSection:
    threshold: float = 20.0
    lane_match_ratio: float = 0.85
    bins_px: list | None = None
    bins_m: list | None = None
    under_horizon: bool = False
    min_cluster: int = 10


@dataclass
class RunSection:
    output_dir: str = "runs"


SECTIONS = {
    "camera": CameraSection,
    "chain": ChainSection,
    "network": NetworkSection,
    "data": DataSection,
    "train": TrainSection,
    "eval": EvalSection,
    "run": RunSection,
}


@dataclass
class RunConfig:
    camera: CameraSection = field(default_factory=CameraSection)
    chain: ChainSection = field(default_factory=ChainSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    # ------------------------------------------------------------------ io
    def to_dict(self) -> dict:
        return {name: {f.name: getattr(getattr(self, name), f.name)
                       for f in fields(SECTIONS[name])}
                for name in SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                if value is None:
                    continue
                text = value if isinstance(value, str) else json.dumps(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:10]

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def set(self, dotted: str, raw: str):
        """Apply a ``section.key=value`` override."""
        section, _, key = dotted.partition(".")
        _assign(self, section, key, raw)

    # ------------------------------------------------------------ derived
    def scene_template(self):
        from .scenedata import SceneConfig

        c, d = self.camera, self.data
        try:
            return SceneConfig(
                width=c.width, height=c.height, f=c.f, cx=c.cx, cy=c.cy,
                camera_height=c.camera_height, pitch=c.pitch, lane_count=d.lane_count,
                line_width=d.line_width, markings=tuple(d.markings), noise=d.noise,
                h_sample_start=d.h_sample_start, h_sample_step=d.h_sample_step,
                keypoint_far=self.chain.keypoint_far,
                keypoint_half_width=self.chain.keypoint_half_width,
            )
        except ValueError as exc:
            raise ConfigError(f"camera: {exc}", "camera") from exc

    def horizon(self):
        h = self.camera.horizon
        if h is None:
            raise ConfigError("camera.horizon is missing (give two pixels or 'auto')",
                              "camera.horizon")
        if isinstance(h, str) and h.strip().lower() == AUTO:
            return self.scene_template().horizon
        vals = h.split() if isinstance(h, str) else list(h)
        try:
            vals = [float(v) for v in vals]
        except (TypeError, ValueError):
            raise ConfigError(f"camera.horizon must be four numbers, got {h!r}",
                              "camera.horizon") from None
        if len(vals) != 4:
            raise ConfigError(f"camera.horizon must be four numbers, got {h!r}",
                              "camera.horizon")
        return ((vals[0], vals[1]), (vals[2], vals[3]))

    def build_chain(self, steps: int | None = None):
        from .geometry import build_ptl_chain
        from .scenedata import scene_keypoints

        n = self.chain.steps if steps is None else steps
        horizon = self.horizon()
        tmpl = self.scene_template()
        widths = self.chain.widths or [self.camera.width] * n
        if len(widths) != n:
            raise ConfigError(f"chain.widths has {len(widths)} entries for {n} steps",
                              "chain.widths")
        kp = self.chain.keypoints
        if kp is None:
            kp = scene_keypoints(tmpl)
        elif len(kp) < 3 or any(len(p) not in (2, 3) for p in kp):
            raise ConfigError("chain.keypoints needs at least three [x, y] points",
                              "chain.keypoints")
        return build_ptl_chain(tmpl.intrinsics, tmpl.view, horizon, kp, n, widths)

    def network_config(self, ptl: bool | None = None):
        from .ptseg import NetworkConfig

        ptl = self.train.ptl if ptl is None else ptl
        n = self.chain.steps if ptl else 0
        net = self.network
        return NetworkConfig(
            view=self.scene_template().view,
            chain=self.build_chain() if n else None,
            depth=net.depth,
            ptl_steps=n,
            base_channels=net.base_channels,
            max_channels=net.max_channels,
            embedding_dims=net.embedding_dims,
            instance_head=net.instance_head,
            instance_weight=net.instance_weight,
            delta_v=net.delta_v,
            delta_d=net.delta_d,
            class_weights=tuple(net.class_weights) if net.class_weights else None,
        )


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(value, default, key):
    """Match the type of the default where there is one."""
    if value is None or default is None or isinstance(default, str) and value == AUTO:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            raise ValueError
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise ValueError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise ValueError
            return value
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {type(default).__name__}",
                          key) from None
    return value


def _assign(cfg: RunConfig, section: str, key: str, raw):
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]", section)
    obj = getattr(cfg, section)
    names = {f.name: f for f in fields(obj)}
    dotted = f"{section}.{key}"
    if key not in names:
        raise ConfigError(f"unknown key {dotted}", dotted)
    value = _parse_value(raw) if isinstance(raw, str) else raw
    default = getattr(type(obj)(), key)
    setattr(obj, key, _coerce(value, default, dotted))


def parse_config(text: str, base_dir=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    cfg = RunConfig(base_dir=Path(base_dir) if base_dir else Path.cwd())
    for section in parser.sections():
        for key, raw in parser.items(section):
            _assign(cfg, section, key, raw)
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", str(path)) from exc
    return parse_config(text, path.parent.resolve())


def default_config() -> RunConfig:
    cfg = RunConfig()
    cfg.camera.horizon = AUTO
    return cfg


def _validate(cfg: RunConfig):
    checks = [
        (cfg.camera.width > 0 and cfg.camera.height > 0, "camera.width"),
        (cfg.camera.f > 0, "camera.f"),
        (cfg.chain.steps >= 0, "chain.steps"),
        (cfg.network.depth >= 1, "network.depth"),
        (cfg.data.count >= 0, "data.count"),
        (0 <= cfg.data.train_count, "data.train_count"),
        (cfg.train.steps >= 0, "train.steps"),
        (cfg.train.batch >= 1, "train.batch"),
        (cfg.train.lr > 0, "train.lr"),
        (cfg.eval.threshold > 0, "eval.threshold"),
        (0 < cfg.eval.lane_match_ratio <= 1, "eval.lane_match_ratio"),
    ]
    for ok, key in checks:
        if not ok:
            raise ConfigError(f"{key} is out of range", key)
    optional_lists = {"chain.widths": cfg.chain.widths, "chain.keypoints": cfg.chain.keypoints,
                      "eval.bins_px": cfg.eval.bins_px, "eval.bins_m": cfg.eval.bins_m}
    for key, value in optional_lists.items():
        if value is not None and not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}", key)
