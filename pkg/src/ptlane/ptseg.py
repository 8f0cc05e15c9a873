"""Toy PTSeg: an encoder-decoder with perspective transformer layers.

Encoder stage ``i`` (1-based) halves the resolution with a residual block and,
for ``i <= ptl_steps``, warps the result into virtual view ``i`` of the chain.
Decoder stage ``i`` upsamples with a transposed convolution, warps back to
view ``i-1`` and adds the encoder map of level ``i-1``, which lives in the same
view at the same resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    IGNORE_INDEX,
    Tape,
    Tensor,
    add,
    conv2d,
    conv2d_transpose,
    discriminative_loss,
    relu,
    scale,
    softmax_cross_entropy,
    warp,
)
from .errors import IncompatibleChain, ShapeMismatch
from .geometry import Homography, PTLChain, ViewSpec
from .scenedata import LANE_LINE
from .warp import scale_homography_for_stride


@dataclass
class NetworkConfig:
    view: ViewSpec
    chain: PTLChain | None = None
    depth: int = 3
    ptl_steps: int = 3
    base_channels: int = 16
    num_classes: int = 4
    embedding_dims: int = 4
    instance_head: bool = True
    instance_weight: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 3.0
    class_weights: tuple | None = None
    max_channels: int = 64
    in_channels: int = 3

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** max(level - 1, 0), self.max_channels)


@dataclass
class Level:
    """Geometry of one resolution level: virtual view, stride and map shape."""

    view_index: int
    stride: int
    shape: tuple
    view: ViewSpec | None = None
    enc_warp: Homography | None = None     # into this level's view (encoder side)
    dec_warp: Homography | None = None     # out of this level's view (decoder side)
    up_shape: tuple | None = None          # decoder upsample target before dec_warp


@dataclass
class PTSegModel:
    config: NetworkConfig
    params: dict
    levels: list
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def warp_count(self) -> int:
        return sum(l.enc_warp is not None for l in self.levels) * 2

    def parameters(self) -> dict:
        return self.params

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        for k, v in arrays.items():
            if k not in self.params:
                raise ShapeMismatch(f"unknown parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ShapeMismatch(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def _plan_levels(cfg: NetworkConfig) -> list[Level]:
    if cfg.depth < 1:
        raise IncompatibleChain("depth must be at least 1")
    if cfg.ptl_steps < 0 or cfg.ptl_steps > cfg.depth:
        raise IncompatibleChain(f"ptl_steps={cfg.ptl_steps} must lie in [0, depth={cfg.depth}]")
    if cfg.ptl_steps > 0:
        chain = cfg.chain
        if chain is None:
            raise IncompatibleChain("ptl_steps > 0 requires a chain")
        if chain.n_steps != cfg.ptl_steps:
            raise IncompatibleChain(f"chain has {chain.n_steps} steps, config wants "
                                    f"{cfg.ptl_steps}")
        if chain.views[0] != cfg.view:
            raise IncompatibleChain("chain does not start from the network input view")
        views = chain.views
    else:
        views = [cfg.view]

    levels = [Level(0, 1, cfg.view.shape, cfg.view)]
    for i in range(1, cfg.depth + 1):
        stride = 2 ** i
        prev = levels[-1]
        conv_shape = tuple(-(-n // 2) for n in prev.shape)
        if i <= cfg.ptl_steps:
            step = cfg.chain.steps[i - 1].homography
            enc = scale_homography_for_stride(step, stride)
            if enc.source.shape != conv_shape:
                raise IncompatibleChain(f"stage {i}: conv output {conv_shape} does not match "
                                        f"warp source {enc.source.shape}")
            dec = scale_homography_for_stride(step.inverse(), stride // 2)
            if dec.target != prev.view:
                raise IncompatibleChain(f"stage {i}: decoder warp does not land in the view of "
                                        f"level {i - 1}")
            level = Level(i, stride, enc.target.shape, enc.target, enc, dec, dec.source.shape)
        else:
            full = views[prev.view_index]
            view = scale_homography_for_stride(Homography.identity(full), stride).target
            level = Level(prev.view_index, stride, conv_shape, view, up_shape=prev.shape)
        if min(level.shape) < 1:
            raise IncompatibleChain(f"stage {i} collapses to an empty map")
        levels.append(level)
    return levels


def _he(rng, shape, fan_in):
    return rng.normal(scale=math.sqrt(2.0 / fan_in), size=shape)


def build_model(cfg: NetworkConfig, seed: int = 0) -> PTSegModel:
    levels = _plan_levels(cfg)
    rng = np.random.default_rng(seed)
    p = {}

    def conv(name, c_out, c_in, k):
        p[f"{name}.w"] = Tensor(_he(rng, (c_out, c_in, k, k), c_in * k * k), True, f"{name}.w")
        p[f"{name}.b"] = Tensor(np.zeros(c_out), True, f"{name}.b")

    c0 = cfg.channels(0)
    conv("stem", c0, cfg.in_channels, 3)
    for i in range(1, cfg.depth + 1):
        cin, cout = cfg.channels(i - 1), cfg.channels(i)
        conv(f"enc{i}.conv1", cout, cin, 3)
        conv(f"enc{i}.conv2", cout, cout, 3)
        conv(f"enc{i}.proj", cout, cin, 1)
    for i in range(cfg.depth, 0, -1):
        cin, cout = cfg.channels(i), cfg.channels(i - 1)
        # transposed weights are C_in x C_out x k x k; each output sees ~C_in*k*k/4 taps
        p[f"dec{i}.up.w"] = Tensor(_he(rng, (cin, cout, 3, 3), cin * 9 / 4), True, f"dec{i}.up.w")
        p[f"dec{i}.up.b"] = Tensor(np.zeros(cout), True, f"dec{i}.up.b")
        conv(f"dec{i}.refine", cout, cout, 3)
    p["head.sem.w"] = Tensor(rng.normal(scale=math.sqrt(1.0 / c0),
                                        size=(cfg.num_classes, c0, 1, 1)), True, "head.sem.w")
    p["head.sem.b"] = Tensor(np.zeros(cfg.num_classes), True, "head.sem.b")
    if cfg.instance_head:
        p["head.emb.w"] = Tensor(rng.normal(scale=math.sqrt(1.0 / c0),
                                            size=(cfg.embedding_dims, c0, 1, 1)), True,
                                 "head.emb.w")
        p["head.emb.b"] = Tensor(np.zeros(cfg.embedding_dims), True, "head.emb.b")
    return PTSegModel(cfg, p, levels, seed)


def forward(model: PTSegModel, image, keep_features: bool = False) -> dict:
    """Run the network on a ``3 x H x W`` image.

    Returns ``semantic_logits``, ``embeddings`` (or ``None``) and, when
    ``keep_features`` is set, a list of ``(name, array)`` intermediate maps.
    """
    cfg, p, levels = model.config, model.params, model.levels
    x = image if isinstance(image, Tensor) else Tensor(image)
    want = (cfg.in_channels,) + cfg.view.shape
    if x.shape != want:
        raise ShapeMismatch(f"image must be {want}, got {x.shape}")
    feats = []

    def keep(name, t):
        if keep_features:
            feats.append((name, t.data.copy()))

    h = relu(conv2d(x, p["stem.w"], p["stem.b"]))
    keep("stem", h)
    skips = [h]
    for i in range(1, cfg.depth + 1):
        y = relu(conv2d(h, p[f"enc{i}.conv1.w"], p[f"enc{i}.conv1.b"], stride=2))
        y = conv2d(y, p[f"enc{i}.conv2.w"], p[f"enc{i}.conv2.b"])
        h = relu(add(y, conv2d(h, p[f"enc{i}.proj.w"], p[f"enc{i}.proj.b"], stride=2)))
        keep(f"enc{i}", h)
        if levels[i].enc_warp is not None:
            h = warp(h, levels[i].enc_warp)
            keep(f"enc{i}.ptl", h)
        skips.append(h)

    for i in range(cfg.depth, 0, -1):
        lvl = levels[i]
        h = relu(conv2d_transpose(h, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"], stride=2,
                                  output_size=lvl.up_shape))
        if lvl.dec_warp is not None:
            h = warp(h, lvl.dec_warp)
            keep(f"dec{i}.ptl", h)
        h = add(h, skips[i - 1])
        h = relu(conv2d(h, p[f"dec{i}.refine.w"], p[f"dec{i}.refine.b"]))
        keep(f"dec{i}", h)

    out = {"semantic_logits": conv2d(h, p["head.sem.w"], p["head.sem.b"]), "embeddings": None}
    if cfg.instance_head:
        out["embeddings"] = conv2d(h, p["head.emb.w"], p["head.emb.b"])
    if keep_features:
        out["features"] = feats
    return out


def loss(model: PTSegModel, outputs: dict, semantic, instance=None) -> Tensor:
    cfg = model.config
    total = softmax_cross_entropy(outputs["semantic_logits"], semantic, IGNORE_INDEX,
                                  cfg.class_weights)
    if cfg.instance_head and outputs.get("embeddings") is not None and instance is not None:
        inst = discriminative_loss(outputs["embeddings"], instance, cfg.delta_v, cfg.delta_d)
        total = add(total, scale(inst, cfg.instance_weight))
    return total


def cluster_embeddings(embeddings, mask, delta_d: float, max_rounds: int = 10) -> np.ndarray:
    """Greedy threshold clustering of masked pixels in embedding space.

    Seeds are taken in raster order; each cluster takes every unassigned
    masked pixel within ``delta_d`` of its running mean.  Returns an ``H x W``
    int map with 0 for background.
    """
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=np.int32)
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        return out
    vecs = emb.reshape(emb.shape[0], -1)[:, idx].T
    labels = np.zeros(len(idx), dtype=np.int32)
    label = 0
    while True:
        free = np.flatnonzero(labels == 0)
        if free.size == 0:
            break
        seed = free[0]
        mean = vecs[seed]
        members = None
        for _ in range(max_rounds):
            d = np.linalg.norm(vecs[free] - mean, axis=1)
            new = free[d < delta_d]
            if seed not in new:
                new = np.union1d(new, [seed])
            if members is not None and np.array_equal(new, members):
                break
            members = new
            mean = vecs[members].mean(axis=0)
        label += 1
        labels[members] = label
    out.ravel()[idx] = labels
    return out


def predict(model: PTSegModel, image, lane_class: int = LANE_LINE) -> dict:
    out = forward(model, image)
    semantic = out["semantic_logits"].data.argmax(axis=0).astype(np.uint8)
    instance = None
    if out["embeddings"] is not None:
        instance = cluster_embeddings(out["embeddings"], semantic == lane_class,
                                      model.config.delta_d)
    return {"semantic": semantic, "instance": instance}


def feature_panel(fmap: np.ndarray, max_channels: int = 16) -> np.ndarray:
    """Tile the first channels of a ``C x H x W`` map into a grey ``H' x W'`` grid in [0, 1]."""
    fmap = np.asarray(fmap)[:max_channels]
    n, h, w = fmap.shape
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for k, ch in enumerate(fmap):
        lo, hi = ch.min(), ch.max()
        r, c = divmod(k, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = \
            (ch - lo) / (hi - lo) if hi > lo else 0.0
    return grid


def count_warps(model: PTSegModel, image) -> int:
    """Number of warp ops recorded by one forward pass."""
    with Tape() as tape:
        x = Tensor(image, requires_grad=True)
        forward(model, x)
    return tape.count("warp")
