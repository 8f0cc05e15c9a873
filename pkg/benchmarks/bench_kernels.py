"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--channels 16] [--size 128]

Each row reports the best-of-``repeat`` wall time per call and the speedup of
the compiled backend.  Outputs of the two backends are compared first.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ptlane import warp as W
from ptlane.geometry import build_ptl_chain
from ptlane.scenedata import SceneConfig, scene_keypoints


def cases(size: int, channels: int):
    cfg = SceneConfig(width=size, height=size, f=size * 0.9375)
    chain = build_ptl_chain(cfg.intrinsics, cfg.view, cfg.horizon, scene_keypoints(cfg), 1,
                            [size])
    h = chain.integral
    rng = np.random.default_rng(0)
    fm = rng.normal(size=(channels,) + h.source.shape)
    grad = rng.normal(size=(channels,) + h.target.shape)
    hinv = np.ascontiguousarray(np.linalg.inv(h.matrix))
    th, tw = h.target.shape
    sh, sw = h.source.shape
    oh, ow = size // 2, size // 2
    cols = np.ascontiguousarray(rng.normal(size=(channels * 9, oh * ow)))
    return {
        "warp_forward": lambda k: k.warp_forward(fm, hinv, 1.0, th, tw),
        "warp_backward": lambda k: k.warp_backward(grad, hinv, 1.0, sh, sw),
        "im2col (3x3, s2)": lambda k: k.im2col(fm, 3, 2, 1, oh, ow),
        "col2im (3x3, s2)": lambda k: k.col2im(cols, channels, size, size, 3, 2, 1, oh, ow),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=3)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    args = p.parse_args(argv)

    if "compiled" not in W.BACKENDS:
        print("compiled kernels are not built; only the fallback is available")
    backends = sorted(W.BACKENDS, reverse=True)
    print(f"{args.channels} x {args.size} x {args.size} maps, best of {args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{b:>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.size, args.channels).items():
        outs = [fn(W.BACKENDS[b]) for b in backends]
        for o in outs[1:]:
            assert np.allclose(o, outs[0], rtol=0, atol=1e-12), f"{name}: backends disagree"
        times = []
        for b in backends:
            t = timeit.repeat(lambda: fn(W.BACKENDS[b]), number=args.number, repeat=args.repeat)
            times.append(min(t) / args.number)
        row = f"{name:<20}" + "".join(f"{t * 1e3:>11.2f} ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
