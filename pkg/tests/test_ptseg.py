import numpy as np
import pytest

from ptlane.autodiff import AdamState, Tape, Tensor, adam_step, finite_diff_check
from ptlane.autodiff import softmax_cross_entropy
from ptlane.errors import IncompatibleChain, ShapeMismatch
from ptlane.geometry import CameraIntrinsics, ViewSpec, build_ptl_chain
from ptlane.ptseg import (
    NetworkConfig,
    build_model,
    cluster_embeddings,
    count_warps,
    feature_panel,
    forward,
    loss,
    predict,
)
from ptlane.scenedata import SceneConfig, render_scene, scene_keypoints


def scene_setup(size, n_steps, **scene):
    cfg = SceneConfig(width=size, height=size, f=size * 0.9375, **scene)
    chain = None
    if n_steps:
        chain = build_ptl_chain(cfg.intrinsics, cfg.view, cfg.horizon, scene_keypoints(cfg),
                                n_steps, [size] * n_steps)
    return cfg, chain


def small_model(size=32, depth=2, n=2, seed=0, **kw):
    cfg, chain = scene_setup(size, n)
    net = NetworkConfig(view=cfg.view, chain=chain, depth=depth, ptl_steps=n, **kw)
    return cfg, build_model(net, seed)


def test_plain_single_stage_shapes():
    view = ViewSpec(CameraIntrinsics(10, 5, 5), 12, 10)
    model = build_model(NetworkConfig(view=view, depth=1, ptl_steps=0), 0)
    out = forward(model, np.random.default_rng(0).normal(size=(3, 10, 12)))
    assert out["semantic_logits"].shape == (4, 10, 12)
    assert out["embeddings"].shape == (4, 10, 12)


def test_three_stage_structure():
    cfg, chain = scene_setup(128, 3)
    model = build_model(NetworkConfig(view=cfg.view, chain=chain), 0)
    assert [lvl.enc_warp is not None for lvl in model.levels] == [False, True, True, True]
    assert model.warp_count == 6
    assert count_warps(model, np.zeros((3, 128, 128))) == 6
    for i in range(1, 4):
        lvl, prev = model.levels[i], model.levels[i - 1]
        # decoder warp leaves this level's view and lands in the skip's view
        assert lvl.dec_warp.source.shape == lvl.up_shape
        assert lvl.dec_warp.target == prev.view
        assert lvl.enc_warp.target == lvl.view


def test_baseline_has_no_warps():
    cfg, _ = scene_setup(64, 0)
    model = build_model(NetworkConfig(view=cfg.view, ptl_steps=0), 0)
    assert model.warp_count == 0
    assert count_warps(model, np.zeros((3, 64, 64))) == 0


def test_same_seed_same_parameters():
    _, a = small_model(seed=3)
    _, b = small_model(seed=3)
    _, c = small_model(seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not all(np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_zero_heads_give_uniform_softmax():
    cfg, model = small_model()
    model.params["head.sem.w"].data[:] = 0
    logits = forward(model, np.random.default_rng(1).random((3, 32, 32)))["semantic_logits"].data
    assert np.all(logits == logits[0, 0, 0])


def test_ptl_changes_logits():
    cfg, with_ptl = small_model(n=2)
    _, without = small_model(n=0)
    img = render_scene(SceneConfig(width=32, height=32, f=30)).image
    a = forward(with_ptl, img)["semantic_logits"].data
    b = forward(without, img)["semantic_logits"].data
    assert not np.allclose(a, b)


def test_config_errors():
    cfg, chain = scene_setup(32, 2)
    with pytest.raises(IncompatibleChain):
        build_model(NetworkConfig(view=cfg.view, chain=chain, depth=1, ptl_steps=2))
    with pytest.raises(IncompatibleChain):
        build_model(NetworkConfig(view=cfg.view, chain=None, depth=2, ptl_steps=2))
    with pytest.raises(IncompatibleChain):
        build_model(NetworkConfig(view=cfg.view, chain=chain, depth=3, ptl_steps=3))
    other = ViewSpec(CameraIntrinsics(20, 16, 16), 32, 32)
    with pytest.raises(IncompatibleChain):
        build_model(NetworkConfig(view=other, chain=chain, depth=2, ptl_steps=2))
    _, model = small_model()
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((3, 16, 32)))


def test_skip_views_match_on_every_level():
    cfg, chain = scene_setup(64, 3)
    model = build_model(NetworkConfig(view=cfg.view, chain=chain, depth=3), 0)
    for i in range(1, 4):
        assert model.levels[i].dec_warp.target.shape == model.levels[i - 1].shape


# ------------------------------------------------------------------ losses


def test_loss_without_instance_head_is_cross_entropy():
    cfg, model = small_model(instance_head=False)
    s = render_scene(SceneConfig(width=32, height=32, f=30))
    out = forward(model, s.image)
    assert out["embeddings"] is None
    assert loss(model, out, s.semantic, s.instance).item() == \
        softmax_cross_entropy(out["semantic_logits"], s.semantic).item()


def test_perfect_outputs_have_near_zero_loss():
    cfg, model = small_model()
    sem = np.zeros((32, 32), dtype=int)
    sem[:, 10:12] = 1
    inst = np.zeros((32, 32), dtype=int)
    inst[:, 10] = 1
    inst[:, 11] = 2
    logits = np.zeros((4, 32, 32))
    np.put_along_axis(logits, sem[None], 40.0, axis=0)
    emb = np.zeros((4, 32, 32))
    emb[0][inst == 2] = 10.0
    out = {"semantic_logits": Tensor(logits), "embeddings": Tensor(emb)}
    assert loss(model, out, sem, inst).item() <= 1e-6


def test_whole_network_gradient():
    cfg, chain = scene_setup(16, 2)
    net = NetworkConfig(view=cfg.view, chain=chain, depth=2, ptl_steps=2, in_channels=1,
                        base_channels=4, embedding_dims=2)
    model = build_model(net, 0)
    s = render_scene(cfg)
    image = s.image[:1]

    def op(image, stem_w):
        model.params["stem.w"] = stem_w
        return loss(model, forward(model, image), s.semantic, s.instance)

    report = finite_diff_check(op, {"image": image.copy(),
                                    "stem_w": model.params["stem.w"].data.copy()},
                               tolerance=1e-4, max_entries=60)
    assert report.passed, report


def test_overfit_one_sample():
    # the default toy layout at 64 x 64 with a small step size
    cfg, model = small_model(size=64, depth=3, n=3, seed=0)
    s = render_scene(SceneConfig(width=64, height=64, f=60))
    state = AdamState(lr=3e-4)
    losses = []
    for _ in range(51):
        with Tape() as tape:
            value = loss(model, forward(model, s.image), s.semantic, s.instance)
        tape.backward(value)
        losses.append(value.item())
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
        for p in model.params.values():
            p.grad = None
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 45
    assert losses[-1] < 0.25 * losses[0]


# ------------------------------------------------------------------ clustering / predict


def test_cluster_two_blobs():
    emb = np.zeros((2, 6, 6))
    emb[:, :, 3:] = 10.0
    mask = np.zeros((6, 6), bool)
    mask[1:5, 0:2] = True
    mask[1:5, 4:6] = True
    out = cluster_embeddings(emb, mask, 3.0)
    assert set(np.unique(out)) == {0, 1, 2}
    assert np.all(out[1:5, 0:2] == 1) and np.all(out[1:5, 4:6] == 2)
    assert np.all(out[~mask] == 0)


def test_cluster_empty_mask():
    assert not cluster_embeddings(np.ones((2, 3, 3)), np.zeros((3, 3), bool), 1.0).any()


def test_predict_argmax_and_repeatability():
    cfg, model = small_model(num_classes=2)
    model.params["head.sem.w"].data[:] = 0
    bias = model.params["head.sem.b"].data
    bias[:] = [0.0, 1.0]
    img = np.random.default_rng(2).random((3, 32, 32))
    a = predict(model, img, lane_class=1)
    assert np.all(a["semantic"] == 1)
    b = predict(model, img, lane_class=1)
    assert np.array_equal(a["semantic"], b["semantic"])
    assert np.array_equal(a["instance"], b["instance"])


def test_feature_panel_shape():
    panel = feature_panel(np.random.default_rng(0).normal(size=(5, 4, 6)))
    assert panel.shape == (2 * 5 - 1, 3 * 7 - 1)
    assert panel.min() >= 0 and panel.max() <= 1


def test_features_are_exposed():
    cfg, model = small_model()
    out = forward(model, np.zeros((3, 32, 32)), keep_features=True)
    names = [n for n, _ in out["features"]]
    assert names[0] == "stem" and "enc1.ptl" in names and "dec1.ptl" in names


@pytest.mark.slow
def test_trained_embeddings_cluster_into_lanes(experiment):
    from ptlane.config import load_config
    from ptlane.scenedata import LANE_LINE, load_dataset
    from ptlane.training import load_model, split

    cfg = load_config(experiment.root / "experiment.ini")
    model, _ = load_model(experiment.run("ptl") / "model.ckpt", cfg)
    _, held_out = split(load_dataset(experiment.data), cfg)
    checked = 0
    for item in held_out:
        mask = item.semantic == LANE_LINE
        lanes = [i for i in np.unique(item.instance[mask]) if i > 0]
        if len(lanes) < 3:
            continue
        emb = forward(model, item.image)["embeddings"].data
        labels = cluster_embeddings(emb, mask, model.config.delta_d)
        assert len(set(np.unique(labels[mask])) - {0}) >= 3
        # each true lane votes for its majority cluster; votes must be distinct
        majority = [np.bincount(labels[(item.instance == i) & mask]).argmax() for i in lanes]
        assert len(set(majority)) == len(lanes)
        agree = sum(np.sum(labels[(item.instance == i) & mask] == m)
                    for i, m in zip(lanes, majority))
        assert agree / mask.sum() >= 0.8
        checked += 1
        if checked == 10:
            break
    assert checked >= 5
