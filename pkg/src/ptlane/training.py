"""Training loop, held-out evaluation and the PTL-vs-baseline experiment."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .autodiff import AdamState, Tape, adam_step, checkpoint
from .config import RunConfig
from .ptseg import PTSegModel, build_model, count_warps, forward, loss, predict
from .scenedata import CLASS_NAMES, LANE_LINE, Dataset, TuSimpleRecord, load_dataset

CLASSES = list(range(len(CLASS_NAMES)))


@dataclass
class TrainResult:
    model: PTSegModel
    state: AdamState
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def make_optimizer(cfg: RunConfig) -> AdamState:
    t = cfg.train
    return AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps,
                     weight_decay=t.weight_decay)


def train_step(model: PTSegModel, batch, state: AdamState) -> float:
    """One optimizer step on a list of items; returns the mean loss."""
    grads = {}
    total = 0.0
    for item in batch:
        with Tape() as tape:
            out = forward(model, item.image)
            value = loss(model, out, item.semantic, item.instance)
        tape.backward(value)
        total += float(value.data)
        for name, p in model.params.items():
            if p.grad is not None:
                grads[name] = grads.get(name, 0.0) + p.grad / len(batch)
            p.grad = None
    adam_step(model.params, grads, state)
    return total / len(batch)


def train(cfg: RunConfig, items, ptl: bool | None = None, steps: int | None = None,
          overfit_one: bool = False, progress=None) -> TrainResult:
    """Train a fresh model.  Batches are drawn without replacement per step
    from a generator seeded by ``train.seed``."""
    t = cfg.train
    model = build_model(cfg.network_config(ptl), seed=t.seed)
    state = make_optimizer(cfg)
    rng = np.random.default_rng(t.seed)
    pool = items[:1] if overfit_one else items
    batch_size = min(1 if overfit_one else t.batch, len(pool))
    n_steps = t.steps if steps is None else steps
    result = TrainResult(model, state)
    start = time.perf_counter()
    for step in range(n_steps):
        idx = rng.choice(len(pool), size=batch_size, replace=False)
        value = train_step(model, [pool[i] for i in sorted(idx)], state)
        result.losses.append(value)
        if progress is not None:
            progress(step, value)
    result.seconds = time.perf_counter() - start
    return result


def save_model(path, result: TrainResult, cfg: RunConfig, ptl: bool):
    meta = {"config": cfg.to_dict(), "ptl": bool(ptl), "steps": result.state.step,
            "warp_ops": result.model.warp_count}
    checkpoint.save(path, result.model.state_arrays(), result.state, meta)


def load_model(path, cfg: RunConfig | None = None) -> tuple[PTSegModel, dict]:
    """Rebuild a model from a checkpoint; the stored config wins over ``cfg``."""
    from .config import RunConfig as _RC, _assign

    params, _, meta = checkpoint.load(path)
    stored = _RC(base_dir=cfg.base_dir if cfg else Path.cwd())
    for section, values in meta.get("config", {}).items():
        for key, value in values.items():
            _assign(stored, section, key, value)
    model = build_model(stored.network_config(meta.get("ptl", True)), seed=stored.train.seed)
    model.load_arrays(params)
    return model, meta


def write_loss_log(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def read_loss_log(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


# -------------------------------------------------------------------- evaluation


def _camera_geometry(cfg: RunConfig) -> ev.CameraGeometry:
    tmpl = cfg.scene_template()
    return ev.CameraGeometry(tmpl.f, tmpl.principal_point[1], tmpl.camera_height, tmpl.pitch)


def evaluate_items(model: PTSegModel, items, cfg: RunConfig, under_horizon: bool | None = None,
                   bins: str = "px") -> dict:
    """Predict every item and score it; returns a report dict plus binned curves."""
    preds = [predict(model, it.image) for it in items]
    return score_predictions(
        [p["semantic"] for p in preds],
        [lanes_from_prediction(p, it.record.h_samples, cfg.eval.min_cluster)
         for p, it in zip(preds, items)],
        items, cfg, under_horizon, bins)


def lanes_from_prediction(pred: dict, h_samples, min_cluster: int = 10) -> list:
    inst = pred["instance"]
    if inst is None:
        inst = (pred["semantic"] == LANE_LINE).astype(np.int32)
    return ev.lanes_from_instances(inst, h_samples, min_pixels=min_cluster, band=1)


def score_predictions(sem_preds, lane_preds, items, cfg: RunConfig,
                      under_horizon: bool | None = None, bins: str = "px") -> dict:
    e = cfg.eval
    under = e.under_horizon if under_horizon is None else under_horizon
    gts = [it.record for it in items]
    masks = [it.semantic for it in items]
    if under:
        row = cfg.scene_template().horizon_row
        gts = ev.under_horizon_filter(gts, row)
        masks = ev.under_horizon_filter(masks, row)
    preds = [TuSimpleRecord(l, g.h_samples, g.raw_file) for l, g in zip(lane_preds, gts)]
    acc, counts = ev.tusimple_accuracy(preds, gts, e.threshold)
    fp, fn = ev.tusimple_fp_fn(preds, gts, e.threshold, e.lane_match_ratio)

    inter = np.zeros(len(CLASSES))
    union = np.zeros(len(CLASSES))
    for p, g in zip(sem_preds, masks):
        i, u = ev.confusion_counts(p, g, CLASSES)
        inter += i
        union += u
    per_class, miou = ev._iou_from_counts(CLASSES, inter, union)

    H = cfg.camera.height
    geometry = _camera_geometry(cfg)
    curves = {}
    for unit in ("px", "m"):
        edges = (e.bins_px if unit == "px" else e.bins_m) or ev.default_edges(unit, H)
        edges = [math.inf if v in ("inf", None) else float(v) for v in edges]
        curves[f"accuracy_{unit}"] = ev.distance_binned_accuracy(counts, edges, unit, H,
                                                                 geometry)
        curves[f"miou_{unit}"] = ev.distance_binned_miou(sem_preds, masks, CLASSES, edges,
                                                         unit, geometry)
    report = {
        "images": len(counts.images),
        "accuracy": acc,
        "fp": fp,
        "fn": fn,
        "miou": miou,
        "lane_iou": per_class[LANE_LINE],
        "points": sum(c.total for c in counts.images),
        "under_horizon": bool(under),
        "bins": bins,
    }
    for c, v in per_class.items():
        report[f"iou_{CLASS_NAMES[c]}"] = v
    return {"report": report, "curves": curves, "counts": counts}


def write_report(path, report: dict):
    with open(path, "w") as fh:
        for k, v in report.items():
            fh.write(f"{k} = {json.dumps(v)}\n")


def read_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                k, _, v = line.partition("=")
                out[k.strip()] = json.loads(v.strip())
    return out


def far_bin_direction(curve_ptl: ev.DistanceBins, curve_base: ev.DistanceBins) -> str:
    """Compare the farthest bin that both runs populate."""
    for m_p, m_b, s in reversed(list(zip(curve_ptl.metric, curve_base.metric,
                                         curve_ptl.support))):
        if s and not (math.isnan(m_p) or math.isnan(m_b)):
            if m_p > m_b:
                return "ptl_better"
            if m_p < m_b:
                return "baseline_better"
            return "tie"
    return "undefined"


# -------------------------------------------------------------------- experiment


def split(dataset: Dataset, cfg: RunConfig):
    n = min(cfg.data.train_count, len(dataset.items))
    return dataset.items[:n], dataset.items[n:]


def run_experiment(cfg: RunConfig, data_root, out_dir, progress=None) -> dict:
    """Train the PTL model and the baseline on the same split, seed and budget.

    Writes per-run ``loss.csv``, ``model.ckpt``, ``report.txt`` and binned CSVs
    under ``out_dir/{ptl,baseline}`` plus ``summary.txt``.
    """
    out_dir = Path(out_dir)
    dataset = load_dataset(data_root)
    train_items, held_out = split(dataset, cfg)
    summary = {"train_images": len(train_items), "held_out_images": len(held_out),
               "steps": cfg.train.steps, "batch": cfg.train.batch, "seed": cfg.train.seed}
    results = {}
    for name, ptl in (("ptl", True), ("baseline", False)):
        run_dir = out_dir / name
        run_dir.mkdir(parents=True, exist_ok=True)
        res = train(cfg, train_items, ptl=ptl,
                    progress=(lambda s, v, n=name: progress(n, s, v)) if progress else None)
        write_loss_log(run_dir / "loss.csv", res.losses)
        save_model(run_dir / "model.ckpt", res, cfg, ptl)
        scored = evaluate_items(res.model, held_out, cfg)
        scored["report"]["train_seconds"] = round(res.seconds, 1)
        scored["report"]["warp_ops"] = count_warps(res.model, held_out[0].image)
        write_report(run_dir / "report.txt", scored["report"])
        for key, curve in scored["curves"].items():
            curve.to_csv(run_dir / f"bins_{key}.csv")
        results[name] = scored
        for k in ("lane_iou", "miou", "accuracy", "fp", "fn", "train_seconds"):
            summary[f"{name}_{k}"] = scored["report"][k]
    for key in ("accuracy_px", "accuracy_m", "miou_px", "miou_m"):
        summary[f"far_bin_{key}"] = far_bin_direction(results["ptl"]["curves"][key],
                                                      results["baseline"]["curves"][key])
    write_report(out_dir / "summary.txt", summary)
    return {"summary": summary, "results": results}
