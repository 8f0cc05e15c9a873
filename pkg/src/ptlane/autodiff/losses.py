"""Segmentation losses with hand-derived backward passes."""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import EmptyLabelSet, NoInstances, ShapeMismatch
from .tensor import Tensor, as_tensor, record

IGNORE_INDEX = 255


def log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels, ignore_index: int = IGNORE_INDEX,
                          class_weights=None) -> Tensor:
    """Mean pixelwise cross-entropy over non-ignored pixels.

    With ``class_weights`` the mean is weighted by the weight of each pixel's
    label.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 3 or labels.shape != logits.shape[1:]:
        raise ShapeMismatch(f"logits {logits.shape} and labels {labels.shape} disagree")
    K = logits.shape[0]
    valid = labels != ignore_index
    if not valid.any():
        raise EmptyLabelSet("every pixel is ignored")
    lab = np.where(valid, labels, 0).astype(np.int64)
    if np.any(lab < 0) or np.any(lab >= K):
        raise ShapeMismatch(f"labels outside [0, {K})")
    if class_weights is None:
        pix_w = valid.astype(np.float64)
    else:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (K,):
            raise ShapeMismatch(f"need {K} class weights, got {class_weights.shape}")
        pix_w = np.where(valid, class_weights[lab], 0.0)
    norm = pix_w.sum()
    if norm <= 0:
        raise EmptyLabelSet("all non-ignored pixels have zero weight")
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, lab[None], axis=0)[0]
    loss = -(pix_w * picked).sum() / norm

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, lab[None], np.take_along_axis(grad, lab[None], axis=0) - 1.0,
                          axis=0)
        return (grad * (pix_w / norm) * float(g),)

    return record("softmax_cross_entropy", (logits,), Tensor(loss), backward)


def discriminative_loss(embeddings, instance_map, delta_v: float = 0.5,
                        delta_d: float = 3.0) -> Tensor:
    """Pull-push embedding loss over labelled instances (ids > 0).

    variance: mean over instances of the mean ``max(0, |mu_c - e_i| - delta_v)^2``
    distance: mean over unordered instance pairs of ``max(0, 2 delta_d - |mu_a - mu_b|)^2``
    """
    emb = as_tensor(embeddings)
    inst = np.asarray(instance_map)
    if emb.data.ndim != 3 or inst.shape != emb.shape[1:]:
        raise ShapeMismatch(f"embeddings {emb.shape} and instance map {inst.shape} disagree")
    if delta_v <= 0 or delta_d <= 0:
        raise ValueError("margins must be positive")
    ids = [int(i) for i in np.unique(inst) if i > 0]
    if not ids:
        raise NoInstances("instance map has no labelled pixels")
    E = emb.data.reshape(emb.shape[0], -1)
    flat = inst.ravel()
    members = [np.flatnonzero(flat == i) for i in ids]
    C = len(ids)
    mus = np.stack([E[:, m].mean(axis=1) for m in members])

    var_loss = 0.0
    var_parts = []
    for c, m in enumerate(members):
        diff = mus[c][:, None] - E[:, m]
        dist = np.sqrt((diff ** 2).sum(axis=0))
        hinge = np.maximum(dist - delta_v, 0.0)
        var_loss += (hinge ** 2).mean() / C
        var_parts.append((diff, dist, hinge))

    pairs = list(itertools.combinations(range(C), 2))
    dist_loss = 0.0
    pair_parts = []
    for a, b in pairs:
        diff = mus[a] - mus[b]
        dist = np.sqrt(diff @ diff)
        hinge = max(2.0 * delta_d - dist, 0.0)
        dist_loss += hinge ** 2 / len(pairs)
        pair_parts.append((diff, dist, hinge))

    def backward(g):
        grad = np.zeros_like(E)
        for c, m in enumerate(members):
            diff, dist, hinge = var_parts[c]
            n = len(m)
            active = hinge > 0
            u = np.zeros_like(diff)
            u[:, active] = diff[:, active] / dist[active]
            hu = 2.0 * hinge * u
            grad[:, m] += (hu.sum(axis=1, keepdims=True) / n - hu) / (n * C)
        mu_grad = np.zeros_like(mus)
        for (a, b), (diff, dist, hinge) in zip(pairs, pair_parts):
            if hinge <= 0 or dist == 0.0:
                continue
            d_mu = -2.0 * hinge * diff / dist / len(pairs)
            mu_grad[a] += d_mu
            mu_grad[b] -= d_mu
        for c, m in enumerate(members):
            grad[:, m] += mu_grad[c][:, None] / len(m)
        return (grad.reshape(emb.shape) * float(g),)

    return record("discriminative_loss", (emb,), Tensor(var_loss + dist_loss), backward)
