"""Refinement-stage objectives: identity, triplet, and image-text losses.

The refined group feature is trained with three terms: a label-smoothed
classification loss over group classes, a batch-hard triplet loss in
Euclidean feature space, and a label-smoothed cross entropy over
similarities to the (now frozen) group text features.  Mining runs on
detached feature values; only the chosen pairs enter the recorded loss.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import grce
from .diffcore import ShapeError, Tensor
from .encoders import ModelState
from .mvs import Mask


def cross_entropy_smoothed(logits: Tensor, true_index: int, epsilon: float) -> Tensor:
    """Cross entropy against a label-smoothed target distribution.

    The target puts ``1 - epsilon + epsilon/N`` on the true class and
    ``epsilon/N`` elsewhere.
    """
    if logits.ndim != 1:
        raise ShapeError(f"logits must be a vector, got {logits.shape}")
    n = logits.shape[0]
    if not (0 <= true_index < n):
        raise ValueError(f"true class {true_index} outside [0, {n})")
    if not (0.0 <= epsilon < 1.0):
        raise ValueError("epsilon must lie in [0, 1)")
    target = np.full(n, epsilon / n)
    target[true_index] += 1.0 - epsilon
    logp = dc.log(dc.softmax_rows(logits))
    return dc.scale(dc.reduce_sum(dc.mul(logp, dc.constant(target))), -1.0)


def id_loss(refined: Tensor, state: ModelState, class_index: int, epsilon: float = 0.1) -> Tensor:
    """Group classification over the learned classifier rows."""
    logits = dc.matmul(state.params["grce.classifier"], refined)
    return cross_entropy_smoothed(logits, class_index, epsilon)


def i2tce_loss(
    refined: Tensor,
    text_rows: Tensor,
    class_index: int,
    inv_temp: Tensor,
    epsilon: float = 0.1,
) -> Tensor:
    """Smoothed cross entropy over similarities to the class text features."""
    if text_rows.ndim != 2:
        raise ShapeError("text features must be a matrix")
    logits = dc.mul(dc.matmul(text_rows, refined), inv_temp)
    return cross_entropy_smoothed(logits, class_index, epsilon)


def euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Distance with a clamped square: differentiable at coincident points.

    ``sqrt`` is composed as ``exp(log(d^2)/2)`` with ``d^2`` floored at
    1e-12, so coincident inputs give distance 1e-6 and a zero gradient
    instead of a NaN.
    """
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"expected matching vectors, got {a.shape} and {b.shape}")
    diff = dc.sub(a, b)
    d2 = dc.clamp_min(dc.reduce_sum(dc.mul(diff, diff)), 1e-12)
    return dc.exp(dc.scale(dc.log(d2), 0.5))


def mine_batch_hard(values: np.ndarray, labels: Sequence[int]) -> list[tuple[int, int, int]]:
    """Per anchor: the farthest positive and the nearest negative.

    Mining is a discrete choice, so it runs on plain arrays; ties break
    toward the lowest index.  Every anchor must have at least one other
    positive and one negative.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != len(labels):
        raise ShapeError("need one feature row per label")
    b = arr.shape[0]
    sq = np.sum((arr[:, None, :] - arr[None, :, :]) ** 2, axis=2)
    dist = np.sqrt(np.maximum(sq, 0.0))
    lab = np.asarray(labels)
    triplets: list[tuple[int, int, int]] = []
    for a in range(b):
        same = (lab == lab[a]) & (np.arange(b) != a)
        diff = lab != lab[a]
        if not same.any():
            raise ValueError(f"anchor {a} (label {lab[a]}) has no positive in the batch")
        if not diff.any():
            raise ValueError(f"anchor {a} (label {lab[a]}) has no negative in the batch")
        pos_d = np.where(same, dist[a], -np.inf)
        neg_d = np.where(diff, dist[a], np.inf)
        triplets.append((a, int(np.argmax(pos_d)), int(np.argmin(neg_d))))
    return triplets


def triplet_loss(features: Tensor, labels: Sequence[int], alpha: float = 0.3) -> Tensor:
    """Batch-hard triplet hinge, averaged over anchors."""
    if features.ndim != 2:
        raise ShapeError("features must be a (batch, dim) matrix")
    if alpha < 0:
        raise ValueError("margin must be non-negative")
    hinges = []
    for a, p, n in mine_batch_hard(features.values, labels):
        d_ap = euclidean(dc.take_row(features, a), dc.take_row(features, p))
        d_an = euclidean(dc.take_row(features, a), dc.take_row(features, n))
        margin = dc.add(dc.sub(d_ap, d_an), dc.constant(np.asarray(alpha)))
        hinges.append(dc.clamp_min(margin, 0.0))
    total = hinges[0]
    for h in hinges[1:]:
        total = dc.add(total, h)
    return dc.scale(total, 1.0 / len(hinges))


def stage2_batch_loss(
    samples,
    masks: Sequence[Mask],
    state: ModelState,
    class_index: Mapping[int, int],
    text_rows: Tensor | None,
    *,
    alpha: float = 0.3,
    epsilon: float = 0.1,
    mvs_enabled: bool = True,
) -> tuple[Tensor, dict[str, float]]:
    """Identity + triplet (+ image-text) loss over refined group features.

    ``class_index`` maps group ids to classifier rows; ``text_rows``, when
    given, holds one frozen text feature per class in the same row order.
    """
    if len(samples) != len(masks):
        raise ValueError("one mask per sample required")
    if len(samples) < 2:
        raise ValueError("stage-2 batches need at least two samples")
    refined_rows: list[Tensor] = []
    class_ids: list[int] = []
    for sample, mask in zip(samples, masks):
        v, feats, _ = grce.group_visual(sample, state, mask, quantity=mvs_enabled)
        refined_rows.append(grce.refine(v, feats, state))
        class_ids.append(class_index[sample.group_id])

    id_terms = [
        id_loss(r, state, c, epsilon) for r, c in zip(refined_rows, class_ids)
    ]
    total_id = id_terms[0]
    for t in id_terms[1:]:
        total_id = dc.add(total_id, t)
    l_id = dc.scale(total_id, 1.0 / len(id_terms))

    features = dc.stack(refined_rows)
    l_tri = triplet_loss(features, class_ids, alpha)

    total = dc.add(l_id, l_tri)
    parts = {"loss_id": l_id.item(), "loss_tri": l_tri.item()}
    if text_rows is not None:
        inv_temp = state.params["temp.inv"]
        ce_terms = [
            i2tce_loss(r, text_rows, c, inv_temp, epsilon)
            for r, c in zip(refined_rows, class_ids)
        ]
        total_ce = ce_terms[0]
        for t in ce_terms[1:]:
            total_ce = dc.add(total_ce, t)
        l_ce = dc.scale(total_ce, 1.0 / len(ce_terms))
        total = dc.add(total, l_ce)
        parts["loss_i2tce"] = l_ce.item()
    return total, parts
