"""Assignment, matching rules and set-prediction losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .detector import N_BOX_PARAMS, BoxEstimate
from .geometry import GtBox

NO_OBJECT = -1


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment for a rectangular cost matrix.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^2 m). Returns ``(row, col)`` pairs sorted by row; with more rows than
    columns only ``n_cols`` rows are assigned. Ties resolve towards the lowest
    column index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("hungarian: cost matrix must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j] > 0]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    return sorted(pairs)


@dataclass
class Assignment:
    """Prediction index -> gt index, ``NO_OBJECT`` for unmatched predictions."""

    pred_to_gt: np.ndarray
    labels: list[str] = field(default_factory=list)

    @property
    def matched(self) -> list[tuple[int, int]]:
        return [(i, int(g)) for i, g in enumerate(self.pred_to_gt) if g != NO_OBJECT]

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, g] for i, g in self.matched))


def as_params(items) -> np.ndarray:
    """Stack box parameter vectors (x, y, z, w, l, h, yaw, vx, vy)."""
    rows = [it.params() if isinstance(it, (BoxEstimate, GtBox)) else np.asarray(it, dtype=np.float64)
            for it in items]
    return np.asarray(rows, dtype=np.float64).reshape(-1, N_BOX_PARAMS)


def box_cost_matrix(preds, gts) -> np.ndarray:
    """ℓ1 distance between box parameter vectors, heading measured on the circle."""
    p, g = as_params(preds), as_params(gts)
    diff = p[:, None, :] - g[None, :, :]
    diff[..., 6] = ad.wrap_angle(diff[..., 6])
    return np.abs(diff).sum(axis=-1)


def match_detection(preds, gts) -> Assignment:
    n = len(preds)
    out = np.full(n, NO_OBJECT, dtype=np.int64)
    if n and len(gts):
        cost = box_cost_matrix(preds, gts)
        for r, c in hungarian(cost):
            out[r] = c
    return Assignment(out, ["matched" if g != NO_OBJECT else "no-object" for g in out])


def match_tracking(track_slots: Sequence[tuple[int, object]], object_preds, gts: Sequence[GtBox]) -> Assignment:
    """Track slots keep their own gt; new gts go to object queries by Hungarian.

    The returned assignment indexes track slots first, then object
    predictions. Labels: ``continued`` / ``no-object`` for track slots and
    ``spawn`` / ``no-object`` for object slots.
    """
    ids = [int(t) for t, _ in track_slots]
    if len(set(ids)) != len(ids):
        raise ContractError("match_tracking: duplicate track id among slots")
    gt_index = {int(g.track_id): k for k, g in enumerate(gts)}
    n_t, n_o = len(track_slots), len(object_preds)
    out = np.full(n_t + n_o, NO_OBJECT, dtype=np.int64)
    labels = []
    bound = set()
    for s, tid in enumerate(ids):
        if tid in gt_index:
            out[s] = gt_index[tid]
            bound.add(gt_index[tid])
            labels.append("continued")
        else:
            labels.append("no-object")
    new_gts = [k for k in range(len(gts)) if k not in bound]
    obj_labels = ["no-object"] * n_o
    if new_gts and n_o:
        cost = box_cost_matrix(object_preds, [gts[k] for k in new_gts])
        for r, c in hungarian(cost):
            out[n_t + r] = new_gts[c]
            obj_labels[r] = "spawn"
    return Assignment(out, labels + obj_labels)


@dataclass
class LossWeights:
    location: float = 1.0
    size: float = 1.0
    heading: float = 1.0
    velocity: float = 0.5
    classification: float = 1.0
    no_object: float = 0.1


def set_loss(raw: Tensor, anchors: np.ndarray, assignment: Assignment, gts: Sequence[GtBox],
             weights: LossWeights, n_classes: int) -> tuple[Tensor, dict[str, float]]:
    """ℓ1 over matched box parameters plus class-weighted cross-entropy.

    The ℓ1 part is a sum over matched predictions; the classification part is
    the weighted mean over all predictions with unmatched ones labelled
    no-object.
    """
    n = raw.shape[0]
    matched = assignment.matched
    targets = np.full(n, n_classes, dtype=np.int64)
    for i, g in matched:
        targets[i] = gts[g].cls
    logits = ad.take_cols(raw, N_BOX_PARAMS, N_BOX_PARAMS + n_classes + 1)
    cw = np.r_[np.ones(n_classes), weights.no_object]
    ce = ad.cross_entropy(logits, targets, cw)
    total = ad.scale(ce, weights.classification)
    parts = {"cls": float(ce.data)}
    if matched:
        rows = np.array([i for i, _ in matched])
        tgt = np.stack([gts[g].params() for _, g in matched])
        tgt[:, 0:3] -= np.asarray(anchors)[rows]
        sel = ad.take_rows(ad.take_cols(raw, 0, N_BOX_PARAMS), rows)
        w = np.r_[[weights.location] * 3, [weights.size] * 3, 0.0, [weights.velocity] * 2]
        reg = ad.l1_loss(sel, tgt, w)
        yaw = ad.l1_loss(ad.take_cols(sel, 6, 7), tgt[:, 6:7], weights.heading, wrap=True)
        total = ad.add(total, ad.add(reg, yaw))
        parts["l1"] = float(reg.data + yaw.data)
    else:
        parts["l1"] = 0.0
    parts["total"] = float(total.data)
    return total, parts


def augment_tracks(track_queries: list, discarded_pool: list, rng: np.random.Generator,
                   p_drop: float = 0.1, p_readd: float = 0.1) -> list:
    """Drop each track query with ``p_drop``; with ``p_readd`` inject one discarded query."""
    kept = [q for q in track_queries if rng.random() >= p_drop]
    if discarded_pool and rng.random() < p_readd:
        kept.append(discarded_pool[int(rng.integers(len(discarded_pool)))])
    return kept
