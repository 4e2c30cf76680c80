"""One-to-one prediction/ground-truth matching and the training losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 1.0
    lambda_dm: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_point: float = 1.0
    lambda_conf: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_loc: float
    l_dm: float
    total: float


Assignment = list  # list of (prediction index, ground-truth index), sorted by prediction


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def build_cost_matrix(points, confidence, gts, weights: LossWeights = LossWeights()) -> np.ndarray:
    """cost[i, j] = lambda_point * |p_i - g_j|_1 - lambda_conf * conf_i."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if g.size and (g.min() < 0 or g.max() > 1):
        raise ValueError("ground-truth points must be normalized to [0, 1]")
    l1 = np.abs(pts[:, None, :] - g[None, :, :]).sum(axis=2)
    return weights.lambda_point * l1 - weights.lambda_conf * conf[:, None]


def _solve_rows(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Shortest augmenting path Hungarian method for n <= m; returns row->col."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)      # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, np.inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = np.full(n, -1)
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows, float(cost[np.arange(n), rows].sum())


def _solve(cost: np.ndarray) -> tuple[list[tuple[int, int]], float]:
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], 0.0
    if n <= m:
        rows, total = _solve_rows(cost)
        return [(i, int(j)) for i, j in enumerate(rows)], total
    cols, total = _solve_rows(cost.T)
    return sorted((int(i), j) for j, i in enumerate(cols)), total


def _optimum(cost: np.ndarray, rows, cols) -> float:
    return _solve(cost[np.ix_(rows, cols)])[1]


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one assignment of size min(n, m).

    Among equal-cost optima the lexicographically smallest sorted pair list
    is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    pairs, best = _solve(cost)
    tol = 1e-11 * max(1.0, float(np.abs(cost).sum()))
    if _is_unique(cost, pairs, best, tol):
        return pairs
    return _lexicographic(cost, best, tol)


def _is_unique(cost, pairs, best, tol) -> bool:
    # any other optimum must avoid at least one of our pairs
    big = 1e6 * (1.0 + float(np.abs(cost).max())) * (len(pairs) + 1)
    for i, j in pairs:
        alt = cost.copy()
        alt[i, j] = big
        _, val = _solve(alt)
        if val <= best + tol:
            return False
    return True


def _lexicographic(cost, best, tol) -> Assignment:
    n, m = cost.shape
    k = min(n, m)
    chosen: list[tuple[int, int]] = []
    used_cols: set[int] = set()
    fixed = 0.0
    for i in range(n):
        if len(chosen) == k:
            break
        rest_rows = list(range(i + 1, n))
        for j in range(m):
            if j in used_cols:
                continue
            rest_cols = [c for c in range(m) if c not in used_cols and c != j]
            need = k - len(chosen) - 1
            if n > m and len(rest_rows) < len(rest_cols):
                continue
            sub = _optimum(cost, rest_rows, rest_cols) if need and rest_rows and rest_cols else 0.0
            if fixed + cost[i, j] + sub <= best + tol:
                chosen.append((i, j))
                used_cols.add(j)
                fixed += cost[i, j]
                break
    return chosen


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in pairs))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_P_EPS = 1e-12


def focal_cls_loss(confidence, assignment: Assignment, alpha: float = 0.25,
                   gamma: float = 2.0) -> Tensor:
    """Binary focal loss, matched queries as targets, the rest as background; mean over queries."""
    p = ad.as_tensor(confidence)
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise ValueError("confidences must lie in [0, 1]")
    n = p.shape[0]
    target = np.zeros(n)
    for i, _ in assignment:
        target[i] = 1.0
    p = ad.clip(p, _P_EPS, 1.0 - _P_EPS)
    q = 1.0 - p
    pos = ad.power(q, gamma) * ad.log(p) * (-alpha * target)
    neg = ad.power(p, gamma) * ad.log(q) * (-(1.0 - alpha) * (1.0 - target))
    return ad.mean(pos + neg)


def point_l1_loss(points, gts, assignment: Assignment) -> Tensor:
    """Mean L1 distance over matched pairs (normalized coordinates); 0 without pairs."""
    pts = ad.as_tensor(points)
    if not assignment:
        return Tensor(0.0)
    pi = np.array([i for i, _ in assignment])
    gj = np.array([j for _, j in assignment])
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)[gj]
    diff = ad.abs(pts[pi] - g)
    return ad.sum(diff) / len(assignment)


def density_loss(predicted, target) -> Tensor:
    """(1/N) sum_i ||D_i - T_i||^2 over N maps stacked on the first axis."""
    pred = ad.as_tensor(predicted)
    tgt = np.asarray(target, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ad.ShapeError("density_loss", f"prediction {pred.shape} vs target {tgt.shape}")
    n = pred.shape[0] if pred.ndim else 1
    return ad.sum(ad.square(pred - tgt)) / n


def total_loss(l_cls: float, l_loc: float, l_dm: float,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    parts = {"l_cls": l_cls, "l_loc": l_loc, "l_dm": l_dm}
    for k, v in parts.items():
        if v < 0:
            raise ValueError(f"{k} must be non-negative, got {v}")
    total = weights.lambda_reg * (l_cls + l_loc) + weights.lambda_dm * l_dm
    return LossBreakdown(float(l_cls), float(l_loc), float(l_dm), float(total))


def weighted_total(l_cls: Tensor, l_loc: Tensor, l_dm: Tensor,
                   weights: LossWeights = LossWeights()) -> Tensor:
    """Differentiable twin of :func:`total_loss` (same evaluation order)."""
    return (l_cls + l_loc) * weights.lambda_reg + l_dm * weights.lambda_dm


def match_clip(preds, gts, weights: LossWeights = LossWeights()) -> Assignment:
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(gts) > len(preds):
        log.warning("%d ground-truth points exceed %d queries; extras stay unmatched",
                    len(gts), len(preds))
    cost = build_cost_matrix(preds.xy, preds.conf, gts, weights)
    return hungarian(cost)


def batch_loss(predictions, densities, gt_points, target_densities,
               weights: LossWeights = LossWeights(), assignments=None):
    """Combined loss over a batch of clips.

    ``predictions``/``gt_points`` are per clip; ``densities`` and
    ``target_densities`` are per clip stacks of T maps. Classification and
    localization terms are averaged over clips, the density term over all
    maps. Returns ``(total tensor, LossBreakdown, assignments)``; pass
    ``assignments`` to hold the matching fixed.
    """
    if assignments is None:
        assignments = [match_clip(p, g, weights) for p, g in zip(predictions, gt_points)]
    n_clips = len(predictions)
    cls_terms = [focal_cls_loss(p.confidence, a, weights.focal_alpha, weights.focal_gamma)
                 for p, a in zip(predictions, assignments)]
    loc_terms = [point_l1_loss(p.points, g, a)
                 for p, g, a in zip(predictions, gt_points, assignments)]
    l_cls = ad.sum(ad.concat([t.reshape(1) for t in cls_terms])) / n_clips
    l_loc = ad.sum(ad.concat([t.reshape(1) for t in loc_terms])) / n_clips
    pred_maps = ad.concat(list(densities), axis=0)
    tgt_maps = np.concatenate([np.asarray(t) for t in target_densities], axis=0)
    l_dm = density_loss(pred_maps, tgt_maps)
    total = weighted_total(l_cls, l_loc, l_dm, weights)
    breakdown = LossBreakdown(l_cls.item(), l_loc.item(), l_dm.item(), total.item())
    return total, breakdown, assignments
