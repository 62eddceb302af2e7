"""Five-task evaluation: tracking, map, motion, occupancy and planning."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .scenario import Dims, Scenario, cell_centers

HORIZONS = (1.0, 2.0, 3.0)


@dataclass(frozen=True)
class Thresholds:
    miss: float = 2.0
    match: float = 2.0
    collision: float = 0.5
    binarize: float = 0.5


@dataclass
class MetricsReport:
    track_recall: float
    track_ids: float
    map_iou_drivable: float
    map_iou_lanes: float
    map_iou_crossing: float
    min_ade: float | None
    min_fde: float | None
    miss_rate: float | None
    occ_iou_near: float
    occ_iou_far: float
    plan_l2_1s: float
    plan_l2_2s: float
    plan_l2_3s: float
    plan_l2_avg: float
    collision_rate: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# columns that are fractions in [0, 1]
FRACTIONS = ("track_recall", "map_iou_drivable", "map_iou_lanes", "map_iou_crossing", "miss_rate",
             "occ_iou_near", "occ_iou_far", "collision_rate")


@dataclass
class MotionErrors:
    min_ade: float | None
    min_fde: float | None
    miss_rate: float | None

    @property
    def empty(self) -> bool:
        return self.min_ade is None


def motion_errors(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None,
                  miss_threshold: float = 2.0) -> MotionErrors:
    """Best-of-K displacement errors.

    Args:
        pred: (A, K, T, 2) predicted futures.
        gt: (A, T, 2) ground-truth futures.
        mask: (A,) presence flags; all agents count when omitted.

    Returns:
        Per-agent minimum ADE / FDE over modes, averaged over present agents,
        and the fraction of agents whose minimum FDE exceeds ``miss_threshold``.
        Empty (all ``None``) when no agent is present.
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    keep = np.ones(len(gt), bool) if mask is None else np.asarray(mask) > 0
    if not keep.any():
        return MotionErrors(None, None, None)
    dist = np.linalg.norm(pred[keep] - gt[keep][:, None], axis=-1)  # (A, K, T)
    ade = dist.mean(axis=-1).min(axis=-1)
    fde = dist[..., -1].min(axis=-1)
    return MotionErrors(float(ade.mean()), float(fde.mean()), float(np.mean(fde > miss_threshold)))


def grid_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of ``pred >= threshold`` against a binary ``gt``; 1.0 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"grid_iou: shapes {pred.shape} and {gt.shape} differ")
    p = pred >= threshold
    g = gt > 0.5
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def greedy_match(pred: np.ndarray, gt: np.ndarray, radius: float) -> list[tuple[int, int]]:
    """Closest-first one-to-one matching of gt rows to pred rows within ``radius``."""
    if len(pred) == 0 or len(gt) == 0:
        return []
    d = np.linalg.norm(np.asarray(gt)[:, None] - np.asarray(pred)[None], axis=-1)
    gi, pi = np.nonzero(d <= radius)
    order = np.lexsort((pi, gi, d[gi, pi]))
    used_g, used_p, out = set(), set(), []
    for k in order:
        g, p = int(gi[k]), int(pi[k])
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        out.append((g, p))
    return out


def track_metrics(pred_frames, gt_frames, match_radius: float = 2.0) -> tuple[float, int]:
    """Recall and identity switches over aligned frames.

    Each frame is a ``(positions (n, 2), ids (n,))`` pair. A switch is counted
    whenever a ground-truth object is matched to a different predicted id than
    at its previous match.
    """
    if len(pred_frames) != len(gt_frames):
        raise ValueError("pred and gt must have the same number of frames")
    matched = total = switches = 0
    last: dict = {}
    for (ppos, pids), (gpos, gids) in zip(pred_frames, gt_frames):
        ppos, gpos = np.asarray(ppos, float).reshape(-1, 2), np.asarray(gpos, float).reshape(-1, 2)
        total += len(gpos)
        for g, p in greedy_match(ppos, gpos, match_radius):
            matched += 1
            gid, pid = gids[g], pids[p]
            if gid in last and last[gid] != pid:
                switches += 1
            last[gid] = pid
    return (matched / total if total else 0.0), switches


def horizon_indices(n_steps: int, dt: float) -> list[int]:
    times = (np.arange(n_steps) + 1) * dt
    return [int(np.argmin(np.abs(times - h))) for h in HORIZONS]


def in_box(points: np.ndarray, center: np.ndarray, yaw: float, length: float, width: float,
           inflate: float) -> np.ndarray:
    """Closed point-in-rotated-rectangle test."""
    c, s = np.cos(yaw), np.sin(yaw)
    d = np.asarray(points, float) - center
    lx = d[..., 0] * c + d[..., 1] * s
    ly = -d[..., 0] * s + d[..., 1] * c
    return (np.abs(lx) <= length / 2 + inflate) & (np.abs(ly) <= width / 2 + inflate)


def plan_metrics(plan, ego_gt, agent_future, agent_size, agent_yaw, agent_mask,
                 collision_radius: float = 0.5, dt: float = 0.5) -> tuple[dict[str, float], float]:
    """Planning L2 at 1/2/3 s and collision rate.

    Inputs carry a leading scenario axis: plan/ego_gt (N, T, 2), agent_future
    (N, A, T, 2), agent_size (N, A, 2), agent_yaw and agent_mask (N, A). A
    single scenario without the leading axis is also accepted. L2 values are
    averaged over scenarios; the collision rate is the fraction of scenarios
    with at least one colliding step.
    """
    plan = np.asarray(plan, float)
    single = plan.ndim == 2
    arrs = [plan, ego_gt, agent_future, agent_size, agent_yaw, agent_mask]
    if single:
        arrs = [np.asarray(a)[None] for a in arrs]
    plan, ego_gt, fut, size, yaw, mask = (np.asarray(a, float) for a in arrs)
    err = np.linalg.norm(plan - ego_gt, axis=-1)  # (N, T)
    idx = horizon_indices(plan.shape[1], dt)
    l2 = {f"plan_l2_{int(h)}s": float(err[:, i].mean()) for h, i in zip(HORIZONS, idx)}
    l2["plan_l2_avg"] = (l2["plan_l2_1s"] + l2["plan_l2_2s"] + l2["plan_l2_3s"]) / 3.0
    hits = np.zeros(len(plan), bool)
    for n in range(len(plan)):
        for a in np.flatnonzero(mask[n] > 0):
            # box centres move with the agent, so waypoint t is tested against step t
            inside = in_box(plan[n], fut[n, a], yaw[n, a], size[n, a, 0], size[n, a, 1], collision_radius)
            if inside.any():
                hits[n] = True
                break
    return l2, float(hits.mean())


def near_mask(dims: Dims) -> np.ndarray:
    return np.linalg.norm(cell_centers(dims), axis=-1) <= dims.R / 2.0


def scenario_metrics(outputs: dict[str, np.ndarray], scenario: Scenario, dims: Dims,
                     thresholds: Thresholds = Thresholds()) -> MetricsReport:
    """Evaluate one scenario's decoded outputs (no batch axis) against its ground truth.

    ``outputs`` holds ``track_pos`` (A, 2, 2) for frames t=-1 and t=0,
    ``map_prob`` (G, G, 3), ``futures`` (A, K, T, 2), ``occ_pred`` (G, G) and
    ``plan`` (T, 2), all in metres.
    """
    s = scenario
    present = np.flatnonzero(s.agent_mask > 0)
    tp = outputs["track_pos"]
    pred_frames = [(tp[present, 0], present), (tp[present, 1], present)]
    gt_frames = [(s.agent_past[present, -1], present), (s.agent_now[present], present)]
    recall, ids = track_metrics(pred_frames, gt_frames, thresholds.match)

    ious = [grid_iou(outputs["map_prob"][..., c], s.map_labels[..., c], thresholds.binarize) for c in range(3)]
    me = motion_errors(outputs["futures"], s.agent_future, s.agent_mask, thresholds.miss)
    near = near_mask(dims)
    occ_n = grid_iou(outputs["occ_pred"][near], s.occ_gt[near], thresholds.binarize)
    occ_f = grid_iou(outputs["occ_pred"][~near], s.occ_gt[~near], thresholds.binarize)
    l2, col = plan_metrics(outputs["plan"], s.ego_gt, s.agent_future, s.agent_size, s.agent_yaw,
                           s.agent_mask, thresholds.collision, dims.dt)
    return MetricsReport(
        track_recall=recall, track_ids=float(ids),
        map_iou_drivable=ious[0], map_iou_lanes=ious[1], map_iou_crossing=ious[2],
        min_ade=me.min_ade, min_fde=me.min_fde, miss_rate=me.miss_rate,
        occ_iou_near=occ_n, occ_iou_far=occ_f,
        collision_rate=col, **l2,
    )


def aggregate(rows: list[MetricsReport]) -> MetricsReport:
    """Arithmetic mean of every column, except identity switches which are summed.

    Motion columns skip scenarios without agents (``None``); a column with no
    values at all stays ``None``.
    """
    if not rows:
        raise ValueError("no rows to aggregate")
    out = {}
    for col in MetricsReport.columns():
        vals = [getattr(r, col) for r in rows if getattr(r, col) is not None]
        if not vals:
            out[col] = None
        else:
            out[col] = float(np.sum(vals)) if col == "track_ids" else float(np.mean(vals))
    # keep the horizon identity exact after averaging
    out["plan_l2_avg"] = (out["plan_l2_1s"] + out["plan_l2_2s"] + out["plan_l2_3s"]) / 3.0
    return MetricsReport(**out)
