"""Synthetic driving scenarios and their JSON-lines persistence.

Coordinates are metres in an ego-centred frame (ego at the origin at t=0).
Grid and raster arrays are indexed ``[ix, iy]`` with ``x = -R + (ix + 0.5) * cell``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

GENERATOR_VERSION = 1
DATASET_FORMAT = "modwise-dataset"
DATASET_VERSION = 1

ROAD_HALF_WIDTH = 3.5
LANE_MARK_RADIUS = 0.8
EGO_SPEED = 4.0
LANE_POINTS = 5
MAX_EGO_HEADING = math.radians(35.0)


@dataclass(frozen=True)
class Dims:
    H: int = 64
    W: int = 64
    C: int = 2
    A_max: int = 8
    L_max: int = 6
    D: int = 32
    K_modes: int = 3
    T_past: int = 4
    T_fut: int = 6
    T_plan: int = 6
    G: int = 32
    R: float = 25.0
    dt: float = 0.5

    @property
    def cell(self) -> float:
        return 2.0 * self.R / self.G

    @property
    def pixel(self) -> float:
        return 2.0 * self.R / self.H

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Dims":
        return cls(**d)


# One fixed anchor per lane slot; every lane passes through its slot's anchor.
LANE_ANCHORS = np.array([
    [0.0, 0.0],
    [12.5, 12.5],
    [-12.5, 12.5],
    [12.5, -12.5],
    [-12.5, -12.5],
    [-18.75, 0.0],
])


@dataclass
class Scenario:
    seed: int
    sensor: np.ndarray        # (H, W, C) in [0, 1]; channel 0 agents, channel 1 road
    agent_past: np.ndarray    # (A, T_past, 2), t = -T_past .. -1
    agent_now: np.ndarray     # (A, 2), t = 0
    agent_future: np.ndarray  # (A, T_fut, 2), t = 1 .. T_fut
    agent_size: np.ndarray    # (A, 2) length, width
    agent_yaw: np.ndarray     # (A,)
    agent_mask: np.ndarray    # (A,) 1.0 for populated slots
    lanes: np.ndarray         # (L, LANE_POINTS, 2) polylines
    lane_mask: np.ndarray     # (L,)
    map_labels: np.ndarray    # (G, G, 3) drivable / lane / crossing
    ego_gt: np.ndarray        # (T_plan, 2)
    occ_gt: np.ndarray        # (G, G) in {0, 1}

    def array_fields(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name != "seed"]

    def __eq__(self, other):
        if not isinstance(other, Scenario) or self.seed != other.seed:
            return False
        return all(a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (_, a), (_, b) in zip(self.array_fields(), other.array_fields()))


def cell_centers(dims: Dims) -> np.ndarray:
    """(G, G, 2) centres of the BEV grid cells."""
    c = -dims.R + (np.arange(dims.G) + 0.5) * dims.cell
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


def pixel_centers(dims: Dims) -> np.ndarray:
    c = -dims.R + (np.arange(dims.H) + 0.5) * dims.pixel
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


def point_to_cell(p: np.ndarray, dims: Dims) -> np.ndarray:
    idx = np.floor((np.asarray(p) + dims.R) / dims.cell).astype(np.int64)
    return np.clip(idx, 0, dims.G - 1)


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(pts - proj, axis=-1)


def _clip_line(anchor: np.ndarray, u: np.ndarray, R: float) -> tuple[float, float]:
    """Parameter interval of ``anchor + s * u`` inside the square [-R, R]^2."""
    lo, hi = -np.inf, np.inf
    for k in range(2):
        if abs(u[k]) < 1e-12:
            continue
        s1, s2 = (-R - anchor[k]) / u[k], (R - anchor[k]) / u[k]
        lo, hi = max(lo, min(s1, s2)), min(hi, max(s1, s2))
    return lo, hi


def _box_signed_distance(pts: np.ndarray, center, yaw: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    d = pts - center
    local = np.stack([d[..., 0] * c + d[..., 1] * s, -d[..., 0] * s + d[..., 1] * c], axis=-1)
    q = np.abs(local) - np.array([length / 2, width / 2])
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def rasterize_occupancy(future: np.ndarray, mask: np.ndarray, dims: Dims) -> np.ndarray:
    occ = np.zeros((dims.G, dims.G))
    for a in np.flatnonzero(mask):
        idx = point_to_cell(future[a], dims)
        occ[idx[:, 0], idx[:, 1]] = 1.0
    return occ


def map_labels_from_lanes(lanes: np.ndarray, lane_mask: np.ndarray, pts: np.ndarray) -> np.ndarray:
    dist = np.stack([
        np.min([_segment_distance(pts, lane[i], lane[i + 1]) for i in range(len(lane) - 1)], axis=0)
        for lane, m in zip(lanes, lane_mask) if m > 0
    ])
    drivable = (dist.min(axis=0) <= ROAD_HALF_WIDTH)
    lane = (dist.min(axis=0) <= LANE_MARK_RADIUS)
    crossing = (np.sum(dist <= ROAD_HALF_WIDTH, axis=0) >= 2)
    return np.stack([drivable, lane, crossing], axis=-1).astype(np.float64), dist


def generate_scenario(seed: int, dims: Dims = Dims()) -> Scenario:
    """Sample one scenario; the result is a pure function of ``(seed, dims)``."""
    rng = np.random.default_rng([GENERATOR_VERSION, seed])
    R, A, L = dims.R, dims.A_max, dims.L_max

    # lanes: slot 0 is the ego lane through the origin
    n_lanes = int(rng.integers(2, L + 1))
    slots = np.concatenate([[0], np.sort(rng.choice(np.arange(1, L), n_lanes - 1, replace=False))])
    lane_mask = np.zeros(L)
    lane_mask[slots] = 1.0
    lanes = np.zeros((L, LANE_POINTS, 2))
    lane_dir = np.zeros((L, 2))
    lane_span = np.zeros((L, 2))
    for l in slots:
        theta = rng.uniform(-MAX_EGO_HEADING, MAX_EGO_HEADING) if l == 0 else rng.uniform(0.0, math.pi)
        u = np.array([math.cos(theta), math.sin(theta)])
        lo, hi = _clip_line(LANE_ANCHORS[l], u, R)
        s = np.linspace(lo, hi, LANE_POINTS)
        lanes[l] = np.clip(LANE_ANCHORS[l] + s[:, None] * u, -R, R)
        lane_dir[l], lane_span[l] = u, (lo, hi)

    ego_gt = (np.arange(1, dims.T_plan + 1) * dims.dt * EGO_SPEED)[:, None] * lane_dir[0]
    ego_track = np.vstack([np.zeros((1, 2)), ego_gt])

    # agents travel along the non-ego lanes at constant speed with bounded jitter
    n_agents = int(rng.integers(2, A + 1))
    agent_slots = np.sort(rng.choice(A, n_agents, replace=False))
    agent_mask = np.zeros(A)
    past = np.zeros((A, dims.T_past, 2))
    now = np.zeros((A, 2))
    future = np.zeros((A, dims.T_fut, 2))
    size = np.zeros((A, 2))
    yaw = np.zeros(A)
    t_rel = np.arange(-dims.T_past, dims.T_fut + 1) * dims.dt
    for a in agent_slots:
        for _ in range(100):
            l = int(rng.choice(slots[1:]))
            direction = lane_dir[l] * rng.choice([-1.0, 1.0])
            speed = rng.uniform(1.0, 5.0)
            lo, hi = lane_span[l]
            # keep the whole track inside the lane segment, 2 m margin
            sign = float(direction @ lane_dir[l])
            need_back, need_fwd = -t_rel[0] * speed, t_rel[-1] * speed
            if sign > 0:
                s_lo, s_hi = lo + 2 + need_back, hi - 2 - need_fwd
            else:
                s_lo, s_hi = lo + 2 + need_fwd, hi - 2 - need_back
            if s_hi <= s_lo:
                continue
            s0 = rng.uniform(s_lo, s_hi)
            normal = np.array([-lane_dir[l][1], lane_dir[l][0]])
            base = LANE_ANCHORS[l] + s0 * lane_dir[l] + rng.uniform(-1.0, 1.0) * normal
            track = base + t_rel[:, None] * speed * direction
            track = track + rng.uniform(-0.1, 0.1, size=track.shape) * (t_rel != 0)[:, None]
            track = np.clip(track, -R, R)
            # no agent within 5 m of the ego at any shared time step
            d_ego = np.linalg.norm(track[dims.T_past:] - ego_track, axis=-1)
            if d_ego.min() < 5.0:
                continue
            agent_mask[a] = 1.0
            past[a] = track[: dims.T_past]
            now[a] = track[dims.T_past]
            future[a] = track[dims.T_past + 1:]
            size[a] = rng.uniform(3.5, 5.0), rng.uniform(1.6, 2.1)
            yaw[a] = math.atan2(direction[1], direction[0])
            break

    labels, _ = map_labels_from_lanes(lanes, lane_mask, cell_centers(dims))
    occ_gt = rasterize_occupancy(future, agent_mask, dims)
    sensor = render_sensor(lanes, lane_mask, now, size, yaw, agent_mask, dims)
    return Scenario(
        seed=int(seed), sensor=sensor, agent_past=past, agent_now=now, agent_future=future,
        agent_size=size, agent_yaw=yaw, agent_mask=agent_mask, lanes=lanes, lane_mask=lane_mask,
        map_labels=labels, ego_gt=ego_gt, occ_gt=occ_gt,
    )


def render_sensor(lanes, lane_mask, now, size, yaw, agent_mask, dims: Dims) -> np.ndarray:
    pts = pixel_centers(dims)
    px = dims.pixel
    agents = np.zeros((dims.H, dims.W))
    for a in np.flatnonzero(agent_mask):
        sd = _box_signed_distance(pts, now[a], yaw[a], size[a, 0], size[a, 1])
        agents = np.maximum(agents, np.clip(0.5 - sd / px, 0.0, 1.0))
    _, dist = map_labels_from_lanes(lanes, lane_mask, pts)
    n_road = np.sum(dist <= ROAD_HALF_WIDTH, axis=0)
    ridge = np.clip(1.0 - dist.min(axis=0) / 1.0, 0.0, 1.0)
    road = np.clip(0.35 * n_road + 0.3 * ridge, 0.0, 1.0)
    return np.stack([agents, road], axis=-1)


def generate_dataset(seeds, dims: Dims = Dims()) -> list[Scenario]:
    return [generate_scenario(int(s), dims) for s in seeds]


# ---------------------------------------------------------------------------
# persistence


class DatasetError(ValueError):
    pass


def save_dataset(scenarios, path, global_seed: int = 0, dims: Dims = Dims()) -> None:
    seeds = [s.seed for s in scenarios]
    if len(set(seeds)) != len(seeds):
        raise DatasetError("scenario seeds must be unique within a dataset file")
    header = {
        "format": DATASET_FORMAT, "version": DATASET_VERSION,
        "generator_version": GENERATOR_VERSION, "global_seed": int(global_seed),
        "dims": dims.to_dict(), "count": len(scenarios),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in scenarios:
            rec = {"seed": s.seed}
            for name, arr in s.array_fields():
                rec[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            fh.write(json.dumps(rec) + "\n")


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line 1: malformed header") from exc
    if header.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: not a dataset file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path}: dataset version {header.get('version')} != {DATASET_VERSION}")
    return header


def load_dataset(path) -> tuple[dict, list[Scenario]]:
    """Return ``(header, scenarios)``; any malformed line raises :class:`DatasetError`."""
    header = read_header(path)
    names = [f.name for f in fields(Scenario) if f.name != "seed"]
    out: list[Scenario] = []
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    body = lines[1:]
    if body and body[-1] == "":
        body = body[:-1]
    else:
        # no trailing newline: the final record was cut short
        if body:
            raise DatasetError(f"{path}: truncated after line {len(body)} (last good line {len(body)})")
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
            arrays = {n: np.array(rec[n]["data"], dtype=np.float64).reshape(rec[n]["shape"]) for n in names}
            out.append(Scenario(seed=int(rec["seed"]), **arrays))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed record (last good line {lineno - 1})") from exc
    if "count" in header and header["count"] != len(out):
        raise DatasetError(f"{path}: expected {header['count']} records, found {len(out)} "
                           f"(last good line {len(out) + 1})")
    seeds = [s.seed for s in out]
    if len(set(seeds)) != len(seeds):
        raise DatasetError(f"{path}: duplicate scenario seeds")
    return header, out


def check_dims(header: dict, dims: Dims) -> None:
    """Refuse a dataset whose dimension constants disagree with ``dims``."""
    got = header.get("dims")
    if got != dims.to_dict():
        diff = {k: (got.get(k) if got else None, v) for k, v in dims.to_dict().items()
                if not got or got.get(k) != v}
        raise DatasetError(f"dataset dimension constants disagree with stack: {diff}")
