"""A five-stage differentiable toy driving stack.

Staged inference ``Q_i = M_i(Q_{i-1})`` over the interfaces::

    image --track--> agents --map--> map queries --motion--> motion states + ego intention
          --occupancy--> occupancy grid --plan--> ego waypoints

Every stage body is a small tanh perceptron over its interface tensors. Noise
sites (image, agents, map, motion, ego) are added to an interface before any
consumer reads it, including the task head that decodes that interface.
Positions inside the network are in units of the scene radius; everything a
:class:`PipelineState` exposes is in metres.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Tensor
from .scenario import LANE_ANCHORS, Dims, Scenario

STAGES = ("track", "map", "motion", "occupancy", "plan")
SITES = ("image", "agents", "map", "motion", "ego")

PATCH = 8
HIDDEN = 64
OFFSET_SCALE = 5.0  # metres per unit of head output
OCC_EDGE = 0.15     # soft cell-edge width, in cells
LOSS_UNIT = 2.0     # position errors enter the losses in units of the 2 m miss / match radius
WEIGHTS_FORMAT = "modwise-weights"
WEIGHTS_VERSION = 1


class PipelineError(RuntimeError):
    pass


@dataclass
class ModuleParams:
    stage: str
    weights: dict[str, np.ndarray]
    dims: dict[str, int]

    def freeze(self) -> "ModuleParams":
        for w in self.weights.values():
            w.flags.writeable = False
        return self

    @property
    def frozen(self) -> bool:
        return all(not w.flags.writeable for w in self.weights.values())


@dataclass
class Stack:
    dims: Dims
    params: dict[str, ModuleParams]
    seed: int
    interface_std: dict[str, float] = field(default_factory=dict)

    def freeze(self) -> "Stack":
        for p in self.params.values():
            p.freeze()
        return self


def site_shapes(dims: Dims) -> dict[str, tuple[int, ...]]:
    """Per-scenario shape of every noise site."""
    return {
        "image": (dims.H, dims.W, dims.C),
        "agents": (dims.A_max, dims.D),
        "map": (dims.L_max, dims.D),
        "motion": (dims.A_max, dims.D),
        "ego": (dims.D,),
    }


def _patch_dim(dims: Dims) -> int:
    return PATCH * PATCH * dims.C


def _n_patches(dims: Dims) -> int:
    return (dims.H // PATCH) * (dims.W // PATCH)


def stage_dims(dims: Dims) -> dict[str, dict[str, int]]:
    D = dims.D
    cells_per_patch = (dims.G // (dims.H // PATCH)) ** 2
    return {
        "track": {"in_patch": _patch_dim(dims), "in_past": 9, "hidden": HIDDEN, "out": D, "head": 4},
        "map": {"in": 4 * D, "hidden": HIDDEN, "out": D, "seg": cells_per_patch * 3,
                "ctx": dims.L_max * D},
        "motion": {"in": 2 * D, "hidden": HIDDEN, "out": D, "futures": dims.K_modes * dims.T_fut * 2},
        "occupancy": {"in": D, "hidden": HIDDEN // 2, "out": 1},
        "plan": {"in": 2 * D, "hidden": HIDDEN, "out": dims.T_plan * 2},
    }


def _weight_shapes(dims: Dims) -> dict[str, dict[str, tuple[int, ...]]]:
    sd = stage_dims(dims)
    D, H = dims.D, HIDDEN
    t, m, mo, o, p = (sd[s] for s in STAGES)
    return {
        "track": {
            "pe_w": (t["in_patch"], D), "pe_b": (D,),
            "w1": (D + t["in_past"], H), "b1": (H,), "w2": (H, D), "b2": (D,),
            "head_w": (D, t["head"]), "head_b": (t["head"],),
        },
        "map": {
            "w1": (m["in"], H), "b1": (H,), "w2": (H, D), "b2": (D,),
            "seg_wa": (D, H), "seg_wb": (m["ctx"], H), "seg_b": (H,),
            "seg_wc": (H, m["seg"]), "seg_bc": (m["seg"],),
        },
        "motion": {
            "w1": (mo["in"], H), "b1": (H,), "w2": (H, D), "b2": (D,),
            "fut_w": (D, mo["futures"]), "fut_b": (mo["futures"],),
            "ego_w1": (2 * D, H), "ego_b1": (H,), "ego_w2": (H, D), "ego_b2": (D,),
        },
        "occupancy": {
            "w1": (D, o["hidden"]), "b1": (o["hidden"],), "w2": (o["hidden"], 1), "b2": (1,),
            "scale": (1,), "bias": (1,),
        },
        "plan": {"w1": (p["in"], H), "b1": (H,), "w2": (H, p["out"]), "b2": (p["out"],)},
    }


def init_stack(seed: int = 0, dims: Dims = Dims()) -> Stack:
    rng = np.random.default_rng(seed)
    params = {}
    for stage, shapes in _weight_shapes(dims).items():
        w = {}
        for name, shape in shapes.items():
            if len(shape) == 1:
                w[name] = np.zeros(shape)
            else:
                w[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        if stage == "occupancy":
            w["scale"] = np.array([8.0])
            w["bias"] = np.array([-4.0])
        params[stage] = ModuleParams(stage, w, stage_dims(dims)[stage])
    return Stack(dims, params, seed)


def zero_params(stage: str, dims: Dims = Dims()) -> ModuleParams:
    shapes = _weight_shapes(dims)[stage]
    return ModuleParams(stage, {k: np.zeros(s) for k, s in shapes.items()}, stage_dims(dims)[stage])


# ---------------------------------------------------------------------------
# batched scenario constants


@dataclass
class Batch:
    """Scenario arrays stacked along a leading batch axis, plus fixed geometry."""

    dims: Dims
    scenarios: list[Scenario]
    sensor: np.ndarray
    past_feat: np.ndarray
    p_last: np.ndarray
    ref_weights: np.ndarray
    agent_mask: np.ndarray
    present: np.ndarray

    @property
    def size(self) -> int:
        return len(self.scenarios)

    def stacked(self, name: str) -> np.ndarray:
        return np.stack([getattr(s, name) for s in self.scenarios])


def _bilinear_patch_weights(p: np.ndarray, dims: Dims) -> np.ndarray:
    n = dims.H // PATCH
    size = 2.0 * dims.R / n
    f = (p + dims.R) / size - 0.5
    i0 = np.clip(np.floor(f), 0, n - 2).astype(int)
    t = np.clip(f - i0, 0.0, 1.0)
    w = np.zeros(p.shape[:-1] + (n * n,))
    for dx in (0, 1):
        for dy in (0, 1):
            wx = t[..., 0] if dx else 1 - t[..., 0]
            wy = t[..., 1] if dy else 1 - t[..., 1]
            idx = (i0[..., 0] + dx) * n + (i0[..., 1] + dy)
            np.put_along_axis(w, idx[..., None], (wx * wy)[..., None], axis=-1)
    return w


def make_batch(scenarios: Sequence[Scenario], dims: Dims = Dims()) -> Batch:
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("empty batch")
    past = np.stack([s.agent_past for s in scenarios])
    mask = np.stack([s.agent_mask for s in scenarios])
    p_last = past[:, :, -1]
    rel = (past[:, :, :-1] - p_last[:, :, None]) / OFFSET_SCALE
    past_feat = np.concatenate([p_last / dims.R, rel.reshape(rel.shape[0], rel.shape[1], -1), mask[..., None]], -1)
    past_feat = past_feat * mask[..., None]
    return Batch(
        dims=dims, scenarios=scenarios,
        sensor=np.stack([s.sensor for s in scenarios]),
        past_feat=past_feat, p_last=p_last,
        ref_weights=_bilinear_patch_weights(p_last, dims) * mask[..., None],
        agent_mask=mask, present=np.flatnonzero(mask.reshape(-1)),
    )


def _anchor_patch_index(dims: Dims) -> np.ndarray:
    """(L_max, 4) patch indices around each lane anchor."""
    n = dims.H // PATCH
    size = 2.0 * dims.R / n
    g = np.rint((LANE_ANCHORS + dims.R) / size).astype(int)
    out = []
    for gx, gy in g:
        out.append([(px * n + py) for px in (gx - 1, gx) for py in (gy - 1, gy)])
    return np.array(out)[: dims.L_max]


# ---------------------------------------------------------------------------
# stage bodies


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = dc.matmul(x, w)
    return dc.add(y, dc.broadcast_to(b, y.shape))


def _mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return _linear(dc.tanh(_linear(x, w1, b1)), w2, b2)


def _check_dims(stage: str, x: Tensor, width: int) -> None:
    if x.shape[-1] != width:
        raise dc.ShapeError(f"stage {stage}: input width {x.shape[-1]} does not match declared {width} "
                            f"(input shape {x.shape})")


def patchify(image: Tensor, dims: Dims) -> Tensor:
    B = image.shape[0]
    n = dims.H // PATCH
    x = dc.reshape(image, (B, n, PATCH, n, PATCH, dims.C))
    x = dc.permute(x, (0, 1, 3, 2, 4, 5))
    return dc.reshape(x, (B, n * n, PATCH * PATCH * dims.C))


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 restricted to ``mask`` rows; returns (B, 1, D)."""
    w = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return dc.matmul(w[:, None, :], x)


def _add_noise(q: Tensor, noise: Mapping | None, site: str) -> Tensor:
    if noise is None or site not in noise or noise[site] is None:
        return q
    n = noise[site]
    if not isinstance(n, Tensor):
        n = q.graph.constant(n)
    if n.shape != q.shape:
        if (1,) + n.shape == q.shape:
            n = dc.reshape(n, q.shape)
        else:
            raise dc.ShapeError(f"noise site {site}: shape {n.shape} does not match interface {q.shape}")
    return dc.add(q, n)


def track_stage(image: Tensor, batch: Batch, w: Mapping[str, Tensor]):
    """Image -> (patch embedding, agent queries Q_A)."""
    dims = batch.dims
    patches = patchify(image, dims)
    _check_dims("track", patches, w["pe_w"].shape[0])
    emb = dc.tanh(_linear(patches, w["pe_w"], w["pe_b"]))
    local = dc.matmul(batch.ref_weights, emb)
    x = dc.concat([local, image.graph.constant(batch.past_feat)], axis=-1)
    _check_dims("track", x, w["w1"].shape[0])
    q_agents = _mlp(x, w["w1"], w["b1"], w["w2"], w["b2"])
    return emb, q_agents


def track_head(q_agents: Tensor, batch: Batch, w) -> Tensor:
    """Decoded positions (B, A, 2 frames [t=-1, t=0], 2) in metres."""
    B, A = q_agents.shape[:2]
    off = dc.reshape(_linear(q_agents, w["head_w"], w["head_b"]), (B, A, 2, 2))
    base = np.repeat(batch.p_last[:, :, None, :], 2, axis=2)
    return dc.add(dc.mul(off, OFFSET_SCALE), base)


def map_stage(emb: Tensor, dims: Dims, w) -> Tensor:
    """Patch embedding -> lane queries Q_M (B, L, D)."""
    idx = _anchor_patch_index(dims)
    corners = [dc.take(emb, idx[:, k], axis=1) for k in range(4)]
    x = dc.concat(corners, axis=-1)
    _check_dims("map", x, w["w1"].shape[0])
    return _mlp(x, w["w1"], w["b1"], w["w2"], w["b2"])


def map_head(emb: Tensor, q_map: Tensor, dims: Dims, w) -> Tensor:
    """Per-cell class probabilities (B, G, G, 3)."""
    B, P, D = emb.shape
    L = q_map.shape[1]
    ctx = dc.matmul(dc.reshape(q_map, (B, 1, L * q_map.shape[2])), w["seg_wb"])  # every lane query, (B, 1, H)
    h = dc.add(dc.matmul(emb, w["seg_wa"]), dc.broadcast_to(ctx, (B, P, ctx.shape[2])))
    h = dc.tanh(dc.add(h, dc.broadcast_to(w["seg_b"], h.shape)))
    logits = _linear(h, w["seg_wc"], w["seg_bc"])
    n = dims.H // PATCH
    s = dims.G // n
    x = dc.reshape(logits, (B, n, n, s, s, 3))
    x = dc.permute(x, (0, 1, 3, 2, 4, 5))
    return dc.sigmoid(dc.reshape(x, (B, dims.G, dims.G, 3)))


def motion_stage(q_agents: Tensor, q_map: Tensor, batch: Batch, w):
    """Agent and map queries -> (motion states Q_T, ego intention Q_E)."""
    B, A, D = q_agents.shape
    ctx = dc.broadcast_to(dc.mean(q_map, axis=1, keepdims=True), (B, A, D))
    x = dc.concat([q_agents, ctx], axis=-1)
    _check_dims("motion", x, w["w1"].shape[0])
    q_motion = _mlp(x, w["w1"], w["b1"], w["w2"], w["b2"])
    ego_lane = dc.take(q_map, [0], axis=1)
    pooled = _masked_mean(q_agents, batch.agent_mask)
    e = dc.concat([ego_lane, pooled], axis=-1)
    q_ego = dc.reshape(_mlp(e, w["ego_w1"], w["ego_b1"], w["ego_w2"], w["ego_b2"]), (B, D))
    return q_motion, q_ego


def motion_head(q_motion: Tensor, now: Tensor, dims: Dims, w) -> Tensor:
    """Multi-modal futures (B, A, K, T, 2) in metres, anchored at the tracked position."""
    B, A, _ = q_motion.shape
    shape = (B, A, dims.K_modes, dims.T_fut, 2)
    off = dc.reshape(_linear(q_motion, w["fut_w"], w["fut_b"]), shape)
    anchor = dc.broadcast_to(dc.reshape(now, (B, A, 1, 1, 2)), shape)
    return dc.add(dc.mul(off, OFFSET_SCALE), anchor)


def occupancy_stage(q_motion: Tensor, futures: Tensor, batch: Batch, w) -> Tensor:
    """Soft-rasterise mode-averaged futures, gated per agent. Returns (B, G, G)."""
    dims = batch.dims
    B, A, K, T, _ = futures.shape
    _check_dims("occupancy", q_motion, w["w1"].shape[0])
    gate = dc.sigmoid(_mlp(q_motion, w["w1"], w["b1"], w["w2"], w["b2"]))  # (B, A, 1)
    gate = dc.mul(gate, batch.agent_mask[..., None])
    gate = dc.reshape(dc.broadcast_to(gate, (B, A, T)), (B, 1, A * T))
    pts = dc.reshape(dc.mean(futures, axis=2), (B, A * T, 2))
    # the cell indicator is separable: kernel[ix, iy, j] = kx[ix, j] * ky[iy, j]
    centers = -dims.R + (np.arange(dims.G) + 0.5) * dims.cell
    half = dims.cell / 2.0
    steep = 1.0 / (OCC_EDGE * dims.cell)
    axis_k = []
    for k in range(2):
        p = dc.broadcast_to(dc.reshape(dc.take(pts, [k], axis=2), (B, 1, A * T)), (B, dims.G, A * T))
        d = dc.sub(p, np.broadcast_to(centers[:, None], (B, dims.G, A * T)))
        axis_k.append(dc.mul(dc.sigmoid(dc.mul(dc.add(d, half), steep)),
                             dc.sigmoid(dc.mul(dc.sub(half, d), steep))))
    kx = dc.mul(axis_k[0], dc.broadcast_to(gate, axis_k[0].shape))
    mass = dc.matmul(kx, dc.transpose(axis_k[1]))  # (B, G, G)
    logit = dc.add(dc.mul(mass, dc.broadcast_to(w["scale"], mass.shape)), dc.broadcast_to(w["bias"], mass.shape))
    return dc.sigmoid(logit)


def plan_stage(q_ego: Tensor, q_motion: Tensor, batch: Batch, w) -> Tensor:
    """Ego intention + pooled motion states -> waypoints (B, T_plan, 2) in metres."""
    dims = batch.dims
    B, D = q_ego.shape
    pooled = _masked_mean(q_motion, batch.agent_mask)
    x = dc.concat([dc.reshape(q_ego, (B, 1, D)), pooled], axis=-1)
    _check_dims("plan", x, w["w1"].shape[0])
    out = dc.reshape(_mlp(x, w["w1"], w["b1"], w["w2"], w["b2"]), (B, dims.T_plan, 2))
    return dc.clamp(dc.mul(out, OFFSET_SCALE), -dims.R, dims.R)


# ---------------------------------------------------------------------------


def _weights_in_graph(g: Graph, params: ModuleParams, requires_grad: bool) -> dict[str, Tensor]:
    return {k: g.leaf(v, requires_grad=requires_grad) for k, v in params.weights.items()}


def run_module(stage: str, inputs: Mapping, params: ModuleParams, batch: Batch, graph: Graph | None = None):
    """Run one stage body on its interface inputs and return its interface outputs.

    ``inputs`` maps names to arrays or tensors: ``image`` for track;
    ``emb`` for map; ``q_agents`` and ``q_map`` for motion; ``q_motion`` and
    ``futures`` for occupancy; ``q_ego`` and ``q_motion`` for plan.
    """
    if stage not in STAGES or params.stage != stage:
        raise ValueError(f"stage {stage!r} does not match params for {params.stage!r}")
    g = graph
    if g is None:
        for v in inputs.values():
            if isinstance(v, Tensor):
                g = v.graph
                break
        else:
            g = Graph()
    x = {k: v if isinstance(v, Tensor) else g.constant(v) for k, v in inputs.items()}
    w = _weights_in_graph(g, params, False)
    if stage == "track":
        return track_stage(x["image"], batch, w)
    if stage == "map":
        return map_stage(x["emb"], batch.dims, w)
    if stage == "motion":
        return motion_stage(x["q_agents"], x["q_map"], batch, w)
    if stage == "occupancy":
        return occupancy_stage(x["q_motion"], x["futures"], batch, w)
    return plan_stage(x["q_ego"], x["q_motion"], batch, w)


@dataclass
class PipelineState:
    """Interface values of one forward pass.

    ``q_*`` are the values each stage produced, before any noise is added.
    The decoded task outputs are computed from the noisy interfaces.
    """

    graph: Graph
    batch: Batch
    q_image: Tensor
    q_agents: Tensor
    q_map: Tensor
    q_motion: Tensor
    q_ego: Tensor
    track_pos: Tensor
    map_prob: Tensor
    futures: Tensor
    occ_pred: Tensor
    plan: Tensor
    weights: dict[str, dict[str, Tensor]] = field(default_factory=dict)

    def interfaces(self) -> dict[str, np.ndarray]:
        return {"image": self.q_image.data, "agents": self.q_agents.data, "map": self.q_map.data,
                "motion": self.q_motion.data, "ego": self.q_ego.data}

    def outputs(self) -> dict[str, np.ndarray]:
        return {"track_pos": self.track_pos.data, "map_prob": self.map_prob.data, "futures": self.futures.data,
                "occ_pred": self.occ_pred.data, "plan": self.plan.data}


def run_pipeline(batch: Batch | Scenario | Sequence[Scenario], stack: Stack, noise: Mapping | None = None,
                 graph: Graph | None = None, train: bool = False) -> PipelineState:
    """Forward pass through all five stages, injecting ``noise`` per site.

    ``noise`` maps site names to arrays or tensors shaped like the interface
    (with or without the leading batch axis when the batch holds one scenario).
    """
    if not isinstance(batch, Batch):
        batch = make_batch(batch, stack.dims)
    g = graph or Graph()
    w = {s: _weights_in_graph(g, stack.params[s], train) for s in STAGES}
    dims = batch.dims

    def guarded(name, fn, *args):
        try:
            return fn(*args)
        except dc.NonFiniteError as exc:
            raise PipelineError(f"stage {name}: non-finite intermediate ({exc})") from exc

    q_image = g.constant(batch.sensor)
    image = _add_noise(q_image, noise, "image")
    emb, q_agents = guarded("track", track_stage, image, batch, w["track"])
    agents = _add_noise(q_agents, noise, "agents")
    track_pos = guarded("track", track_head, agents, batch, w["track"])
    q_map = guarded("map", map_stage, emb, dims, w["map"])
    lanes = _add_noise(q_map, noise, "map")
    map_prob = guarded("map", map_head, emb, lanes, dims, w["map"])
    q_motion, q_ego = guarded("motion", motion_stage, agents, lanes, batch, w["motion"])
    motion = _add_noise(q_motion, noise, "motion")
    now = dc.reshape(dc.take(track_pos, [1], axis=2), (batch.size, dims.A_max, 2))
    futures = guarded("motion", motion_head, motion, now, dims, w["motion"])
    occ_pred = guarded("occupancy", occupancy_stage, motion, futures, batch, w["occupancy"])
    ego = _add_noise(q_ego, noise, "ego")
    plan = guarded("plan", plan_stage, ego, motion, batch, w["plan"])
    return PipelineState(g, batch, q_image, q_agents, q_map, q_motion, q_ego,
                         track_pos, map_prob, futures, occ_pred, plan, w)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    l_track: float
    l_map: float
    l_motion: float
    l_occ: float
    l_plan: float
    l_att: float
    l_noi: float = 0.0
    l_adv: float = 0.0
    tensors: dict[str, Tensor] = field(default_factory=dict, repr=False, compare=False)

    TASKS = ("l_track", "l_map", "l_motion", "l_occ", "l_plan")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.TASKS + ("l_att", "l_noi", "l_adv")}


def _present_mse(pred: Tensor, gt: np.ndarray, present: np.ndarray) -> Tensor:
    B, A = pred.shape[:2]
    flat = dc.reshape(pred, (B * A, -1))
    return _mse(dc.take(flat, present, axis=0), gt.reshape(B * A, -1)[present])


def _mse(pred: Tensor, gt: np.ndarray) -> Tensor:
    return dc.mse(dc.mul(pred, 1.0 / LOSS_UNIT), gt / LOSS_UNIT)


def best_modes(futures: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Index of the lowest-ADE mode per agent, shape (B, A)."""
    err = np.linalg.norm(futures - gt[:, :, None], axis=-1).mean(axis=-1)
    return np.argmin(err, axis=-1)


def module_losses(state: PipelineState, batch: Batch | None = None) -> LossBreakdown:
    """The five task losses and their sum; ``l_noi`` and ``l_adv`` stay zero.

    Position losses are mean squared errors measured in units of
    ``LOSS_UNIT`` metres; ``l_map`` and ``l_occ`` are mean binary
    cross-entropies.
    """
    batch = state.batch if batch is None else batch
    if not isinstance(batch, Batch):
        batch = make_batch(batch, state.batch.dims)
    gt_track = np.stack([batch.stacked("agent_past")[:, :, -1], batch.stacked("agent_now")], axis=2)
    l_track = _present_mse(state.track_pos, gt_track, batch.present)

    l_map = dc.bce(state.map_prob, batch.stacked("map_labels"))

    gt_fut = batch.stacked("agent_future")
    mode = best_modes(state.futures.data, gt_fut)
    B, A, K, T, _ = state.futures.shape
    idx = np.broadcast_to(mode[:, :, None, None, None], (B, A, 1, T, 2)).copy()
    chosen = dc.take_along(state.futures, idx, axis=2)
    l_motion = _present_mse(chosen, gt_fut, batch.present)

    l_occ = dc.bce(state.occ_pred, batch.stacked("occ_gt"))
    l_plan = _mse(state.plan, batch.stacked("ego_gt"))

    parts = [l_track, l_map, l_motion, l_occ, l_plan]
    total = parts[0]
    for p in parts[1:]:
        total = dc.add(total, p)
    vals = [p.item() for p in parts]
    l_att = vals[0] + vals[1] + vals[2] + vals[3] + vals[4]
    assert l_att == total.item()
    return LossBreakdown(*vals, l_att=l_att, l_noi=0.0, l_adv=0.0,
                         tensors=dict(zip(LossBreakdown.TASKS, parts), l_att=total))


# ---------------------------------------------------------------------------
# persistence


def _write_container(path, header: dict, arrays: Sequence[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_container(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: file too short")
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    return header, raw[8 + n:]


def _split_payload(payload: bytes, shapes: Sequence[Sequence[int]], path) -> list[np.ndarray]:
    out, off = [], 0
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(payload):
            raise ValueError(f"{path}: payload truncated")
        out.append(np.frombuffer(payload, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape))
        off += 8 * count
    if off != len(payload):
        raise ValueError(f"{path}: {len(payload) - off} trailing payload bytes")
    return out


def save_stack(stack: Stack, path) -> None:
    """JSON header (stage dims, seed, version) followed by little-endian f64 tensors."""
    tensors, arrays = [], []
    for stage in STAGES:
        for name, arr in stack.params[stage].weights.items():
            tensors.append({"stage": stage, "name": name, "shape": list(arr.shape)})
            arrays.append(arr)
    header = {
        "format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, "seed": stack.seed,
        "dims": stack.dims.to_dict(), "stage_dims": {s: stack.params[s].dims for s in STAGES},
        "interface_std": stack.interface_std, "tensors": tensors,
    }
    _write_container(path, header, arrays)


def load_stack(path) -> Stack:
    header, payload = _read_container(path)
    if header.get("format") != WEIGHTS_FORMAT or header.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights file {header.get('format')} v{header.get('version')}")
    dims = Dims.from_dict(header["dims"])
    arrays = _split_payload(payload, [t["shape"] for t in header["tensors"]], path)
    params = {s: ModuleParams(s, {}, header["stage_dims"][s]) for s in STAGES}
    for t, a in zip(header["tensors"], arrays):
        params[t["stage"]].weights[t["name"]] = a
    return Stack(dims, params, header["seed"], header.get("interface_std", {})).freeze()
