"""Fitting the toy stack on clean scenarios, with a clean-performance gate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .metrics import MetricsReport, Thresholds, aggregate, scenario_metrics
from .scenario import Scenario
from .stack import STAGES, Stack, init_stack, make_batch, module_losses, run_pipeline

log = logging.getLogger(__name__)

# clean gate: column -> (direction, threshold); "map_iou" is the mean over the three map classes
DEFAULT_GATE = {"plan_l2_avg": ("<", 0.5), "map_iou": (">", 0.7), "min_ade": ("<", 0.5)}


class GateError(RuntimeError):
    def __init__(self, message: str, metrics: MetricsReport | None, stack: Stack | None = None):
        super().__init__(message)
        self.metrics = metrics
        self.stack = stack


def gate_values(report: MetricsReport) -> dict[str, float]:
    d = report.as_dict()
    d["map_iou"] = (report.map_iou_drivable + report.map_iou_lanes + report.map_iou_crossing) / 3.0
    return d


def gate_passes(report: MetricsReport, gate: dict) -> bool:
    vals = gate_values(report)
    for key, (op, thr) in gate.items():
        v = vals[key]
        if (op == "<" and not v < thr) or (op == ">" and not v > thr):
            return False
    return True


def clean_rows(stack: Stack, scenarios: Sequence[Scenario], thresholds: Thresholds = Thresholds()):
    """Per-scenario metrics of the noise-free stack, one forward pass per scenario."""
    rows = []
    for s in scenarios:
        state = run_pipeline([s], stack)
        out = {k: v[0] for k, v in state.outputs().items()}
        rows.append(scenario_metrics(out, s, stack.dims, thresholds))
    return rows


def interface_std(stack: Stack, scenarios: Sequence[Scenario], batch_size: int = 50) -> dict[str, float]:
    """Standard deviation of each clean feature interface over ``scenarios``."""
    acc: dict[str, list[np.ndarray]] = {"agents": [], "map": [], "motion": [], "ego": []}
    for i in range(0, len(scenarios), batch_size):
        b = make_batch(scenarios[i:i + batch_size], stack.dims)
        st = run_pipeline(b, stack)
        flat_present = b.present
        acc["agents"].append(st.q_agents.data.reshape(-1, stack.dims.D)[flat_present])
        acc["motion"].append(st.q_motion.data.reshape(-1, stack.dims.D)[flat_present])
        acc["map"].append(st.q_map.data.reshape(-1, stack.dims.D))
        acc["ego"].append(st.q_ego.data)
    return {k: float(np.concatenate(v).std()) for k, v in acc.items()}


@dataclass
class Adam:
    lr: float = 3e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            params[k] -= lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrainResult:
    stack: Stack
    metrics: MetricsReport | None
    steps: int
    passed: bool
    history: list = field(default_factory=list)


def train_stack(dataset: Sequence[Scenario], budget: int = 4000, gate: dict | None = None, seed: int = 0,
                batch_size: int = 32, lr: float = 3e-3, eval_every: int = 500, min_steps: int = 0,
                thresholds: Thresholds = Thresholds(), raise_on_fail: bool = True) -> TrainResult:
    """Fit every stage jointly on the clean sum of task losses with Adam.

    Training stops at the first evaluation (every ``eval_every`` steps, after
    ``min_steps``) where the clean metrics on ``dataset`` pass ``gate``. The
    returned stack is frozen and carries the clean interface statistics used
    to size feature-site noise.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    gate = DEFAULT_GATE if gate is None else gate
    dataset = list(dataset)
    stack = init_stack(seed)
    dims = stack.dims
    flat = {(s, k): w for s in STAGES for k, w in stack.params[s].weights.items()}
    opt = Adam(lr=lr)
    rng = np.random.default_rng([seed, 1])
    batches = [make_batch(dataset[i:i + batch_size], dims) for i in range(0, len(dataset), batch_size)]
    order = np.arange(len(dataset))
    history = []
    step = 0
    report = None
    passed = False

    def evaluate():
        nonlocal report, passed
        report = aggregate(clean_rows(stack, dataset, thresholds))
        passed = gate_passes(report, gate)
        history.append((step, gate_values(report)))
        log.info("step %d gate %s: %s", step, "pass" if passed else "fail",
                 {k: round(gate_values(report)[k], 4) for k in gate})

    if budget <= 0:
        evaluate()
    while step < budget:
        rng.shuffle(order)
        for i in range(0, len(order), batch_size):
            if step >= budget:
                break
            idx = np.sort(order[i:i + batch_size])
            batch = make_batch([dataset[j] for j in idx], dims) if len(batches) > 1 else batches[0]
            state = run_pipeline(batch, stack, train=True)
            losses = module_losses(state)
            dc.backward(losses.tensors["l_att"])
            grads = {(s, k): state.weights[s][k].grad for s in STAGES for k in stack.params[s].weights}
            frac = step / max(budget, 1)
            opt.step(flat, grads, lr * 0.5 * (1 + np.cos(np.pi * frac)))
            step += 1
            if step % eval_every == 0 and step >= min_steps:
                evaluate()
                if passed:
                    break
        if passed:
            break
    if report is None or history[-1][0] != step:
        evaluate()
    stack.interface_std = interface_std(stack, dataset)
    stack.freeze()
    result = TrainResult(stack, report, step, passed, history)
    if not passed and raise_on_fail:
        raise GateError(f"clean gate not reached within {budget} steps: "
                        f"{ {k: gate_values(report)[k] for k in gate} }", report, stack)
    return result
