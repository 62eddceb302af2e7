"""Experiment orchestration: config, benchmark runs across attack modes and reports.

A benchmark consumes an evaluation dataset file and a trained weights file,
runs each requested attack mode on every scenario, evaluates the five task
metrics and writes a manifest plus Table-1-shaped reports into an output
directory that appears atomically when the run completes.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import __version__
from .attack import (MODES, AttackAborted, AttackConfig, NoiseBundle, apply_universal, fit_universal,
                     holdout_split, n_holdout_folds, run_clean, run_image_specific, run_module_wise, save_bundle)
from .metrics import MetricsReport, Thresholds, aggregate, scenario_metrics
from .scenario import DatasetError, Scenario, check_dims, generate_dataset, load_dataset, save_dataset
from .stack import SITES, PipelineError, Stack, load_stack, save_stack
from .training import DEFAULT_GATE, GateError, TrainResult, gate_values, train_stack

log = logging.getLogger(__name__)

MODE_ORDER = ("none", "image-agnostic", "image-specific", "module-wise")
MODE_LABELS = {"none": "Original", "image-agnostic": "Image-agnostic", "image-specific": "Image-specific",
               "module-wise": "Module-wise"}
FORMATS = ("csv", "markdown", "json")
REPORT_FILES = {"csv": "report.csv", "markdown": "report.md", "json": "report.json"}
MANIFEST_FILE = "manifest.json"

# (group, [(column, label, improvement direction)]) in report order
GROUPS = (
    ("Track", (("track_recall", "Recall", "↑"), ("track_ids", "IDS", "↓"))),
    ("Map", (("map_iou_drivable", "Drivable", "↑"), ("map_iou_lanes", "Lanes", "↑"),
             ("map_iou_crossing", "Crossing", "↑"))),
    ("Motion", (("min_ade", "minADE", "↓"), ("min_fde", "minFDE", "↓"), ("miss_rate", "MR", "↓"))),
    ("Occupancy", (("occ_iou_near", "IoU-n", "↑"), ("occ_iou_far", "IoU-f", "↑"))),
    ("Plan", (("plan_l2_1s", "L2 1s", "↓"), ("plan_l2_2s", "L2 2s", "↓"), ("plan_l2_3s", "L2 3s", "↓"),
              ("plan_l2_avg", "L2 avg", "↓"), ("collision_rate", "Col.Rate", "↓"))),
)
# the headline column of each group
PRIMARY = {"Track": "track_recall", "Map": "map_iou_lanes", "Motion": "min_ade", "Occupancy": "occ_iou_near",
           "Plan": "plan_l2_avg"}
PERCENT = ("map_iou_drivable", "map_iou_lanes", "map_iou_crossing", "occ_iou_near", "occ_iou_far",
           "collision_rate")
COUNTS = ("track_ids",)
DIRECTION = {col: arrow for _, cols in GROUPS for col, _, arrow in cols}
CSV_COLUMNS = ["mode"] + MetricsReport.columns()

TRAIN_SEED_BASE = 0
EVAL_SEED_BASE = 100_000
SEEDS_PER_DATA_SEED = 1_000_000


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; relative paths are resolved against the config file."""

    dataset: Path = Path("data/eval.jsonl")
    train_dataset: Path = Path("data/train.jsonl")
    weights: Path = Path("out/stack.bin")
    out_dir: Path = Path("out/bench")
    attack: AttackConfig = AttackConfig()
    modes: tuple[str, ...] = MODE_ORDER
    thresholds: Thresholds = Thresholds()
    jobs: int = 1
    formats: tuple[str, ...] = FORMATS
    holdout: float = 0.2
    figures: bool = True
    data_seed: int = 0
    train_count: int = 200
    eval_count: int = 50
    train_steps: int = 3000
    train_seed: int = 0
    batch_size: int = 32
    lr: float = 3e-3

    def __post_init__(self):
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown attack mode {m!r}; expected one of {MODES}")
        for f in self.formats:
            if f not in FORMATS:
                raise ConfigError(f"unknown report format {f!r}; expected one of {FORMATS}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if not 0 < self.holdout < 1:
            raise ConfigError(f"holdout must be in (0, 1), got {self.holdout}")
        for name in ("train_count", "eval_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_count > EVAL_SEED_BASE:
            raise ConfigError(f"train_count must be <= {EVAL_SEED_BASE} to keep seed ranges disjoint")

    def snapshot(self) -> dict:
        """JSON-ready copy without the output directory (it holds the snapshot)."""
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "out_dir":
                continue
            if isinstance(v, Path):
                v = str(v)
            elif f.name == "attack":
                v = {"k": v.k, "eps": dict(v.eps), "sigma": dict(v.sigma), "seed": v.seed}
            elif f.name == "thresholds":
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d


def train_seeds(config: ExperimentConfig) -> list[int]:
    base = config.data_seed * SEEDS_PER_DATA_SEED + TRAIN_SEED_BASE
    return list(range(base, base + config.train_count))


def eval_seeds(config: ExperimentConfig) -> list[int]:
    base = config.data_seed * SEEDS_PER_DATA_SEED + EVAL_SEED_BASE
    return list(range(base, base + config.eval_count))


def _parse_number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.replace("\n", ",").split(",") if t.strip())


def load_config(path: str | os.PathLike | None = None, overrides: Mapping | None = None) -> ExperimentConfig:
    """Read an INI config (sections data, stack, attack, metrics, output) and apply overrides.

    ``overrides`` keys: eval_dataset, train_dataset, weights, out, modes, eps
    (image budget), iters, seed (attack seed), jobs, formats, data_seed.
    """
    cp = configparser.ConfigParser(interpolation=None)
    root = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        root = path.parent
    known = {
        "data": {"train", "eval", "seed", "train_count", "eval_count"},
        "stack": {"weights", "steps", "seed", "batch_size", "lr"},
        "attack": {"k", "seed", "modes", "holdout"} | {f"eps_{s}" for s in SITES} | {f"sigma_{s}" for s in SITES},
        "metrics": {f.name for f in fields(Thresholds)},
        "output": {"dir", "formats", "jobs", "figures"},
    }
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        extra = set(cp[section]) - known[section]
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")

    def get(section, key, default=None):
        return cp.get(section, key, fallback=None) if cp.has_section(section) else default

    def p(section, key, default):
        v = get(section, key)
        return Path(default) if v is None else Path(os.path.normpath(root / v))

    def num(section, key, default, cast=float):
        v = get(section, key)
        if v is None:
            return default
        x = _parse_number(v)
        if cast is int:
            if x != int(x):
                raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}")
            return int(x)
        return x

    base = ExperimentConfig()
    eps = {s: num("attack", f"eps_{s}", None) for s in SITES}
    eps = {s: v for s, v in eps.items() if v is not None}
    sigma = dict(AttackConfig().sigma)
    sigma.update({s: v for s in SITES if (v := num("attack", f"sigma_{s}", None)) is not None})
    k = num("attack", "k", 10, int)
    seed = num("attack", "seed", 0, int)
    modes = _parse_list(get("attack", "modes")) if get("attack", "modes") else base.modes
    formats = _parse_list(get("output", "formats")) if get("output", "formats") else base.formats
    jobs = num("output", "jobs", 1, int)
    figures = get("output", "figures")
    kw = dict(
        dataset=p("data", "eval", base.dataset), train_dataset=p("data", "train", base.train_dataset),
        weights=p("stack", "weights", base.weights), out_dir=p("output", "dir", base.out_dir),
        holdout=num("attack", "holdout", base.holdout),
        thresholds=Thresholds(**{f.name: num("metrics", f.name, getattr(Thresholds(), f.name))
                                 for f in fields(Thresholds)}),
        data_seed=num("data", "seed", base.data_seed, int),
        train_count=num("data", "train_count", base.train_count, int),
        eval_count=num("data", "eval_count", base.eval_count, int),
        train_steps=num("stack", "steps", base.train_steps, int), train_seed=num("stack", "seed", 0, int),
        batch_size=num("stack", "batch_size", base.batch_size, int), lr=num("stack", "lr", base.lr),
        figures=True if figures is None else figures.strip().lower() in ("1", "true", "yes", "on"),
    )
    ov = dict(overrides or {})
    if ov.get("eval_dataset") is not None:
        kw["dataset"] = Path(ov["eval_dataset"])
    if ov.get("train_dataset") is not None:
        kw["train_dataset"] = Path(ov["train_dataset"])
    if ov.get("weights") is not None:
        kw["weights"] = Path(ov["weights"])
    if ov.get("out") is not None:
        kw["out_dir"] = Path(ov["out"])
    if ov.get("modes") is not None:
        modes = tuple(ov["modes"])
    if ov.get("formats") is not None:
        formats = tuple(ov["formats"])
    if ov.get("eps") is not None:
        eps["image"] = _parse_number(str(ov["eps"]))
    if ov.get("iters") is not None:
        k = int(ov["iters"])
    if ov.get("seed") is not None:
        seed = int(ov["seed"])
    if ov.get("jobs") is not None:
        jobs = int(ov["jobs"])
    if ov.get("data_seed") is not None:
        kw["data_seed"] = int(ov["data_seed"])
    try:
        attack = AttackConfig(k=k, eps=eps, sigma=sigma, seed=seed)
        return ExperimentConfig(attack=attack, modes=modes, formats=formats, jobs=jobs, **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ModeResult:
    mode: str
    status: str = "ok"
    rows: list[dict] = field(default_factory=list)
    aggregate: MetricsReport | None = None
    failure: dict | None = None
    artifacts: list[str] = field(default_factory=list)
    folds: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregate"] = None if self.aggregate is None else self.aggregate.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModeResult":
        d = dict(d)
        d["aggregate"] = None if d.get("aggregate") is None else MetricsReport(**d["aggregate"])
        return cls(**d)


@dataclass
class RunManifest:
    config: dict = field(default_factory=dict)
    version: str = __version__
    dataset: dict = field(default_factory=dict)
    stack: dict = field(default_factory=dict)
    modes: dict[str, ModeResult] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        d = {"format": "modwise-manifest", "version": self.version, "config": self.config,
             "dataset": self.dataset, "stack": self.stack,
             "modes": {m: r.to_dict() for m, r in self.modes.items()}}
        if timings:
            d["timings"] = self.timings
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d.get("config", {}), d.get("version", __version__), d.get("dataset", {}), d.get("stack", {}),
                   {m: ModeResult.from_dict(r) for m, r in d.get("modes", {}).items()}, d.get("timings", {}))

    def aggregates(self) -> dict[str, MetricsReport]:
        return {m: r.aggregate for m, r in self.modes.items() if r.aggregate is not None}

    def check_aggregates(self) -> bool:
        """Aggregates equal the per-scenario means (sums for identity switches)."""
        for r in self.modes.values():
            if r.aggregate is None:
                continue
            if aggregate([MetricsReport(**row["metrics"]) for row in r.rows]).as_dict() != r.aggregate.as_dict():
                return False
        return True


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# running one task


@dataclass(frozen=True)
class _Task:
    mode: str
    key: int  # scenario seed, or fold index for image-agnostic


_CTX: dict = {}


def _init_worker(stack: Stack, scenarios: list[Scenario], config: ExperimentConfig) -> None:
    _CTX.clear()
    _CTX.update(stack=stack, scenarios={s.seed: s for s in scenarios}, ordered=scenarios, config=config)


def _losses(lb) -> dict:
    return lb.as_dict()


def _row(seed: int, result, config: ExperimentConfig, stack: Stack) -> dict:
    out = {k: v[0] for k, v in result.state.outputs().items()}
    metrics = scenario_metrics(out, _CTX["scenarios"][seed], stack.dims, config.thresholds)
    return {
        "seed": seed, "metrics": metrics.as_dict(),
        "losses": {"clean": _losses(result.clean), "initial": _losses(result.initial),
                   "adversarial": _losses(result.adversarial)},
        "trace": [t["l_adv"] for t in result.trace],
        "bounds_ok": all(t["within_bounds"] and t["inactive_zero"] for t in result.trace),
    }


def _run_task(task: _Task) -> dict:
    stack, config = _CTX["stack"], _CTX["config"]
    acfg = replace(config.attack, mode=task.mode)
    try:
        if task.mode == "image-agnostic":
            fit, held = holdout_split(_CTX["ordered"], config.holdout, task.key)
            noise, trace = fit_universal(fit, stack, acfg)
            rows = [_row(s.seed, apply_universal(s, stack, noise), config, stack) for s in held]
            for r in rows:
                r["fold"] = task.key
            fold = {"fold": task.key, "fit": [s.seed for s in fit], "held_out": [s.seed for s in held],
                    "trace": [t["l_adv"] for t in trace],
                    "bounds_ok": all(t["within_bounds"] and t["inactive_zero"] for t in trace)}
            return {"task": task, "rows": rows, "noise": noise, "fold": fold}
        s = _CTX["scenarios"][task.key]
        if task.mode == "none":
            res = run_clean(s, stack)
        elif task.mode == "module-wise":
            res = run_module_wise(s, stack, acfg)
        else:
            res = run_image_specific(s, stack, acfg)
        return {"task": task, "rows": [_row(s.seed, res, config, stack)],
                "noise": res.noise if task.mode != "none" else None}
    except AttackAborted as exc:
        return {"task": task, "error": {"scenario": exc.scenario_seed, "iteration": exc.iteration,
                                        "message": str(exc)}}
    except (PipelineError, FloatingPointError) as exc:
        return {"task": task, "error": {"scenario": task.key if task.mode != "image-agnostic" else None,
                                        "iteration": None, "message": str(exc)}}


def _tasks(config: ExperimentConfig, scenarios: list[Scenario]) -> list[_Task]:
    out = []
    for mode in config.modes:
        if mode == "image-agnostic":
            n = n_holdout_folds(config.holdout) if len(scenarios) > 1 else 1
            out += [_Task(mode, f) for f in range(n)]
        else:
            out += [_Task(mode, s.seed) for s in scenarios]
    return out


def _execute(tasks: list[_Task], stack: Stack, scenarios: list[Scenario], config: ExperimentConfig,
             progress: Callable | None) -> list[dict]:
    if config.jobs == 1 or len(tasks) == 1:
        _init_worker(stack, scenarios, config)
        results = []
        for t in tasks:
            results.append(_run_task(t))
            if progress:
                progress(t)
        return results
    with ProcessPoolExecutor(max_workers=config.jobs, initializer=_init_worker,
                             initargs=(stack, scenarios, config)) as pool:
        results = []
        for t, r in zip(tasks, pool.map(_run_task, tasks, chunksize=1)):
            results.append(r)
            if progress:
                progress(t)
        return results


# ---------------------------------------------------------------------------
# experiment


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_inputs(config: ExperimentConfig) -> tuple[dict, list[Scenario], Stack]:
    """Load and cross-check the evaluation dataset and the trained stack."""
    for label, path in (("dataset", config.dataset), ("weights", config.weights)):
        if not Path(path).is_file():
            raise ConfigError(f"{label} file not found: {path}")
    try:
        header, scenarios = load_dataset(config.dataset)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        stack = load_stack(config.weights)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        check_dims(header, stack.dims)
    except DatasetError as exc:
        raise ConfigError(f"{config.dataset}: {exc}") from exc
    if not scenarios:
        raise ConfigError(f"{config.dataset}: dataset is empty")
    return header, scenarios, stack


def run_experiment(config: ExperimentConfig, progress: Callable | None = None, write: bool = True) -> RunManifest:
    """Run every requested mode over the evaluation dataset.

    The output directory (manifest, noise artifacts, reports, figures) is
    built in a temporary sibling and moved into place at the end. A mode in
    which any scenario aborts is marked failed with that scenario's id; the
    other modes are unaffected.
    """
    t_start = time.perf_counter()
    header, scenarios, stack = load_inputs(config)
    scenarios = sorted(scenarios, key=lambda s: s.seed)
    eps = replace(config.attack, mode="module-wise").resolve_eps(stack)
    manifest = RunManifest(
        config=config.snapshot(),
        dataset={"path": str(config.dataset), "sha256": _sha256(config.dataset), "header": header,
                 "seeds": [s.seed for s in scenarios]},
        stack={"path": str(config.weights), "sha256": _sha256(config.weights), "seed": stack.seed,
               "interface_std": stack.interface_std, "eps": eps, "sigma": dict(config.attack.sigma)},
    )
    tasks = _tasks(config, scenarios)
    t0 = time.perf_counter()
    results = _execute(tasks, stack, scenarios, config, progress)
    manifest.timings["attacks"] = time.perf_counter() - t0

    by_mode: dict[str, list[dict]] = {m: [] for m in config.modes}
    for r in results:
        by_mode[r["task"].mode].append(r)
    artifacts: list[tuple[str, NoiseBundle]] = []
    for mode in MODE_ORDER:
        if mode not in by_mode:
            continue
        mr = ModeResult(mode)
        errors = [r["error"] for r in by_mode[mode] if "error" in r]
        if errors:
            errors.sort(key=lambda e: (e["scenario"] is None, e["scenario"] or 0))
            mr.status, mr.failure = "failed", errors[0]
            log.warning("mode %s failed: %s", mode, errors[0]["message"])
        else:
            rows = sorted((row for r in by_mode[mode] for row in r["rows"]), key=lambda row: row["seed"])
            mr.rows = rows
            mr.aggregate = aggregate([MetricsReport(**row["metrics"]) for row in rows])
            for r in sorted(by_mode[mode], key=lambda r: r["task"].key):
                if "fold" in r:
                    mr.folds.append(r["fold"])
                if r.get("noise") is not None:
                    name = (f"noise/{mode}/fold-{r['task'].key}.bin" if mode == "image-agnostic"
                            else f"noise/{mode}/scenario-{r['task'].key}.bin")
                    mr.artifacts.append(name)
                    artifacts.append((name, r["noise"]))
        manifest.modes[mode] = mr
    manifest.timings["total"] = time.perf_counter() - t_start
    if write:
        _write_outputs(manifest, config, artifacts)
    return manifest


def _atomic_dir(target: Path) -> tuple[Path, Callable[[], None]]:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))

    def commit():
        old = None
        if target.exists():
            old = target.parent / f".{target.name}.old-{os.getpid()}"
            os.replace(target, old)
        os.replace(tmp, target)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)

    return tmp, commit


def _write_outputs(manifest: RunManifest, config: ExperimentConfig, artifacts) -> None:
    tmp, commit = _atomic_dir(config.out_dir)
    try:
        for name, bundle in artifacts:
            (tmp / name).parent.mkdir(parents=True, exist_ok=True)
            save_bundle(bundle, tmp / name)
        (tmp / MANIFEST_FILE).write_text(manifest.to_json(), encoding="utf-8")
        emit_report(manifest, config.formats, tmp)
        if config.figures:
            from .plots import render_figures
            render_figures(manifest, tmp / "figures")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    commit()


# ---------------------------------------------------------------------------
# dataset generation and training


def generate(config: ExperimentConfig) -> tuple[Path, Path]:
    """Write the training and evaluation dataset files (disjoint seed ranges)."""
    for path, seeds in ((config.train_dataset, train_seeds(config)), (config.dataset, eval_seeds(config))):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(generate_dataset(seeds), path, global_seed=config.data_seed)
    return Path(config.train_dataset), Path(config.dataset)


def prepare_stack(config: ExperimentConfig, gate: dict | None = None) -> TrainResult:
    """Train on the training dataset and persist the weights, gate report alongside.

    The weights are written even when the gate fails; :class:`GateError` is
    raised afterwards.
    """
    if not Path(config.train_dataset).is_file():
        raise ConfigError(f"training dataset not found: {config.train_dataset}")
    try:
        _, scenarios = load_dataset(config.train_dataset)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc
    gate = DEFAULT_GATE if gate is None else gate
    res = train_stack(scenarios, budget=config.train_steps, gate=gate, seed=config.train_seed,
                      batch_size=config.batch_size, lr=config.lr, min_steps=config.train_steps,
                      thresholds=config.thresholds, raise_on_fail=False)
    Path(config.weights).parent.mkdir(parents=True, exist_ok=True)
    save_stack(res.stack, config.weights)
    report = {"steps": res.steps, "passed": res.passed, "gate": {k: list(v) for k, v in gate.items()},
              "metrics": gate_values(res.metrics), "interface_std": res.stack.interface_std}
    Path(str(config.weights) + ".json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    if not res.passed:
        raise GateError(f"clean gate failed after {res.steps} steps: "
                        f"{ {k: round(gate_values(res.metrics)[k], 4) for k in gate} }", res.metrics, res.stack)
    return res


# ---------------------------------------------------------------------------
# trend check


def _worse(a: float, b: float, col: str) -> bool:
    """True when ``b`` is strictly worse than ``a`` for column ``col``."""
    return b < a if DIRECTION[col] == "↑" else b > a


@dataclass
class TrendCheck:
    groups: dict[str, dict]
    passed: bool
    message: str


def trend_check(manifest: RunManifest, order: Sequence[str] = MODE_ORDER, min_other: int = 3) -> TrendCheck:
    """Strict degradation ordering along ``order`` on each group's headline column.

    Passes when the plan group is strictly ordered and at least ``min_other``
    of the remaining groups are too.
    """
    aggs = manifest.aggregates()
    missing = [m for m in order if m not in aggs]
    if missing:
        return TrendCheck({}, False, f"modes missing or failed: {missing}")
    groups = {}
    for group, col in PRIMARY.items():
        vals = [getattr(aggs[m], col) for m in order]
        ok = all(v is not None for v in vals) and all(_worse(a, b, col) for a, b in zip(vals, vals[1:]))
        groups[group] = {"column": col, "values": vals, "ordered": ok}
    others = sum(g["ordered"] for name, g in groups.items() if name != "Plan")
    passed = groups["Plan"]["ordered"] and others >= min_other
    msg = (f"plan {'ordered' if groups['Plan']['ordered'] else 'NOT ordered'}; "
           f"{others}/{len(groups) - 1} other groups ordered")
    return TrendCheck(groups, passed, msg)


# ---------------------------------------------------------------------------
# reports


def format_value(col: str, v: float | None) -> str:
    """Three significant digits; percentages for IoU and collision columns, integers for counts."""
    if v is None:
        return "n/a"
    if col in COUNTS:
        return "%d" % round(v)
    if col in PERCENT:
        return "%.3g%%" % (100.0 * v)
    return "%.3g" % v


def header_labels() -> list[str]:
    return [f"{group} {label} {arrow}" for group, cols in GROUPS for _, label, arrow in cols]


def _report_columns() -> list[str]:
    return [col for _, cols in GROUPS for col, _, _ in cols]


def render_csv(manifest: RunManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for mode in MODE_ORDER:
        r = manifest.modes.get(mode)
        if r is None or r.aggregate is None:
            continue
        d = r.aggregate.as_dict()
        w.writerow([mode] + ["" if d[c] is None else repr(float(d[c])) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def render_markdown(manifest: RunManifest) -> str:
    cols = _report_columns()
    lines = ["| Method | " + " | ".join(header_labels()) + " |",
             "|---|" + "|".join("---:" for _ in cols) + "|"]
    for mode in MODE_ORDER:
        r = manifest.modes.get(mode)
        if r is None:
            continue
        if r.aggregate is None:
            lines.append(f"| {MODE_LABELS[mode]} | " + " | ".join("failed" for _ in cols) + " |")
            continue
        d = r.aggregate.as_dict()
        lines.append(f"| {MODE_LABELS[mode]} | " + " | ".join(format_value(c, d[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def render_json(manifest: RunManifest) -> str:
    out = {"groups": [{"group": g, "columns": [{"column": c, "label": l, "direction": a} for c, l, a in cols]}
                      for g, cols in GROUPS],
           "rows": []}
    for mode in MODE_ORDER:
        r = manifest.modes.get(mode)
        if r is None:
            continue
        out["rows"].append({"mode": mode, "label": MODE_LABELS[mode], "status": r.status,
                            "metrics": None if r.aggregate is None else r.aggregate.as_dict(),
                            "failure": r.failure})
    return json.dumps(out, indent=1, ensure_ascii=False) + "\n"


_RENDERERS = {"csv": render_csv, "markdown": render_markdown, "json": render_json}


def emit_report(manifest: RunManifest, formats: Sequence[str], out_dir) -> list[Path]:
    """Write one report file per format; CSV carries full precision, markdown three digits."""
    bad = [f for f in formats if f not in _RENDERERS]
    if bad:
        raise ConfigError(f"unknown report format(s) {bad}; expected a subset of {FORMATS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in formats:
        p = out_dir / REPORT_FILES[f]
        p.write_text(_RENDERERS[f](manifest), encoding="utf-8")
        paths.append(p)
    return paths
