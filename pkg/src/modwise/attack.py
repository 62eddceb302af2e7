"""Module-wise adversarial noise and the two image-level baselines.

All three attacks share one loop. Each iteration runs a forward pass with the
current noise injected, computes

    L_adv = (L_track + L_map + L_motion + L_occ + L_plan) - sum_i sigma_i * ||N_i||_2,

back-propagates once, and moves every active site by a signed step of size
``eps_i / sqrt(k)`` followed by clamping into ``[-eps_i, eps_i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Graph
from .scenario import Scenario
from .stack import (SITES, LossBreakdown, PipelineError, PipelineState, Stack, make_batch, module_losses,
                    run_pipeline, site_shapes)

MODES = ("none", "image-specific", "image-agnostic", "module-wise")
IMAGE_EPS = 8.0 / 255.0
FEATURE_EPS_SCALE = 0.25
DEFAULT_SIGMA = {"image": 8e-6, "agents": 2e-4, "map": 2e-4, "motion": 2e-4, "ego": 2e-4}
BUNDLE_FORMAT = "modwise-noise"
BUNDLE_VERSION = 1


class AttackAborted(RuntimeError):
    def __init__(self, message: str, iteration: int, scenario_seed: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.scenario_seed = scenario_seed


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyper-parameters.

    ``eps`` entries left out fall back to the defaults: 8/255 for the image
    and ``FEATURE_EPS_SCALE`` times the clean interface standard deviation of
    the prepared stack for feature sites. An explicit ``0`` disables a site.
    """

    k: int = 10
    eps: Mapping[str, float] = field(default_factory=dict)
    sigma: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_SIGMA))
    seed: int = 0
    mode: str = "module-wise"
    sites: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for site, v in self.eps.items():
            if site not in SITES:
                raise ValueError(f"unknown noise site {site!r}")
            if not v >= 0:
                raise ValueError(f"eps for {site} must be >= 0, got {v}")
        for site, v in self.sigma.items():
            if site not in SITES:
                raise ValueError(f"unknown noise site {site!r}")
            if not v >= 0:
                raise ValueError(f"sigma for {site} must be >= 0, got {v}")

    def active_sites(self) -> tuple[str, ...]:
        if self.mode == "none":
            base: tuple[str, ...] = ()
        elif self.mode == "module-wise":
            base = SITES
        else:
            base = ("image",)
        if self.sites is not None:
            base = tuple(s for s in base if s in self.sites)
        return tuple(s for s in base if self.eps.get(s, 1.0) > 0)

    def resolve_eps(self, stack: Stack | None = None) -> dict[str, float]:
        out = {}
        for site in SITES:
            if site in self.eps:
                out[site] = float(self.eps[site])
            elif site == "image":
                out[site] = IMAGE_EPS
            elif stack is not None and site in stack.interface_std:
                out[site] = FEATURE_EPS_SCALE * stack.interface_std[site]
            elif site in self.active_sites():
                raise ValueError(f"no eps for feature site {site!r}: pass it explicitly or use a trained stack")
            else:
                out[site] = 0.0
        return out

    def step_size(self, eps: float) -> float:
        return eps / math.sqrt(self.k)


@dataclass
class NoiseBundle:
    sites: dict[str, np.ndarray]
    eps: dict[str, float]
    sigma: dict[str, float]
    seed: int
    mode: str

    def within_bounds(self) -> bool:
        return all(np.all(np.abs(v) <= self.eps[s]) for s, v in self.sites.items())

    def copy(self) -> "NoiseBundle":
        return replace(self, sites={k: v.copy() for k, v in self.sites.items()})

    def scaled(self, c: float) -> "NoiseBundle":
        return replace(self, sites={k: v * c for k, v in self.sites.items()})


def init_noise(config: AttackConfig, shapes: Mapping[str, tuple[int, ...]], eps: Mapping[str, float],
               stream: int | None = None) -> NoiseBundle:
    """Uniform noise in each active site's box; inactive sites are zero.

    Every site draws from its own generator keyed by ``(seed, stream, site)``,
    so enabling or disabling one site never changes another site's draw.
    """
    active = config.active_sites()
    sites = {}
    for i, site in enumerate(SITES):
        if site in active and eps[site] > 0:
            key = [config.seed, i] if stream is None else [config.seed, int(stream), i]
            rng = np.random.default_rng(key)
            sites[site] = rng.uniform(-eps[site], eps[site], size=shapes[site])
        else:
            sites[site] = np.zeros(shapes[site])
    return NoiseBundle(sites, dict(eps), dict(config.sigma), config.seed, config.mode)


def _noise_loss_graph(tensors: Mapping[str, dc.Tensor], sigma: Mapping[str, float]) -> dc.Tensor:
    total = None
    for site in SITES:
        term = dc.mul(dc.l2norm(tensors[site]), float(sigma.get(site, 0.0)))
        total = term if total is None else dc.add(total, term)
    return total


def noise_loss(noise: NoiseBundle | Mapping[str, np.ndarray], sigma: Mapping[str, float] | None = None) -> float:
    """sum_i sigma_i * ||N_i||_2 over the five sites."""
    sites = noise.sites if isinstance(noise, NoiseBundle) else noise
    if sigma is None:
        sigma = noise.sigma if isinstance(noise, NoiseBundle) else DEFAULT_SIGMA
    g = Graph()
    return _noise_loss_graph({s: g.constant(sites[s]) for s in SITES}, sigma).item()


def _exact_ledger(l_att: float, l_noi: float) -> tuple[float, float]:
    """Return ``(l_noi', l_adv)`` with ``l_adv == l_att - l_noi'`` and ``l_adv + l_noi' == l_att``.

    ``l_adv`` is the rounded difference; ``l_noi'`` is ``l_noi`` re-derived as
    ``l_att - l_adv``, which is exact (Sterbenz) whenever ``l_noi <= l_att / 2``.
    It differs from ``l_noi`` by at most half an ulp of ``l_att``.
    """
    l_adv = l_att - l_noi
    back = l_att - l_adv
    if l_att - back == l_adv and l_adv + back == l_att:
        return back, l_adv
    return l_noi, l_adv


def adversarial_loss(state: PipelineState, scenario: Scenario | Sequence[Scenario] | None,
                     noise: NoiseBundle | Mapping[str, dc.Tensor], config: AttackConfig | Mapping[str, float]
                     ) -> LossBreakdown:
    """Task losses of ``state`` with ``l_noi`` and ``l_adv = l_att - l_noi`` filled in.

    ``noise`` is either the bundle that was injected or the graph tensors of
    the injected noise; only the latter carries gradients to the noise.
    ``scenario`` defaults to the scenarios the state was computed on.
    """
    sigma = config.sigma if isinstance(config, AttackConfig) else config
    g = state.graph
    if isinstance(noise, NoiseBundle):
        tensors = {s: g.constant(noise.sites[s]) for s in SITES}
    else:
        tensors = noise
    batch = None if scenario is None else (
        make_batch([scenario] if isinstance(scenario, Scenario) else list(scenario), state.batch.dims))
    lb = module_losses(state, batch)
    l_noi = _noise_loss_graph(tensors, sigma)
    l_adv = dc.sub(lb.tensors["l_att"], l_noi)
    lb.l_noi, lb.l_adv = _exact_ledger(lb.l_att, l_noi.item())
    assert lb.l_adv == l_adv.item()
    lb.tensors["l_noi"], lb.tensors["l_adv"] = l_noi, l_adv
    return lb


def pgd_update(noise: NoiseBundle, grads: Mapping[str, np.ndarray], config: AttackConfig,
               active: Sequence[str] | None = None) -> NoiseBundle:
    """One signed ascent step per active site, then clamp into the site's box."""
    active = config.active_sites() if active is None else active
    out = noise.copy()
    for site in active:
        eps = noise.eps[site]
        if eps <= 0:
            continue
        step = config.step_size(eps)
        out.sites[site] = np.clip(noise.sites[site] + step * np.sign(grads[site]), -eps, eps)
    return out


@dataclass
class AttackResult:
    noise: NoiseBundle
    clean: LossBreakdown
    initial: LossBreakdown
    adversarial: LossBreakdown
    state: PipelineState
    trace: list[dict] = field(default_factory=list)


def _forward(scenario: Scenario, stack: Stack, noise: NoiseBundle, grad: bool):
    g = Graph()
    tensors = {s: g.leaf(noise.sites[s], requires_grad=grad) for s in SITES}
    state = run_pipeline(make_batch([scenario], stack.dims), stack, noise=tensors, graph=g)
    losses = adversarial_loss(state, None, tensors, noise.sigma)
    grads = None
    if grad:
        dc.backward(losses.tensors["l_adv"])
        grads = {s: tensors[s].grad for s in SITES}
    return state, losses, grads


def clean_breakdown(scenario: Scenario, stack: Stack) -> tuple[PipelineState, LossBreakdown]:
    state = run_pipeline([scenario], stack)
    lb = module_losses(state)
    lb.l_noi, lb.l_adv = 0.0, lb.l_att
    return state, lb


def _record(trace, it, noise: NoiseBundle, losses: LossBreakdown, active):
    trace.append({
        "iteration": it, "l_att": losses.l_att, "l_noi": losses.l_noi, "l_adv": losses.l_adv,
        "within_bounds": noise.within_bounds(),
        "inactive_zero": all(not np.any(noise.sites[s]) for s in SITES if s not in active),
    })


def _iterate(scenario: Scenario, stack: Stack, config: AttackConfig, noise: NoiseBundle,
             on_iteration: Callable | None = None) -> AttackResult:
    active = config.active_sites()
    trace: list[dict] = []
    initial = None
    for it in range(config.k):
        try:
            _, losses, grads = _forward(scenario, stack, noise, grad=True)
        except (PipelineError, dc.NonFiniteError) as exc:
            raise AttackAborted(f"non-finite loss at iteration {it}: {exc}", it, scenario.seed) from exc
        if initial is None:
            initial = losses
        _record(trace, it, noise, losses, active)
        noise = pgd_update(noise, grads, config, active)
        if on_iteration is not None:
            on_iteration(it, noise)
    try:
        state, final, _ = _forward(scenario, stack, noise, grad=False)
    except (PipelineError, dc.NonFiniteError) as exc:
        raise AttackAborted(f"non-finite loss after iteration {config.k}: {exc}", config.k, scenario.seed) from exc
    _record(trace, config.k, noise, final, active)
    _, clean = clean_breakdown(scenario, stack)
    return AttackResult(noise, clean, initial, final, state, trace)


def _start(scenario: Scenario, stack: Stack, config: AttackConfig, init: NoiseBundle | None) -> NoiseBundle:
    if init is not None:
        return init.copy()
    return init_noise(config, site_shapes(stack.dims), config.resolve_eps(stack), stream=scenario.seed)


def run_module_wise(scenario: Scenario, stack: Stack, config: AttackConfig = AttackConfig(),
                    init: NoiseBundle | None = None, on_iteration: Callable | None = None) -> AttackResult:
    """Jointly optimise noise at all five interfaces for ``config.k`` iterations."""
    if config.mode != "module-wise":
        raise ValueError(f"run_module_wise needs mode 'module-wise', got {config.mode!r}")
    return _iterate(scenario, stack, config, _start(scenario, stack, config, init), on_iteration)


def run_image_specific(scenario: Scenario, stack: Stack, config: AttackConfig | None = None,
                       init: NoiseBundle | None = None, on_iteration: Callable | None = None) -> AttackResult:
    """Per-scenario image noise only; feature sites stay pinned at zero."""
    config = config or AttackConfig(mode="image-specific")
    if config.mode != "image-specific":
        raise ValueError(f"run_image_specific needs mode 'image-specific', got {config.mode!r}")
    return _iterate(scenario, stack, config, _start(scenario, stack, config, init), on_iteration)


def run_clean(scenario: Scenario, stack: Stack) -> AttackResult:
    config = AttackConfig(mode="none")
    noise = init_noise(config, site_shapes(stack.dims), config.resolve_eps(stack))
    state, clean = clean_breakdown(scenario, stack)
    return AttackResult(noise, clean, clean, clean, state, [])


@dataclass
class UniversalResult:
    noise: NoiseBundle
    fit_seeds: list[int]
    results: dict[int, AttackResult]
    trace: list[dict] = field(default_factory=list)


def holdout_split(scenarios: Sequence[Scenario], holdout: float = 0.2,
                  fold: int | None = None) -> tuple[list[Scenario], list[Scenario]]:
    """Split by scenario id into (fit, held-out).

    With ``fold=None`` the top ``holdout`` fraction of ids is held out. With
    ``fold=f`` the ids sorted ascending are cut into ``round(1 / holdout)``
    contiguous blocks and block ``f`` is held out, so cycling ``f`` holds out
    every scenario exactly once. A single scenario is both fit and held out.
    """
    ordered = sorted(scenarios, key=lambda s: s.seed)
    if len(ordered) < 2:
        return ordered, ordered
    if fold is None:
        n_eval = max(1, int(round(holdout * len(ordered))))
        return ordered[:-n_eval], ordered[-n_eval:]
    n_folds = n_holdout_folds(holdout)
    if not 0 <= fold < n_folds:
        raise ValueError(f"fold {fold} outside [0, {n_folds})")
    lo = fold * len(ordered) // n_folds
    hi = (fold + 1) * len(ordered) // n_folds
    return ordered[:lo] + ordered[hi:], ordered[lo:hi]


def n_holdout_folds(holdout: float) -> int:
    if not 0 < holdout < 1:
        raise ValueError(f"holdout fraction must be in (0, 1), got {holdout}")
    return max(2, int(round(1.0 / holdout)))


def fit_universal(scenarios: Sequence[Scenario], stack: Stack, config: AttackConfig,
                  init: NoiseBundle | None = None, on_visit: Callable | None = None) -> tuple[NoiseBundle, list]:
    """One shared image noise: ``config.k`` passes, one signed step per scenario visit."""
    if not scenarios:
        raise ValueError("dataset must be nonempty")
    if config.mode != "image-agnostic":
        raise ValueError(f"universal fitting needs mode 'image-agnostic', got {config.mode!r}")
    noise = init.copy() if init is not None else init_noise(config, site_shapes(stack.dims), config.resolve_eps(stack))
    active = config.active_sites()
    ordered = sorted(scenarios, key=lambda s: s.seed)
    trace: list[dict] = []
    for p in range(config.k):
        for s in ordered:
            try:
                _, losses, grads = _forward(s, stack, noise, grad=True)
            except (PipelineError, dc.NonFiniteError) as exc:
                raise AttackAborted(f"non-finite loss in pass {p}: {exc}", p, s.seed) from exc
            noise = pgd_update(noise, grads, config, active)
            _record(trace, p, noise, losses, active)
            trace[-1]["scenario"] = s.seed
            if on_visit is not None:
                on_visit(p, s.seed, noise)
    return noise, trace


def apply_universal(scenario: Scenario, stack: Stack, noise: NoiseBundle) -> AttackResult:
    state, losses, _ = _forward(scenario, stack, noise, grad=False)
    _, clean = clean_breakdown(scenario, stack)
    return AttackResult(noise, clean, losses, losses, state, [])


def run_image_agnostic(dataset: Sequence[Scenario], stack: Stack, config: AttackConfig | None = None,
                       holdout: float = 0.2, init: NoiseBundle | None = None,
                       fold: int | None = None) -> UniversalResult:
    """Fit a universal image noise on the low-id 80% and evaluate it on the held-out rest.

    ``fold`` selects a cross-fitting block instead (see :func:`holdout_split`).
    A single-scenario dataset is fitted and evaluated on that scenario.
    """
    config = config or AttackConfig(mode="image-agnostic")
    fit, held = holdout_split(dataset, holdout, fold)
    noise, trace = fit_universal(fit, stack, config, init)
    results = {s.seed: apply_universal(s, stack, noise) for s in held}
    return UniversalResult(noise, [s.seed for s in fit], results, trace)


# ---------------------------------------------------------------------------
# persistence


def save_bundle(bundle: NoiseBundle, path) -> None:
    """JSON header (site shapes, eps, sigma, seed, mode, version) + little-endian f64 payloads."""
    from .stack import _write_container

    header = {
        "format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "seed": bundle.seed, "mode": bundle.mode,
        "sites": [{"site": s, "shape": list(bundle.sites[s].shape)} for s in SITES],
        "eps": bundle.eps, "sigma": bundle.sigma,
    }
    _write_container(path, header, [bundle.sites[s] for s in SITES])


def load_bundle(path) -> NoiseBundle:
    from .stack import _read_container, _split_payload

    header, payload = _read_container(path)
    if header.get("format") != BUNDLE_FORMAT or header.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{path}: unsupported noise file {header.get('format')} v{header.get('version')}")
    arrays = _split_payload(payload, [e["shape"] for e in header["sites"]], path)
    sites = {e["site"]: a for e, a in zip(header["sites"], arrays)}
    return NoiseBundle(sites, header["eps"], header["sigma"], header["seed"], header["mode"])
