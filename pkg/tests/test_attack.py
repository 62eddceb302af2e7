import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modwise import attack as atk
from modwise.attack import (DEFAULT_SIGMA, IMAGE_EPS, AttackAborted, AttackConfig, NoiseBundle, adversarial_loss,
                            holdout_split, init_noise, load_bundle, noise_loss, pgd_update, run_clean,
                            run_image_agnostic, run_image_specific, run_module_wise, save_bundle)
from modwise.scenario import Dims
from modwise.stack import SITES, PipelineError, module_losses, run_pipeline, site_shapes

DIMS = Dims()
SHAPES = site_shapes(DIMS)
FEATURES = ("agents", "map", "motion", "ego")


def _eps(small_stack, config=AttackConfig()):
    return config.resolve_eps(small_stack)


def test_step_size_is_eps_over_root_k():
    cfg = AttackConfig(k=10)
    assert cfg.step_size(IMAGE_EPS) == 8 / (255 * math.sqrt(10))
    assert cfg.step_size(IMAGE_EPS) == pytest.approx(0.0099209, abs=1e-7)


def test_config_validation():
    with pytest.raises(ValueError, match="k must"):
        AttackConfig(k=0)
    with pytest.raises(ValueError, match="eps"):
        AttackConfig(eps={"image": -1.0})
    with pytest.raises(ValueError, match="unknown noise site"):
        AttackConfig(eps={"lidar": 1.0})
    with pytest.raises(ValueError, match="mode"):
        AttackConfig(mode="random")


def test_active_sites_by_mode():
    assert AttackConfig(mode="none").active_sites() == ()
    assert AttackConfig(mode="image-specific").active_sites() == ("image",)
    assert AttackConfig(mode="image-agnostic").active_sites() == ("image",)
    assert AttackConfig().active_sites() == SITES
    assert AttackConfig(eps={"map": 0.0}).active_sites() == ("image", "agents", "motion", "ego")


def test_feature_eps_needs_statistics():
    with pytest.raises(ValueError, match="feature site"):
        AttackConfig().resolve_eps(None)
    eps = AttackConfig(mode="image-specific").resolve_eps(None)
    assert eps["image"] == IMAGE_EPS


def test_init_is_uniform_in_box():
    shapes = {s: (100_000,) for s in SITES}
    eps = {s: 0.1 for s in SITES}
    n = init_noise(AttackConfig(seed=4), shapes, eps)
    for s in SITES:
        x = n.sites[s]
        assert np.abs(x).max() <= 0.1
        # uniform on [-eps, eps]: mean 0 within 3 standard errors, variance eps^2 / 3
        assert abs(x.mean()) < 3 * 0.1 / math.sqrt(3 * 1e5)
        assert x.var() == pytest.approx(0.01 / 3, rel=0.02)
    # sites draw from independent streams
    assert not np.array_equal(n.sites["agents"], n.sites["map"])


def test_init_is_reproducible_and_stream_keyed(small_stack):
    cfg = AttackConfig(seed=7)
    eps = _eps(small_stack, cfg)
    a = init_noise(cfg, SHAPES, eps, stream=1)
    b = init_noise(cfg, SHAPES, eps, stream=1)
    c = init_noise(cfg, SHAPES, eps, stream=2)
    for s in SITES:
        assert a.sites[s].tobytes() == b.sites[s].tobytes()
        assert not np.array_equal(a.sites[s], c.sites[s])


def test_init_inactive_sites_are_zero(small_stack):
    cfg = AttackConfig(mode="image-specific")
    n = init_noise(cfg, SHAPES, _eps(small_stack, cfg))
    assert np.any(n.sites["image"])
    assert all(not np.any(n.sites[s]) for s in FEATURES)


def test_noise_loss_values():
    zero = {s: np.zeros(SHAPES[s]) for s in SITES}
    assert noise_loss(zero) == 0.0
    one = dict(zero)
    one["agents"] = np.zeros(SHAPES["agents"])
    one["agents"][0, :2] = [1.8, 2.4]   # norm 3
    assert noise_loss(one) == pytest.approx(6e-4, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20), c=st.floats(0.0, 100.0))
def test_noise_loss_is_positively_homogeneous(seed, c):
    rng = np.random.default_rng(seed)
    n = {s: rng.normal(size=SHAPES[s]) for s in SITES}
    base = noise_loss(n)
    scaled = noise_loss({s: c * v for s, v in n.items()})
    assert scaled == pytest.approx(c * base, rel=1e-12, abs=1e-300)
    assert base >= 0


def test_zero_noise_adversarial_equals_task_loss(scenario, small_stack):
    cfg = AttackConfig()
    zero = init_noise(AttackConfig(mode="none"), SHAPES, _eps(small_stack))
    state = run_pipeline([scenario], small_stack, noise=zero.sites)
    lb = adversarial_loss(state, scenario, zero, cfg)
    assert lb.l_noi == 0.0 and lb.l_adv == lb.l_att
    assert lb.l_att == module_losses(run_pipeline([scenario], small_stack)).l_att


def test_doubling_sigma_doubles_noise_loss(small_stack):
    n = init_noise(AttackConfig(seed=1), SHAPES, _eps(small_stack))
    base = noise_loss(n, DEFAULT_SIGMA)
    double = noise_loss(n, {s: 2 * v for s, v in DEFAULT_SIGMA.items()})
    assert abs(double - 2 * base) <= math.ulp(2 * base)


def test_ledger_identities_hold_exactly(scenario, small_stack):
    res = run_module_wise(scenario, small_stack, AttackConfig(k=3))
    for lb in (res.initial, res.adversarial):
        assert lb.l_adv == lb.l_att - lb.l_noi
        assert lb.l_adv + lb.l_noi == lb.l_att
        assert lb.l_att == lb.l_track + lb.l_map + lb.l_motion + lb.l_occ + lb.l_plan
    for t in res.trace:
        assert t["l_adv"] == t["l_att"] - t["l_noi"]


def test_projection_is_idempotent(small_stack):
    cfg = AttackConfig()
    n = init_noise(cfg, SHAPES, _eps(small_stack))
    zero_grads = {s: np.zeros(SHAPES[s]) for s in SITES}
    # sgn(0) = 0: a zero gradient leaves noise untouched
    same = pgd_update(n, zero_grads, cfg)
    for s in SITES:
        assert same.sites[s].tobytes() == n.sites[s].tobytes()
    # a point already on the box boundary stays there under an outward push
    edge = n.copy()
    edge.sites["image"][:] = n.eps["image"]
    out = pgd_update(edge, {s: np.ones(SHAPES[s]) for s in SITES}, cfg)
    assert np.all(out.sites["image"] == n.eps["image"])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), k=st.integers(1, 20), eps=st.floats(1e-6, 10.0))
def test_pgd_step_stays_in_box(seed, k, eps):
    rng = np.random.default_rng(seed)
    cfg = AttackConfig(k=k, eps={s: eps for s in SITES})
    n = NoiseBundle({s: rng.uniform(-eps, eps, SHAPES[s]) for s in SITES}, {s: eps for s in SITES},
                    dict(DEFAULT_SIGMA), 0, "module-wise")
    grads = {s: rng.normal(size=SHAPES[s]) for s in SITES}
    out = pgd_update(n, grads, cfg)
    assert out.within_bounds()
    for s in SITES:
        assert np.all(np.abs(out.sites[s] - n.sites[s]) <= cfg.step_size(eps) * (1 + 1e-12))


def test_single_iteration_respects_bounds(scenario, small_stack):
    res = run_module_wise(scenario, small_stack, AttackConfig(k=1))
    assert len(res.trace) == 2
    assert res.noise.within_bounds()


def test_module_wise_every_iteration_in_bounds(scenario, small_stack):
    seen = []

    def check(it, noise):
        seen.append(it)
        for s in SITES:
            assert np.all(np.abs(noise.sites[s]) <= noise.eps[s])

    res = run_module_wise(scenario, small_stack, AttackConfig(k=4), on_iteration=check)
    assert seen == [0, 1, 2, 3]
    assert all(t["within_bounds"] and t["inactive_zero"] for t in res.trace)


def test_image_specific_pins_features(scenario, small_stack):
    def check(it, noise):
        assert np.all(np.abs(noise.sites["image"]) <= 8 / 255)
        for s in FEATURES:
            assert not np.any(noise.sites[s])

    res = run_image_specific(scenario, small_stack, AttackConfig(k=3, mode="image-specific"), on_iteration=check)
    assert res.noise.within_bounds()
    assert np.any(res.noise.sites["image"])


def test_tiny_eps_matches_clean(scenario, small_stack):
    res = run_module_wise(scenario, small_stack, AttackConfig(k=2, eps={s: 1e-12 for s in SITES}))
    assert res.adversarial.l_att == pytest.approx(res.clean.l_att, rel=1e-6)


def test_clean_mode_is_the_clean_loss(scenario, small_stack):
    res = run_clean(scenario, small_stack)
    assert res.adversarial.l_att == res.clean.l_att and res.adversarial.l_noi == 0.0
    assert all(not np.any(v) for v in res.noise.sites.values())


@pytest.mark.parametrize("site", FEATURES)
def test_site_ablation_is_bit_exact(site, scenario, small_stack):
    via_eps = AttackConfig(k=3, eps={site: 0.0}, sigma={**DEFAULT_SIGMA, site: 0.0})
    via_sites = AttackConfig(k=3, sites=tuple(s for s in SITES if s != site))
    a = run_module_wise(scenario, small_stack, via_eps)
    b = run_module_wise(scenario, small_stack, via_sites)
    assert not np.any(b.noise.sites[site])
    for s in SITES:
        assert a.noise.sites[s].tobytes() == b.noise.sites[s].tobytes(), s
    assert a.adversarial.l_adv == b.adversarial.l_adv
    assert a.adversarial.l_att == b.adversarial.l_att


def test_agnostic_on_one_scenario_reduces_to_specific(scenario, small_stack):
    k = 3
    agn = AttackConfig(k=k, mode="image-agnostic", seed=5)
    specific = AttackConfig(k=k, mode="image-specific", seed=5)
    init = init_noise(specific, SHAPES, specific.resolve_eps(small_stack), stream=None)
    u = run_image_agnostic([scenario], small_stack, agn)
    s = run_image_specific(scenario, small_stack, specific, init=init)
    assert u.noise.sites["image"].tobytes() == s.noise.sites["image"].tobytes()
    assert u.results[scenario.seed].adversarial.l_adv == s.adversarial.l_adv


def test_universal_visits_respect_bounds(eval_scenarios, small_stack):
    visits = []

    def check(p, seed, noise):
        visits.append((p, seed))
        assert noise.within_bounds()
        assert all(not np.any(noise.sites[s]) for s in FEATURES)

    cfg = AttackConfig(k=2, mode="image-agnostic")
    atk.fit_universal(eval_scenarios, small_stack, cfg, on_visit=check)
    seeds = sorted(s.seed for s in eval_scenarios)
    assert visits == [(p, s) for p in range(2) for s in seeds]


def test_holdout_split_by_id():
    class S:
        def __init__(self, seed):
            self.seed = seed

    data = [S(i) for i in (9, 3, 7, 1, 5, 0, 2, 4, 6, 8)]
    fit, held = holdout_split(data, 0.2)
    assert [s.seed for s in held] == [8, 9] and len(fit) == 8
    covered = []
    for f in range(5):
        fit, held = holdout_split(data, 0.2, fold=f)
        assert not {s.seed for s in fit} & {s.seed for s in held}
        covered += [s.seed for s in held]
    assert covered == list(range(10))


def test_abort_reports_iteration(monkeypatch, scenario, small_stack):
    calls = {"n": 0}
    real = atk.run_pipeline

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise PipelineError("non-finite value in stage motion")
        return real(*args, **kwargs)

    monkeypatch.setattr(atk, "run_pipeline", flaky)
    with pytest.raises(AttackAborted) as info:
        run_module_wise(scenario, small_stack, AttackConfig(k=5))
    assert info.value.iteration == 2
    assert info.value.scenario_seed == scenario.seed


def test_bundle_round_trip(tmp_path, small_stack):
    n = init_noise(AttackConfig(seed=3), SHAPES, _eps(small_stack))
    path = tmp_path / "n.bin"
    save_bundle(n, path)
    m = load_bundle(path)
    assert (m.seed, m.mode, m.eps, m.sigma) == (n.seed, n.mode, n.eps, n.sigma)
    for s in SITES:
        assert m.sites[s].tobytes() == n.sites[s].tobytes()


def test_scaled_bundle(small_stack):
    n = init_noise(AttackConfig(seed=3), SHAPES, _eps(small_stack))
    assert noise_loss(n.scaled(2.0)) == pytest.approx(2 * noise_loss(n), rel=1e-13)
    assert replace(n, mode="x").mode == "x"
