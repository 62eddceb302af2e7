import math

import numpy as np
import pytest

from modwise import diffcore as dc
from modwise.diffcore import Graph, finite_difference_check
from modwise.scenario import Dims
from modwise.stack import (SITES, STAGES, PipelineError, Stack, init_stack, load_stack, make_batch, module_losses,
                           run_module, run_pipeline, save_stack, site_shapes, zero_params)

DIMS = Dims()


def _stage_inputs(stage, scenario, stack, rng=None):
    """Clean interface inputs of ``stage`` for one scenario (numpy arrays)."""
    st = run_pipeline([scenario], stack)
    emb_g = Graph()
    emb, _ = run_module("track", {"image": st.q_image.data}, stack.params["track"], st.batch, emb_g)
    return {
        "track": {"image": st.q_image.data},
        "map": {"emb": emb.data},
        "motion": {"q_agents": st.q_agents.data, "q_map": st.q_map.data},
        "occupancy": {"q_motion": st.q_motion.data, "futures": st.futures.data},
        "plan": {"q_ego": st.q_ego.data, "q_motion": st.q_motion.data},
    }[stage], st.batch


def test_site_shapes():
    assert site_shapes(DIMS) == {"image": (64, 64, 2), "agents": (8, 32), "map": (6, 32), "motion": (8, 32),
                                 "ego": (32,)}


def test_weight_shapes_match_declared_dims():
    stack = init_stack(0)
    for stage in STAGES:
        p = stack.params[stage]
        if stage == "track":
            assert p.weights["pe_w"].shape[0] == p.dims["in_patch"]
            assert p.weights["w1"].shape[0] == p.dims["out"] + p.dims["in_past"]
        else:
            assert p.weights["w1"].shape[0] == p.dims["in"], stage
        assert p.weights["w2"].shape[1] == p.dims["out"], stage


@pytest.mark.parametrize("stage", ["track", "map", "motion", "plan"])
def test_zero_weights_give_zero_output(stage, scenario, small_stack):
    inputs, batch = _stage_inputs(stage, scenario, small_stack)
    out = run_module(stage, inputs, zero_params(stage), batch)
    outs = out if isinstance(out, tuple) else (out,)
    for o in outs:
        assert not np.any(o.data)


def test_zero_weights_occupancy_is_zero_logit(scenario, small_stack):
    inputs, batch = _stage_inputs("occupancy", scenario, small_stack)
    out = run_module("occupancy", inputs, zero_params("occupancy"), batch)
    # zero pre-activation everywhere, so the probability is exactly one half
    assert np.all(out.data == 0.5)


@pytest.mark.parametrize("stage", STAGES)
def test_run_module_is_deterministic(stage, scenario, small_stack):
    inputs, batch = _stage_inputs(stage, scenario, small_stack)
    a = run_module(stage, inputs, small_stack.params[stage], batch)
    b = run_module(stage, inputs, small_stack.params[stage], batch)
    for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        assert x.data.tobytes() == y.data.tobytes()


STAGE_INPUT = {"track": "image", "map": "emb", "motion": "q_agents", "occupancy": "q_motion", "plan": "q_ego"}


@pytest.mark.parametrize("stage", STAGES)
def test_run_module_matches_finite_differences(stage, scenario, small_stack):
    inputs, batch = _stage_inputs(stage, scenario, small_stack)
    name = STAGE_INPUT[stage]
    rng = np.random.default_rng(len(stage))
    probe = run_module(stage, inputs, small_stack.params[stage], batch)
    probe = probe[-1] if isinstance(probe, tuple) else probe
    w = rng.normal(size=probe.shape)

    def f(x):
        out = run_module(stage, {**inputs, name: x}, small_stack.params[stage], batch)
        out = out[-1] if isinstance(out, tuple) else out
        return dc.sum(dc.mul(out, w))

    x0 = inputs[name]
    coords = rng.choice(x0.size, size=min(40, x0.size), replace=False)
    rep = finite_difference_check(f, x0, step=1e-5, tol=1e-4, coords=coords)
    assert rep.passed, rep.message


def test_run_module_rejects_wrong_width(scenario, small_stack):
    inputs, batch = _stage_inputs("plan", scenario, small_stack)
    bad = {"q_ego": inputs["q_ego"][:, :16], "q_motion": inputs["q_motion"]}
    with pytest.raises(dc.ShapeError, match="stage plan"):
        run_module("plan", bad, small_stack.params["plan"], batch)


def test_zero_noise_is_bit_exact(scenario, small_stack):
    clean = run_pipeline([scenario], small_stack)
    zero = run_pipeline([scenario], small_stack, noise={s: np.zeros(sh) for s, sh in site_shapes(DIMS).items()})
    for (k, a), (_, b) in zip(clean.interfaces().items(), zero.interfaces().items()):
        assert a.tobytes() == b.tobytes(), k
    for (k, a), (_, b) in zip(clean.outputs().items(), zero.outputs().items()):
        assert a.tobytes() == b.tobytes(), k


@pytest.mark.parametrize("site", SITES)
def test_noise_only_flows_downstream(site, scenario, small_stack):
    rng = np.random.default_rng(3)
    clean = run_pipeline([scenario], small_stack)
    noisy = run_pipeline([scenario], small_stack,
                         noise={site: rng.uniform(-0.1, 0.1, size=site_shapes(DIMS)[site])})
    k = SITES.index(site)
    ci, ni = clean.interfaces(), noisy.interfaces()
    for upstream in SITES[:k]:
        assert ci[upstream].tobytes() == ni[upstream].tobytes(), upstream
    # and the noise is live: the plan moves
    assert not np.array_equal(clean.plan.data, noisy.plan.data)


def test_ego_noise_leaves_other_heads_alone(scenario, small_stack):
    clean = run_pipeline([scenario], small_stack)
    noisy = run_pipeline([scenario], small_stack, noise={"ego": np.full(DIMS.D, 0.3)})
    for k in ("track_pos", "map_prob", "futures", "occ_pred"):
        assert clean.outputs()[k].tobytes() == noisy.outputs()[k].tobytes(), k


def test_plan_stays_in_scene(scenario, small_stack):
    st = run_pipeline([scenario], small_stack, noise={"ego": np.full(DIMS.D, 50.0)})
    assert np.all(np.isfinite(st.plan.data)) and np.all(np.abs(st.plan.data) <= DIMS.R)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_intermediate_names_stage(scenario, small_stack):
    params = dict(small_stack.params)
    bad = {k: v.copy() for k, v in params["map"].weights.items()}
    bad["w1"] = np.full_like(bad["w1"], 1e308)
    from modwise.stack import ModuleParams
    params["map"] = ModuleParams("map", bad, params["map"].dims)
    stack = Stack(small_stack.dims, params, 0)
    with pytest.raises(PipelineError, match="stage map"):
        run_pipeline([scenario], stack)


def test_noise_shape_mismatch_rejected(scenario, small_stack):
    with pytest.raises(dc.ShapeError, match="agents"):
        run_pipeline([scenario], small_stack, noise={"agents": np.zeros((7, 32))})


def test_losses_identity_and_signs(eval_scenarios, small_stack):
    st = run_pipeline(eval_scenarios, small_stack)
    lb = module_losses(st)
    parts = [lb.l_track, lb.l_map, lb.l_motion, lb.l_occ, lb.l_plan]
    assert all(p >= 0 for p in parts)
    assert lb.l_att == parts[0] + parts[1] + parts[2] + parts[3] + parts[4]
    assert lb.l_att == lb.tensors["l_att"].item()
    assert lb.l_adv == 0.0 and lb.l_noi == 0.0


def _set(t, value):
    t.data = np.asarray(value, float).reshape(t.shape).copy()


def test_position_losses_vanish_at_ground_truth(scenario, small_stack):
    st = run_pipeline([scenario], small_stack)
    b = st.batch
    gt_track = np.stack([b.stacked("agent_past")[:, :, -1], b.stacked("agent_now")], axis=2)
    _set(st.track_pos, gt_track)
    fut = np.repeat(b.stacked("agent_future")[:, :, None], DIMS.K_modes, axis=2)
    _set(st.futures, fut)
    _set(st.plan, b.stacked("ego_gt"))
    lb = module_losses(st)
    assert lb.l_track == 0.0 and lb.l_motion == 0.0 and lb.l_plan == 0.0


def test_occupancy_loss_at_one_half(scenario, small_stack):
    st = run_pipeline([scenario], small_stack)
    _set(st.occ_pred, np.full(st.occ_pred.shape, 0.5))
    assert math.isclose(module_losses(st).l_occ, math.log(2.0), rel_tol=1e-12)


def test_motion_loss_uses_best_mode(scenario, small_stack):
    st = run_pipeline([scenario], small_stack)
    gt = st.batch.stacked("agent_future")
    fut = np.repeat(gt[:, :, None], DIMS.K_modes, axis=2) + 3.0
    fut[:, :, 1] = gt  # mode 1 is exact
    _set(st.futures, fut)
    assert module_losses(st).l_motion == 0.0


def test_weights_round_trip(tmp_path, small_stack):
    path = tmp_path / "w.bin"
    save_stack(small_stack, path)
    loaded = load_stack(path)
    assert loaded.interface_std == small_stack.interface_std
    for stage in STAGES:
        for k, v in small_stack.params[stage].weights.items():
            assert loaded.params[stage].weights[k].tobytes() == v.tobytes()
    assert loaded.params["plan"].frozen


def test_frozen_params_are_read_only(small_stack):
    with pytest.raises(ValueError):
        small_stack.params["plan"].weights["w1"][0, 0] = 1.0


def test_batched_and_single_forward_agree(eval_scenarios, small_stack):
    batched = run_pipeline(make_batch(eval_scenarios), small_stack)
    for i, s in enumerate(eval_scenarios):
        single = run_pipeline([s], small_stack)
        np.testing.assert_allclose(single.plan.data[0], batched.plan.data[i], rtol=1e-12, atol=1e-12)
