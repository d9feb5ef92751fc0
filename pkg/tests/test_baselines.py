import numpy as np
import pytest

from hmoe_isac.agent import HMoEAgent, TrajectoryBuffer, bernoulli_log_prob, logit_grads, squash
from hmoe_isac.baselines import (
    POLICIES, BaselineKind, FixedSchedulePolicy, HomogeneousMoEAgent, MonolithicPPOAgent, clipped_surrogate,
    make_policy, radar_only_policy, vision_only_policy,
)
from hmoe_isac.env import EpisodeConfig
from hmoe_isac.neural import grad_check

SMALL = EpisodeConfig(horizon=12)


def test_registry_names():
    assert set(POLICIES) == {"vision-only", "radar-only", "ppo", "homo-moe", "hmoe-no-aoi", "hmoe"}
    assert {k.value for k in BaselineKind} <= set(POLICIES)


def test_unknown_policy():
    with pytest.raises(ValueError):
        make_policy("nope")


def test_vision_only_schedule_and_energy():
    p = vision_only_policy(n_episodes=0).fit(EpisodeConfig())
    buf = p.rollout([0, 2, 0])
    assert all(np.all(s == 1) for s in buf.schedules)
    assert all(o.energy.computational == 40.0 for o in buf.outcomes)
    np.testing.assert_allclose([o.avg_bmp for o in buf.outcomes], 1 - np.exp(-0.05), rtol=1e-15)


def test_radar_only_schedule_and_energy():
    p = radar_only_policy(n_episodes=0).fit(EpisodeConfig())
    buf = p.rollout([0, 2, 0])
    assert all(np.all(s == 0) for s in buf.schedules)
    assert all(o.energy.computational == 0.0 for o in buf.outcomes)
    assert np.mean([o.energy.total for o in buf.outcomes]) > 60


def test_fixed_schedules_have_no_temporal_expert():
    p = vision_only_policy(n_episodes=1).fit(SMALL)
    assert not hasattr(p, "temporal_")
    assert not p.learns_schedule


def test_fixed_schedule_trains_spatial_expert():
    p = vision_only_policy(n_episodes=0).fit(SMALL)
    before = {k: v.copy() for k, v in p.spatial_.params.items()}
    p.continue_fit(2)
    assert any(not np.array_equal(before[k], v) for k, v in p.spatial_.params.items())


def test_clip_identity_equals_vanilla_gradient():
    adv = np.array([1.5, -0.4, 0.2])
    _, d = clipped_surrogate(np.ones(3), adv, 0.2)
    np.testing.assert_array_equal(d, adv)


def test_clipped_samples_have_zero_gradient():
    ratio = np.array([1.3, 1.3, 0.7, 0.7, 1.1])
    adv = np.array([1.0, -1.0, -1.0, 1.0, 1.0])
    _, d = clipped_surrogate(ratio, adv, 0.2)
    np.testing.assert_array_equal(d == 0, [True, False, True, False, False])


def test_clipped_surrogate_derivative_matches_finite_difference():
    rng = np.random.default_rng(0)
    logr = {"x": rng.normal(scale=0.3, size=20)}
    adv = rng.normal(size=20)
    _, d = clipped_surrogate(np.exp(logr["x"]), adv, 0.2)
    rep = grad_check(lambda: float(np.sum(clipped_surrogate(np.exp(logr["x"]), adv, 0.2)[0])), logr, {"x": d})
    assert rep.passed(1e-6)


def _buffer(policy, seed=0):
    return policy.rollout([seed, 7, 0])


def test_ppo_loss_gradient():
    # a large physics weight lifts the phase-head gradients above finite-difference round-off
    p = MonolithicPPOAgent(n_episodes=0, hidden=8, physics_weight=50.0).fit(EpisodeConfig(horizon=6))
    buf = _buffer(p)
    feats = p._features(np.stack(buf.states))
    actions = np.stack(buf.schedules).astype(float)
    rng = np.random.default_rng(1)
    old = np.asarray(buf.log_probs) + rng.normal(scale=0.1, size=len(buf))
    adv, ret = rng.normal(size=len(buf)), rng.normal(size=len(buf))
    ch = np.stack(buf.channels)
    args = (feats, actions, old, adv, ret, ch, 1e-3)
    p.loss_and_grad(*args)
    g = {k: v.copy() for k, v in p.grads.items()}
    rep = grad_check(lambda: p.loss_and_grad(*args), p.params, g, max_entries=30, rng=0)
    assert rep.passed(1e-5), rep


def test_homo_moe_loss_gradient():
    p = HomogeneousMoEAgent(n_episodes=0, hidden=8, physics_weight=50.0).fit(EpisodeConfig(horizon=6))
    # break the zero gate so its gradient path is exercised
    p.gate_.params["W"][...] = np.random.default_rng(2).normal(scale=0.5, size=p.gate_.params["W"].shape)
    buf = _buffer(p)
    feats = p._features(np.stack(buf.states))
    args = (feats, np.stack(buf.schedules).astype(float), np.random.default_rng(3).normal(size=len(buf)),
            np.stack(buf.channels), 1e-3)
    p.loss_and_grad(*args)
    g = {k: v.copy() for k, v in p.grads.items()}
    rep = grad_check(lambda: p.loss_and_grad(*args), p.params, g, max_entries=30, rng=0)
    assert rep.passed(1e-5), rep


def test_gate_sums_to_one():
    p = HomogeneousMoEAgent(n_episodes=0).fit(SMALL)
    p.gate_.params["W"][...] = np.random.default_rng(0).normal(size=p.gate_.params["W"].shape)
    g = p.gate(np.random.default_rng(1).normal(size=(50, 12)))
    np.testing.assert_allclose(g.sum(axis=1), 1.0, rtol=1e-14)


def test_tied_experts_agree_at_init():
    p = HomogeneousMoEAgent(n_episodes=0, tie_init=True).fit(SMALL)
    x = np.random.default_rng(0).normal(size=(5, 12))
    out = p.expert_outputs(x)
    assert np.array_equal(out[:, 0], out[:, 1])
    np.testing.assert_array_equal(p.gate(x), 0.5)


def test_ppo_spatial_gradient_reaches_trunk():
    p = MonolithicPPOAgent(n_episodes=0, hidden=8).fit(SMALL)
    buf = _buffer(p)
    n = len(buf)
    feats = p._features(np.stack(buf.states))
    acts = np.stack(buf.schedules).astype(float)
    p.loss_and_grad(feats, acts, np.asarray(buf.log_probs), np.zeros(n), np.zeros(n), np.stack(buf.channels))
    # with zero advantages and zero value error only the spatial term remains
    p.value_head_.params["b"][...] = 0
    assert any(np.any(v != 0) for k, v in p.grads.items() if k.startswith("trunk"))


def test_ppo_and_moe_train_end_to_end():
    for cls in (MonolithicPPOAgent, HomogeneousMoEAgent):
        p = cls(n_episodes=2, hidden=8).fit(SMALL)
        assert len(p.history_) == 2
        assert all(np.isfinite(r.mean_energy) for r in p.history_)
        prob = p.predict_proba(np.zeros((4, 3))) if cls is MonolithicPPOAgent else None
        if prob is not None:
            assert np.all((prob > 0) & (prob < 1))


def test_no_aoi_factory():
    a = make_policy("hmoe-no-aoi")
    assert isinstance(a, HMoEAgent) and a.mask_aoi


def test_same_environment_noise_across_policies():
    # fairness: exogenous channels match slot for slot, only actions differ
    a = vision_only_policy(n_episodes=0).fit(SMALL).rollout([4, 2, 0])
    b = radar_only_policy(n_episodes=0).fit(SMALL).rollout([4, 2, 0])
    for x, y in zip(a.channels, b.channels):
        assert np.array_equal(x, y)
