"""Comparison policies run under the same environment and seeds as the
heterogeneous MoE agent.

* ``vision-only`` / ``radar-only``: fixed all-on / all-off schedules; phases
  come from a spatial expert trained with the same recipe as the H-MoE one.
* ``ppo``: one shared MLP trunk with Bernoulli, phase and value heads, trained
  with the clipped surrogate plus the spatial gain loss through the trunk.
* ``homo-moe``: two identical MLP experts mixed by a softmax gate; the mixed
  representation feeds both heads and the summed loss trains everything.
* ``hmoe-no-aoi``: the H-MoE agent with the age column masked out.
"""
from __future__ import annotations

from enum import Enum

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .agent import (Critic, HMoEAgent, PolicyBase, SpatialExpert, TrajectoryBuffer, bernoulli_entropy,
                    bernoulli_log_prob, compute_advantages, expert_spatial_loss, logit_grads,
                    sample_schedule, spatial_loss_and_grad, squash)
from .env import EpisodeConfig, JointAction
from .neural import Adam, Dense, Sequential, Tanh
from .validation import wrap_phase


class BaselineKind(str, Enum):
    VISION_ONLY = "vision-only"
    RADAR_ONLY = "radar-only"
    MONOLITHIC_PPO = "ppo"
    HOMOGENEOUS_MOE = "homo-moe"
    HMOE_NO_AOI = "hmoe-no-aoi"


class FixedSchedulePolicy(PolicyBase):
    """Constant schedule (``activate=True`` -> all users every slot)."""

    learns_schedule = False

    def __init__(self, activate: bool = True, n_episodes: int = 500, spatial_hidden: int = 64,
                 lr_spatial: float = 3e-4, physics_weight: float = 1e-2, random_state: int = 0):
        self.activate = activate
        self.n_episodes = n_episodes
        self.spatial_hidden = spatial_hidden
        self.lr_spatial = lr_spatial
        self.physics_weight = physics_weight
        self.random_state = random_state

    def _init_model(self, config: EpisodeConfig) -> None:
        ss = np.random.SeedSequence([self.random_state, 0])
        _, r_s, _, r_a = (np.random.default_rng(s) for s in ss.spawn(4))
        self.spatial_ = SpatialExpert(config.user_count, config.array.element_count, self.spatial_hidden, r_s)
        self.opt_spatial_ = Adam(self.spatial_.params, self.lr_spatial)
        self._action_rng = r_a
        self.config_ = config

    def schedule(self) -> np.ndarray:
        return np.full(self.config_.user_count, int(bool(self.activate)))

    def act(self, history, rng) -> tuple[JointAction, float]:
        phases = wrap_phase(self.spatial_.raw_phases(self._features(history[-1]))[0])
        return JointAction(self.schedule(), phases), 0.0

    def _update(self, buf: TrajectoryBuffer, progress: float = 0.0) -> dict:
        loss = expert_spatial_loss(self.spatial_, self._features(np.stack(buf.states)),
                                   np.stack(buf.channels), self.physics_weight)
        self.opt_spatial_.step(self.spatial_.grads)
        return {"spatial": loss}

    def tensors(self):
        return {f"spatial.{k}": v for k, v in self.spatial_.params.items()}

    def optimizers(self):
        return {"spatial": self.opt_spatial_}


def vision_only_policy(**kw) -> FixedSchedulePolicy:
    return FixedSchedulePolicy(activate=True, **kw)


def radar_only_policy(**kw) -> FixedSchedulePolicy:
    return FixedSchedulePolicy(activate=False, **kw)


def trunk(n_in: int, hidden: int, rng) -> Sequential:
    return Sequential(Dense(n_in, hidden, rng), Tanh(), Dense(hidden, hidden, rng), Tanh())


def clipped_surrogate(ratio, advantages, clip: float):
    """PPO objective per sample and its derivative w.r.t. the new log-prob.

    The derivative is ``ratio * A`` where the unclipped branch is active and
    zero where clipping binds (ratio > 1 + clip with A > 0, or ratio < 1 - clip
    with A < 0).
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    active = ~(((adv > 0) & (ratio > 1 + clip)) | ((adv < 0) & (ratio < 1 - clip)))
    return obj, np.where(active, unclipped, 0.0)


class MonolithicPPOAgent(PolicyBase):
    """Shared-trunk actor-critic trained with the clipped surrogate objective.

    The spatial gain loss is added to the same objective, so its gradient
    reaches the trunk that also carries the scheduling representation.
    """

    def __init__(self, n_episodes: int = 500, hidden: int = 64, gamma: float = 0.9, lr: float = 3e-4,
                 clip: float = 0.2, epochs: int = 4, value_coef: float = 0.5, physics_weight: float = 1e-2,
                 entropy_coef: float = 1e-3, eps: float = 1e-3, random_state: int = 0):
        self.n_episodes = n_episodes
        self.hidden = hidden
        self.gamma = gamma
        self.lr = lr
        self.clip = clip
        self.epochs = epochs
        self.value_coef = value_coef
        self.physics_weight = physics_weight
        self.entropy_coef = entropy_coef
        self.eps = eps
        self.random_state = random_state

    def _init_model(self, config: EpisodeConfig) -> None:
        ss = np.random.SeedSequence([self.random_state, 0])
        r_n, _, _, r_a = (np.random.default_rng(s) for s in ss.spawn(4))
        k, m = config.user_count, config.array.element_count
        self.trunk_ = trunk(3 * k, self.hidden, r_n)
        self.policy_head_ = Dense(self.hidden, k, r_n)
        self.phase_head_ = Dense(self.hidden, k * m, r_n)
        self.value_head_ = Dense(self.hidden, 1, r_n)
        self.opt_ = Adam(self.params, self.lr)
        self._action_rng = r_a
        self.config_ = config

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self._modules():
            out.update({f"{name}.{k}": v for k, v in mod.params.items()})
        return out

    @property
    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self._modules():
            out.update({f"{name}.{k}": v for k, v in mod.grads.items()})
        return out

    def _modules(self):
        return (("trunk", self.trunk_), ("policy", self.policy_head_),
                ("phase", self.phase_head_), ("value", self.value_head_))

    def _forward(self, feats):
        u = self.trunk_.forward(np.atleast_2d(feats))
        k, m = self.config_.user_count, self.config_.array.element_count
        z = self.policy_head_.forward(u)
        phi = self.phase_head_.forward(u).reshape(-1, k, m)
        v = self.value_head_.forward(u)[:, 0]
        return z, phi, v

    def act(self, history, rng) -> tuple[JointAction, float]:
        z, phi, _ = self._forward(self._features(history[-1]))
        schedule, log_prob = sample_schedule(squash(z[0], self.eps), rng)
        return JointAction(schedule, wrap_phase(phi[0])), log_prob

    def predict_proba(self, state) -> np.ndarray:
        check_is_fitted(self, "trunk_")
        return squash(self._forward(self._features(state))[0][0], self.eps)

    def loss_and_grad(self, feats, actions, old_log_probs, advantages, returns, channels,
                      entropy_coef: float = 0.0) -> float:
        for _, mod in self._modules():
            mod.zero_grad()
        n, k, m = channels.shape
        z, phi, v = self._forward(feats)
        p = squash(z, self.eps)
        ratio = np.exp(bernoulli_log_prob(actions, p) - old_log_probs)
        obj, dobj = clipped_surrogate(ratio, advantages, self.clip)
        # d(-mean obj)/dz: chain through d logp / dz with per-sample weight dobj
        dz = logit_grads(actions, z, self.eps, dobj, entropy_coef) / n
        dv = self.value_coef * (v - returns) / n
        spat, dphi = spatial_loss_and_grad(phi, channels, self.physics_weight / (k * n * m))
        du = (self.policy_head_.backward(dz) + self.value_head_.backward(dv[:, None])
              + self.phase_head_.backward(dphi.reshape(n, -1)))
        self.trunk_.backward(du)
        return float(-obj.mean() + 0.5 * self.value_coef * np.mean((v - returns) ** 2) + spat
                     - entropy_coef * np.mean(bernoulli_entropy(p)))

    def _update(self, buf: TrajectoryBuffer, progress: float = 0.0) -> dict:
        feats = self._features(np.stack(buf.states))
        actions = np.stack(buf.schedules).astype(np.float64)
        old = np.asarray(buf.log_probs)
        channels = np.stack(buf.channels)
        _, _, values = self._forward(feats)
        returns, adv = compute_advantages(buf.rewards, values, self.gamma)
        coef = self.entropy_coef * max(0.0, 1.0 - progress)
        loss = 0.0
        for _ in range(self.epochs):
            loss = self.loss_and_grad(feats, actions, old, adv, returns, channels, coef)
            self.opt_.step(self.grads)
        return {"total": loss}

    def tensors(self):
        return self.params

    def optimizers(self):
        return {"shared": self.opt_}


class HomogeneousMoEAgent(PolicyBase):
    """Two structurally identical MLP experts mixed by a learned softmax gate."""

    def __init__(self, n_episodes: int = 500, hidden: int = 64, gamma: float = 0.9, lr: float = 1e-3,
                 lr_critic: float = 1e-3, critic_hidden: int = 64, physics_weight: float = 1e-2,
                 entropy_coef: float = 1e-3, eps: float = 1e-3, n_experts: int = 2, tie_init: bool = False,
                 random_state: int = 0):
        self.n_episodes = n_episodes
        self.hidden = hidden
        self.gamma = gamma
        self.lr = lr
        self.lr_critic = lr_critic
        self.critic_hidden = critic_hidden
        self.physics_weight = physics_weight
        self.entropy_coef = entropy_coef
        self.eps = eps
        self.n_experts = n_experts
        self.tie_init = tie_init
        self.random_state = random_state

    def _init_model(self, config: EpisodeConfig) -> None:
        ss = np.random.SeedSequence([self.random_state, 0])
        r_n, _, r_c, r_a = (np.random.default_rng(s) for s in ss.spawn(4))
        k, m = config.user_count, config.array.element_count
        self.experts_ = [trunk(3 * k, self.hidden, r_n) for _ in range(self.n_experts)]
        if self.tie_init:
            for e in self.experts_[1:]:
                e.load_state_dict(self.experts_[0].state_dict())
        self.gate_ = Dense(3 * k, self.n_experts, zero=True)
        self.policy_head_ = Dense(self.hidden, k, r_n)
        self.phase_head_ = Dense(self.hidden, k * m, r_n)
        self.critic_ = Critic(k, self.critic_hidden, self.gamma, r_c)
        self.opt_ = Adam(self.params, self.lr)
        self.opt_critic_ = Adam(self.critic_.params, self.lr_critic)
        self._action_rng = r_a
        self.config_ = config

    def _modules(self):
        mods = [(f"expert{i}", e) for i, e in enumerate(self.experts_)]
        return mods + [("gate", self.gate_), ("policy", self.policy_head_), ("phase", self.phase_head_)]

    @property
    def params(self):
        return {f"{n}.{k}": v for n, mod in self._modules() for k, v in mod.params.items()}

    @property
    def grads(self):
        return {f"{n}.{k}": v for n, mod in self._modules() for k, v in mod.grads.items()}

    def gate(self, feats) -> np.ndarray:
        logits = self.gate_.forward(np.atleast_2d(feats))
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    def _forward(self, feats):
        feats = np.atleast_2d(feats)
        g = self.gate(feats)
        outs = np.stack([e.forward(feats) for e in self.experts_], axis=1)
        u = np.einsum("be,beh->bh", g, outs)
        k, m = self.config_.user_count, self.config_.array.element_count
        self._mix = (g, outs)
        return self.policy_head_.forward(u), self.phase_head_.forward(u).reshape(-1, k, m)

    def expert_outputs(self, feats) -> np.ndarray:
        return np.stack([e.forward(np.atleast_2d(feats)) for e in self.experts_], axis=1)

    def _backward(self, du):
        g, outs = self._mix
        for i, e in enumerate(self.experts_):
            e.backward(g[:, i:i + 1] * du)
        dg = np.einsum("bh,beh->be", du, outs)
        dlogit = g * (dg - np.sum(g * dg, axis=1, keepdims=True))
        self.gate_.backward(dlogit)

    def act(self, history, rng) -> tuple[JointAction, float]:
        z, phi = self._forward(self._features(history[-1]))
        schedule, log_prob = sample_schedule(squash(z[0], self.eps), rng)
        return JointAction(schedule, wrap_phase(phi[0])), log_prob

    def loss_and_grad(self, feats, actions, advantages, channels, entropy_coef: float = 0.0) -> float:
        for _, mod in self._modules():
            mod.zero_grad()
        n, k, m = channels.shape
        z, phi = self._forward(feats)
        p = squash(z, self.eps)
        temp = -np.mean(bernoulli_log_prob(actions, p) * advantages) - entropy_coef * np.mean(bernoulli_entropy(p))
        dz = logit_grads(actions, z, self.eps, advantages, entropy_coef) / n
        spat, dphi = spatial_loss_and_grad(phi, channels, self.physics_weight / (k * n * m))
        du = self.policy_head_.backward(dz) + self.phase_head_.backward(dphi.reshape(n, -1))
        self._backward(du)
        return float(temp + spat)

    def _update(self, buf: TrajectoryBuffer, progress: float = 0.0) -> dict:
        feats = self._features(np.stack(buf.states))
        values = self.critic_.value(feats)
        returns, adv = compute_advantages(buf.rewards, values, self.gamma)
        coef = self.entropy_coef * max(0.0, 1.0 - progress)
        loss = self.loss_and_grad(feats, np.stack(buf.schedules).astype(np.float64), adv,
                                  np.stack(buf.channels), coef)
        self.opt_.step(self.grads)
        self.critic_.zero_grad()
        closs = self.critic_.loss_and_grad(feats, returns)
        self.opt_critic_.step(self.critic_.grads)
        return {"total": loss, "critic": closs}

    def tensors(self):
        return {**self.params, **{f"critic.{k}": v for k, v in self.critic_.params.items()}}

    def optimizers(self):
        return {"shared": self.opt_, "critic": self.opt_critic_}


def hmoe_no_aoi_agent(**kw) -> HMoEAgent:
    return HMoEAgent(mask_aoi=True, **kw)


POLICIES = {
    "hmoe": HMoEAgent,
    "hmoe-no-aoi": hmoe_no_aoi_agent,
    "ppo": MonolithicPPOAgent,
    "homo-moe": HomogeneousMoEAgent,
    "vision-only": vision_only_policy,
    "radar-only": radar_only_policy,
}


def make_policy(name: str, **params) -> PolicyBase:
    try:
        factory = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None
    return factory(**params)
