"""Heterogeneous mixture-of-experts controller.

A recurrent temporal expert schedules visual calibrations, a feed-forward
spatial expert emits analog phase matrices, and a critic supplies the
scheduling baseline. The temporal and spatial experts own disjoint parameter
sets and separate optimizers; each is updated only from its own loss.

Agents follow the scikit-learn estimator conventions: constructor arguments
are hyperparameters (``get_params``/``set_params``/``clone`` work), ``fit``
trains against an :class:`~hmoe_isac.env.EpisodeConfig`, and learned state
lives in attributes ending with an underscore.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._kernels import lstm_last_hidden
from .env import EpisodeConfig, IsacEnv, JointAction, StepOutcome, phases_to_beams
from .neural import Adam, Dense, LSTMCell, mlp, save_checkpoint, sigmoid
from .validation import check_window, wrap_phase

log = logging.getLogger(__name__)

DISTANCE_SCALE = 100.0


def featurize(states, age_unit: float = 1.0, mask_aoi: bool = False) -> np.ndarray:
    """(…, K, 3) raw states -> (…, 3K) normalised features.

    Angles are divided by pi/2, distances by a scene constant and ages by
    ``age_unit`` (the processing delay). Dividing by the AoI cap instead
    squeezes the useful age range into a sliver the LSTM barely resolves.
    ``mask_aoi`` zeroes the age column before anything else sees it.
    """
    s = np.array(states, dtype=np.float64)
    if mask_aoi:
        s[..., 2] = 0.0
    s[..., 0] /= np.pi / 2
    s[..., 1] /= DISTANCE_SCALE
    s[..., 2] /= age_unit
    return s.reshape(s.shape[:-2] + (-1,))


def mask_states(states) -> np.ndarray:
    s = np.array(states, dtype=np.float64)
    s[..., 2] = 0.0
    return s


# ---------------------------------------------------------------- trajectory

def state_window(history, n: int, length: int) -> np.ndarray:
    """States n-length+1 .. n, left-padded by repeating the first state."""
    idx = np.clip(np.arange(n - length + 1, n + 1), 0, None)
    return np.stack([history[i] for i in idx])


@dataclass
class TrajectoryBuffer:
    """Append-only per-episode record consumed by the end-of-episode updates."""

    states: list = field(default_factory=list)
    schedules: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)

    def append(self, state, schedule, log_prob, reward, channel, phases, outcome=None):
        self.states.append(np.asarray(state, dtype=np.float64))
        self.schedules.append(np.asarray(schedule))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.channels.append(np.asarray(channel))
        self.phases.append(np.asarray(phases))
        if outcome is not None:
            self.outcomes.append(outcome)

    def __len__(self) -> int:
        return len(self.rewards)

    def window(self, n: int, length: int) -> np.ndarray:
        return state_window(self.states, n, length)

    def windows(self, length: int) -> np.ndarray:
        s = np.stack(self.states)
        n = len(s)
        idx = np.clip(np.arange(n)[:, None] + np.arange(-length + 1, 1)[None, :], 0, None)
        return s[idx]


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def normalize(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return x - x.mean()
    return (x - x.mean()) / (x.std() + 1e-8)


# ----------------------------------------------------------------- policies

def squash(z: np.ndarray, eps: float) -> np.ndarray:
    """Sigmoid mapped into the open interval (eps, 1 - eps)."""
    return eps + (1 - 2 * eps) * sigmoid(z)


def bernoulli_log_prob(actions, probs) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    return np.sum(a * np.log(p) + (1 - a) * np.log1p(-p), axis=-1)


def sample_schedule(probs, seed=None) -> tuple[np.ndarray, float]:
    """Independent Bernoulli draws and their joint log-probability."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = np.asarray(probs, dtype=np.float64)
    a = (rng.random(p.shape) < p).astype(np.int64)
    return a, float(bernoulli_log_prob(a, p))


def logit_grads(actions, z, eps, weights, entropy_coef=0.0) -> np.ndarray:
    """d/dz of ``-(w * log P(a)) - c * H(p)`` for squashed-sigmoid Bernoullis.

    ``weights`` broadcasts over the user axis (one advantage per slot).
    """
    s = sigmoid(z)
    p = eps + (1 - 2 * eps) * s
    dp_dz = (1 - 2 * eps) * s * (1 - s)
    dlogp_dp = actions / p - (1 - actions) / (1 - p)
    g = -weights[..., None] * dlogp_dp * dp_dz
    if entropy_coef:
        dH_dp = np.log1p(-p) - np.log(p)
        g -= entropy_coef * dH_dp * dp_dz
    return g


def bernoulli_entropy(p) -> np.ndarray:
    p = np.asarray(p)
    return -(p * np.log(p) + (1 - p) * np.log1p(-p)).sum(axis=-1)


class TemporalExpert:
    """LSTM over a window of featurised states, then a dense policy head."""

    def __init__(self, n_users: int, hidden: int = 32, eps: float = 1e-3, rng=None, zero: bool = False):
        rng = rng or np.random.default_rng(0)
        self.lstm = LSTMCell(3 * n_users, hidden, rng, zero=zero)
        self.head = Dense(hidden, n_users, rng, zero=zero)
        self.eps = eps

    @property
    def params(self):
        return {**{f"lstm.{k}": v for k, v in self.lstm.params.items()},
                **{f"head.{k}": v for k, v in self.head.params.items()}}

    @property
    def grads(self):
        return {**{f"lstm.{k}": v for k, v in self.lstm.grads.items()},
                **{f"head.{k}": v for k, v in self.head.grads.items()}}

    def zero_grad(self):
        self.lstm.zero_grad()
        self.head.zero_grad()

    def logits(self, windows: np.ndarray) -> np.ndarray:
        """windows: (B, T, 3K) features -> (B, K) logits."""
        hs = self.lstm.forward(windows)
        return self.head.forward(hs[:, -1])

    def backward(self, dz: np.ndarray) -> None:
        dh_last = self.head.backward(dz)
        dhs = np.zeros(self.lstm._cache[1].shape)
        dhs[:, -1] = dh_last
        self.lstm.backward(dhs)


class SpatialExpert:
    """MLP from the flattened state to a K x M phase matrix."""

    def __init__(self, n_users: int, n_elements: int, hidden: int = 64, rng=None):
        rng = rng or np.random.default_rng(0)
        self.net = mlp([3 * n_users, hidden, hidden, n_users * n_elements], rng)
        self.shape = (n_users, n_elements)

    @property
    def params(self):
        return self.net.params

    @property
    def grads(self):
        return self.net.grads

    def zero_grad(self):
        self.net.zero_grad()

    def raw_phases(self, features: np.ndarray) -> np.ndarray:
        out = self.net.forward(np.atleast_2d(features))
        return out.reshape((-1,) + self.shape)

    def backward(self, dphi: np.ndarray) -> None:
        self.net.backward(dphi.reshape(dphi.shape[0], -1))


class Critic:
    def __init__(self, n_users: int, hidden: int = 64, gamma: float = 0.9, rng=None):
        rng = rng or np.random.default_rng(0)
        self.net = mlp([3 * n_users, hidden, hidden, 1], rng)
        self.gamma = gamma

    @property
    def params(self):
        return self.net.params

    @property
    def grads(self):
        return self.net.grads

    def zero_grad(self):
        self.net.zero_grad()

    def value(self, features: np.ndarray) -> np.ndarray:
        return self.net.forward(np.atleast_2d(features))[:, 0]

    def loss_and_grad(self, features, targets) -> float:
        """Mean squared error to ``targets``; accumulates parameter grads."""
        v = self.value(features)
        diff = v - targets
        self.net.backward((diff / len(diff))[:, None])
        return float(0.5 * np.mean(diff**2))


def critic_value(critic: Critic, features) -> float:
    return float(critic.value(features)[0])


def compute_advantages(rewards, values, gamma: float, normalize_adv: bool = True):
    """Discounted returns and ``G - V`` advantages (optionally standardised)."""
    G = discounted_returns(rewards, gamma)
    adv = G - np.asarray(values, dtype=np.float64)
    return G, (normalize(adv) if normalize_adv else adv)


def spatial_loss_and_grad(phases, channels, weight: float) -> tuple[float, np.ndarray]:
    """``-weight * sum |h_k^H v_k|^2`` over slots and users and its phase gradient.

    ``phases`` and ``channels`` are (N, K, M) (a single K x M slot is accepted).
    With ``g = h^H v`` and ``v_m = exp(j phi_m) / sqrt(M)``, the gain derivative is
    ``d|g|^2 / d phi_m = -2 Im(conj(g) conj(h_m) v_m)``.
    """
    phi = np.asarray(phases, dtype=np.float64)
    h = np.asarray(channels, dtype=np.complex128)
    if phi.shape != h.shape:
        raise ValueError(f"shape mismatch: phases {phi.shape} vs channel {h.shape}")
    v = phases_to_beams(phi)
    g = np.sum(np.conj(h) * v, axis=-1)
    loss = -weight * float(np.sum(np.abs(g) ** 2))
    dgain = -2 * np.imag(np.conj(g)[..., None] * np.conj(h) * v)
    return loss, -weight * dgain


def expert_spatial_loss(expert: SpatialExpert, features, channels, physics_weight: float) -> float:
    """Episode spatial loss of ``expert`` (gain normalised by K*N*M); fills its grads."""
    expert.zero_grad()
    raw = expert.raw_phases(features)
    n, k, m = channels.shape
    loss, dphi = spatial_loss_and_grad(raw, channels, physics_weight / (k * n * m))
    expert.backward(dphi)
    return loss


# ------------------------------------------------------------------ rollout

def run_episode(policy, config: EpisodeConfig, env_seed, action_rng: np.random.Generator,
                on_step=None) -> TrajectoryBuffer:
    """Roll one episode with ``policy.act`` and return the filled buffer."""
    env = IsacEnv(config)
    state = env.reset(env_seed)
    buf = TrajectoryBuffer()
    history = [state]
    policy.begin_episode()
    for n in range(config.horizon):
        action, log_prob = policy.act(history, action_rng)
        out = env.step(action)
        buf.append(state, action.schedule, log_prob, out.reward, out.true_channel, action.phases, out)
        if on_step is not None:
            on_step(n, out)
        state = out.next_state
        history.append(state)
    return buf


@dataclass
class EpisodeReport:
    episode: int
    mean_reward: float
    mean_energy: float
    mean_bmp: float
    mae: float
    activation_rate: float

    @classmethod
    def from_buffer(cls, episode: int, buf: TrajectoryBuffer) -> "EpisodeReport":
        outs: list[StepOutcome] = buf.outcomes
        return cls(
            episode=episode,
            mean_reward=float(np.mean(buf.rewards)),
            mean_energy=float(np.mean([o.energy.total for o in outs])),
            mean_bmp=float(np.mean([o.avg_bmp for o in outs])),
            mae=float(np.mean([o.sensing_error for o in outs])),
            activation_rate=float(np.mean(np.stack(buf.schedules))),
        )


def train_seed(seed: int, episode: int):
    return [seed, 1, episode]


def eval_seed(seed: int, episode: int):
    return [seed, 2, episode]


class PolicyBase(BaseEstimator):
    """Shared rollout / fit loop. Subclasses implement ``_init_model``,
    ``act`` and ``_update``."""

    learns_schedule = True

    def begin_episode(self) -> None:
        pass

    def _features(self, states):
        return featurize(states, self.config_.processing_delay, getattr(self, "mask_aoi", False))

    def fit(self, config: EpisodeConfig = EpisodeConfig(), n_episodes: int | None = None, callback=None):
        """Train for ``n_episodes`` (default: the ``n_episodes`` hyperparameter)."""
        self.config_ = config
        self._init_model(config)
        self.history_ = []
        self.continue_fit(n_episodes if n_episodes is not None else self.n_episodes, callback)
        return self

    def continue_fit(self, n_episodes: int, callback=None):
        check_is_fitted(self, "config_")
        total = max(n_episodes + len(self.history_), 1)
        for _ in range(n_episodes):
            ep = len(self.history_)
            buf = run_episode(self, self.config_, train_seed(self.random_state, ep), self._action_rng)
            self._update(buf, progress=ep / total)
            report = EpisodeReport.from_buffer(ep, buf)
            self.history_.append(report)
            if callback is not None:
                callback(self, buf, report)
            if ep % 50 == 0:
                log.debug("%s ep %d reward %.2f energy %.2f act %.3f", type(self).__name__, ep,
                          report.mean_reward, report.mean_energy, report.activation_rate)
        return self

    def save(self, path, meta: dict | None = None) -> None:
        """Write parameters, optimizer moments and hyperparameters as a JSON checkpoint."""
        check_is_fitted(self, "config_")
        meta = dict(meta or {}, estimator=type(self).__name__, params=self.get_params())
        save_checkpoint(path, self.tensors(), self.optimizers(), meta)

    def restore(self, config: EpisodeConfig, tensors: dict, optimizers: dict | None = None):
        """Rebuild the model for ``config`` and copy checkpoint tensors into it."""
        self._init_model(config)
        self.history_ = []
        live = self.tensors()
        if set(live) != set(tensors):
            raise ValueError(f"checkpoint tensors do not match {type(self).__name__}: "
                             f"{sorted(set(live) ^ set(tensors))}")
        for k, v in tensors.items():
            if live[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}")
            live[k][...] = v
        for name, opt in self.optimizers().items():
            if optimizers and name in optimizers:
                opt.load_state_dict(optimizers[name])
        return self

    def rollout(self, env_seed, action_seed=None, config: EpisodeConfig | None = None) -> TrajectoryBuffer:
        check_is_fitted(self, "config_")
        rng = np.random.default_rng(action_seed if action_seed is not None else env_seed)
        return run_episode(self, config or self.config_, env_seed, rng)


class HMoEAgent(PolicyBase):
    """Decoupled temporal/spatial experts with a critic baseline.

    Parameters
    ----------
    n_episodes : training episodes used by ``fit``.
    window : LSTM state window (also the truncated-BPTT length).
    gamma : discount for the scheduling returns.
    lr_temporal : Adam step for the temporal expert. The LSTM hidden state is
        bounded, so the policy head needs large weights before schedules turn
        decisive; 1e-3 is too slow for that within a 500-episode budget.
    physics_weight : lambda of the spatial loss; the loss is further divided
        by K * N * M so its scale does not depend on the configuration.
    entropy_coef : Bernoulli entropy bonus, annealed linearly to zero.
    mask_aoi : zero the age column of every state the agent sees (ablation).
    """

    def __init__(self, n_episodes: int = 500, window: int = 10, hidden: int = 32,
                 spatial_hidden: int = 64, critic_hidden: int = 64, gamma: float = 0.9,
                 lr_temporal: float = 1e-2, lr_spatial: float = 3e-4, lr_critic: float = 1e-3,
                 physics_weight: float = 1e-2, entropy_coef: float = 1e-3, eps: float = 1e-3,
                 mask_aoi: bool = False, random_state: int = 0):
        self.n_episodes = n_episodes
        self.window = window
        self.hidden = hidden
        self.spatial_hidden = spatial_hidden
        self.critic_hidden = critic_hidden
        self.gamma = gamma
        self.lr_temporal = lr_temporal
        self.lr_spatial = lr_spatial
        self.lr_critic = lr_critic
        self.physics_weight = physics_weight
        self.entropy_coef = entropy_coef
        self.eps = eps
        self.mask_aoi = mask_aoi
        self.random_state = random_state

    def _init_model(self, config: EpisodeConfig) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.physics_weight <= 0:
            raise ValueError("physics_weight must be positive")
        ss = np.random.SeedSequence([self.random_state, 0])
        r_t, r_s, r_c, r_a = (np.random.default_rng(s) for s in ss.spawn(4))
        k, m = config.user_count, config.array.element_count
        self.temporal_ = TemporalExpert(k, self.hidden, self.eps, r_t)
        self.spatial_ = SpatialExpert(k, m, self.spatial_hidden, r_s)
        self.critic_ = Critic(k, self.critic_hidden, self.gamma, r_c)
        self.opt_temporal_ = Adam(self.temporal_.params, self.lr_temporal)
        self.opt_spatial_ = Adam(self.spatial_.params, self.lr_spatial)
        self.opt_critic_ = Adam(self.critic_.params, self.lr_critic)
        self._action_rng = r_a
        self.config_ = config

    # inference ------------------------------------------------------------
    def predict_proba(self, window) -> np.ndarray:
        """Scheduling probabilities for the last state of ``window`` (T, K, 3)."""
        check_is_fitted(self, "temporal_")
        w = check_window(window)
        z = self.temporal_.logits(self._features(w)[None])
        return squash(z, self.eps)[0]

    def predict_phases(self, state) -> np.ndarray:
        check_is_fitted(self, "spatial_")
        return wrap_phase(self.spatial_.raw_phases(self._features(state))[0])

    def begin_episode(self) -> None:
        self._feat_hist = []

    def act(self, history, rng) -> tuple[JointAction, float]:
        # featurise each state once; history grows by one state per call
        feats = self._feat_hist
        feats.extend(self._features(s) for s in history[len(feats):])
        n = len(history) - 1
        lstm = self.temporal_.lstm.params
        h = lstm_last_hidden(state_window(feats, n, self.window), lstm["Wx"], lstm["Wh"], lstm["b"])
        head = self.temporal_.head
        probs = squash(head.W @ h + head.b, self.eps)
        schedule, log_prob = sample_schedule(probs, rng)
        phases = wrap_phase(self.spatial_.raw_phases(feats[-1])[0])
        return JointAction(schedule, phases), log_prob

    # losses and isolated updates -----------------------------------------
    def compute_advantages(self, buf: TrajectoryBuffer):
        values = self.critic_.value(self._features(np.stack(buf.states)))
        return compute_advantages(buf.rewards, values, self.gamma)

    def temporal_loss_and_grad(self, buf: TrajectoryBuffer, advantages, entropy_coef: float = 0.0) -> float:
        """Mean of ``-log P(a_n | p_n) A_n - c H(p_n)``; fills temporal grads."""
        self.temporal_.zero_grad()
        windows = self._features(buf.windows(self.window))
        actions = np.stack(buf.schedules).astype(np.float64)
        adv = np.asarray(advantages, dtype=np.float64)
        z = self.temporal_.logits(windows)
        p = squash(z, self.eps)
        n = len(adv)
        loss = -np.mean(bernoulli_log_prob(actions, p) * adv) - entropy_coef * np.mean(bernoulli_entropy(p))
        self.temporal_.backward(logit_grads(actions, z, self.eps, adv, entropy_coef) / n)
        return float(loss)

    def update_temporal(self, buf: TrajectoryBuffer, advantages, entropy_coef: float = 0.0) -> float:
        loss = self.temporal_loss_and_grad(buf, advantages, entropy_coef)
        self.opt_temporal_.step(self.temporal_.grads)
        return loss

    def spatial_loss_and_grad(self, buf: TrajectoryBuffer) -> float:
        return expert_spatial_loss(self.spatial_, self._features(np.stack(buf.states)),
                                   np.stack(buf.channels), self.physics_weight)

    def update_spatial(self, buf: TrajectoryBuffer) -> float:
        loss = self.spatial_loss_and_grad(buf)
        self.opt_spatial_.step(self.spatial_.grads)
        return loss

    def update_critic(self, buf: TrajectoryBuffer, returns) -> float:
        self.critic_.zero_grad()
        loss = self.critic_.loss_and_grad(self._features(np.stack(buf.states)), returns)
        self.opt_critic_.step(self.critic_.grads)
        return loss

    def _update(self, buf: TrajectoryBuffer, progress: float = 0.0) -> dict:
        returns, adv = self.compute_advantages(buf)
        coef = self.entropy_coef * max(0.0, 1.0 - progress)
        losses = {"temporal": self.update_temporal(buf, adv, coef)}
        losses["critic"] = self.update_critic(buf, returns)
        losses["spatial"] = self.update_spatial(buf)
        return losses

    def train_episode(self, episode: int | None = None) -> EpisodeReport:
        """One pass of rollout + the isolated updates."""
        self.continue_fit(1)
        return self.history_[-1]

    # persistence -----------------------------------------------------------
    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("temporal", self.temporal_), ("spatial", self.spatial_), ("critic", self.critic_)):
            out.update({f"{prefix}.{k}": v for k, v in part.params.items()})
        return out

    def optimizers(self) -> dict[str, Adam]:
        return {"temporal": self.opt_temporal_, "spatial": self.opt_spatial_, "critic": self.opt_critic_}


def temporal_params(agent: HMoEAgent) -> dict[str, np.ndarray]:
    return agent.temporal_.params


def spatial_params(agent) -> dict[str, np.ndarray]:
    return agent.spatial_.params
