"""Fast numerical checks behind ``hmoe-isac selftest``."""
from __future__ import annotations

import numpy as np

from .agent import HMoEAgent, spatial_loss_and_grad
from .baselines import vision_only_policy
from .env import EpisodeConfig
from .neural import LSTMCell, grad_check


def _lstm_check():
    rng = np.random.default_rng(0)
    cell = LSTMCell(3, 4, rng)
    X = rng.normal(size=(2, 10, 3))
    w = rng.normal(size=(2, 10, 4))

    def f():
        return float(np.sum(cell.forward(X) * w))

    cell.zero_grad()
    cell.forward(X)
    cell.backward(w)
    rep = grad_check(f, cell.params, {k: v.copy() for k, v in cell.grads.items()})
    return rep.passed(1e-4), f"max rel err {rep.max_rel_error:.2e}"


def _spatial_check():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, 2, 8)) + 1j * rng.normal(size=(1, 2, 8))
    phi = {"phi": rng.uniform(-np.pi, np.pi, size=(1, 2, 8))}
    _, g = spatial_loss_and_grad(phi["phi"], h, 1.0)

    def f():
        return spatial_loss_and_grad(phi["phi"], h, 1.0)[0]

    rep = grad_check(f, phi, {"phi": g})
    return rep.passed(1e-6), f"max rel err {rep.max_rel_error:.2e}"


def _isolation_check():
    cfg = EpisodeConfig(horizon=20)
    agent = HMoEAgent(n_episodes=1, random_state=0).fit(cfg)
    buf = agent.rollout([0, 9, 0])
    before = {k: v.copy() for k, v in agent.spatial_.params.items()}
    _, adv = agent.compute_advantages(buf)
    agent.update_temporal(buf, adv)
    same = all(np.array_equal(before[k], v) for k, v in agent.spatial_.params.items())
    before = {k: v.copy() for k, v in agent.temporal_.params.items()}
    agent.update_spatial(buf)
    same &= all(np.array_equal(before[k], v) for k, v in agent.temporal_.params.items())
    return same, "bitwise snapshots"


def _vision_only_check():
    cfg = EpisodeConfig()
    pol = vision_only_policy(n_episodes=0).fit(cfg)
    buf = pol.rollout([0, 2, 0])
    e = np.array([o.energy.computational for o in buf.outcomes])
    dev = max(o.constraints.modulus_deviation for o in buf.outcomes)
    return bool(np.all(e == 40.0) and dev < 1e-9), f"E_comp={e.mean():.3f} J, modulus dev {dev:.1e}"


def run_selftest() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in (("lstm-bptt-gradient", _lstm_check), ("spatial-phase-gradient", _spatial_check),
                     ("gradient-isolation", _isolation_check), ("vision-only-ceiling", _vision_only_check)):
        try:
            ok, detail = fn()
        except Exception as exc:  # report, never crash the CLI
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
