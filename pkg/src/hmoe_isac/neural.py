"""Small float64 neural kernel: dense layers, tanh, a batched LSTM with BPTT,
Adam, finite-difference gradient checking and JSON checkpoints.

Layers cache what they need during ``forward`` and accumulate parameter
gradients into ``grads`` during ``backward``; call ``zero_grad`` between
updates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_FORMAT = "hmoe-isac-checkpoint"
CHECKPOINT_VERSION = 1


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_out, fan_in))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Module:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def named_parameters(self, prefix: str = ""):
        for k, v in self.params.items():
            yield prefix + k, v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k][...] = v


class Dense(Module):
    """Affine map ``y = x W^T + b`` over a batch of row vectors."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None, zero: bool = False):
        rng = rng or np.random.default_rng(0)
        w = np.zeros((n_out, n_in)) if zero else glorot(rng, n_in, n_out)
        self.params = {"W": w, "b": np.zeros(n_out)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    @property
    def W(self):
        return self.params["W"]

    @property
    def b(self):
        return self.params["b"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.W.shape[1]:
            raise ValueError(f"expected input width {self.W.shape[1]}, got {x.shape[-1]}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self._x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.grads["W"] += dy2.T @ x2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.W


class Tanh(Module):
    def __init__(self):
        self.params, self.grads = {}, {}
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y**2)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    @property
    def params(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    @property
    def grads(self):
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def forward(self, x):
        for l in self.layers:
            x = l.forward(x)
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy


def mlp(sizes: list[int], rng: np.random.Generator) -> Sequential:
    """Tanh MLP with a linear output layer."""
    layers: list[Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b, rng))
        if i < len(sizes) - 2:
            layers.append(Tanh())
    return Sequential(*layers)


class LSTMCell(Module):
    """Batched LSTM, gate order (input, forget, output, candidate).

    ``forward`` takes (B, T, D) and returns all hidden states (B, T, H);
    ``backward`` takes dL/dH of the same shape and backpropagates through the
    whole window (truncated BPTT over the provided T steps).
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0, zero: bool = False):
        rng = rng or np.random.default_rng(0)
        H = n_hidden
        if zero:
            wx, wh, b = np.zeros((n_in, 4 * H)), np.zeros((H, 4 * H)), np.zeros(4 * H)
        else:
            wx = glorot(rng, n_in, H, shape=(n_in, 4 * H))
            wh = glorot(rng, H, H, shape=(H, 4 * H))
            b = np.zeros(4 * H)
            b[H:2 * H] = forget_bias
        self.params = {"Wx": wx, "Wh": wh, "b": b}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.n_in, self.n_hidden = n_in, H
        self._cache = None

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] == 0:
            raise ValueError(f"LSTM input must be (B, T, D) with T >= 1, got {X.shape}")
        if X.shape[2] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {X.shape[2]}")
        B, T, _ = X.shape
        H = self.n_hidden
        Wx, Wh, b = self.params["Wx"], self.params["Wh"], self.params["b"]
        # input projection for all steps at once
        Zx = X @ Wx + b
        Hs = np.empty((B, T, H))
        Cs = np.empty((B, T, H))
        gates = np.empty((B, T, 4 * H))
        # sigmoid(x) = (1 + tanh(x / 2)) / 2 lets one tanh cover all four gates
        pre, post = self._gate_affine()
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        for t in range(T):
            g = np.tanh((Zx[:, t] + h @ Wh) * pre) * pre + post
            c = g[:, H:2 * H] * c + g[:, :H] * g[:, 3 * H:]
            h = g[:, 2 * H:3 * H] * np.tanh(c)
            gates[:, t], Cs[:, t], Hs[:, t] = g, c, h
        self._cache = (X, Hs, Cs, gates)
        return Hs

    def _gate_affine(self):
        if getattr(self, "_affine", None) is None:
            H = self.n_hidden
            pre = np.full(4 * H, 0.5)
            pre[3 * H:] = 1.0
            post = np.full(4 * H, 0.5)
            post[3 * H:] = 0.0
            self._affine = (pre, post)
        return self._affine

    def backward(self, dHs: np.ndarray) -> np.ndarray:
        X, Hs, Cs, gates = self._cache
        B, T, _ = X.shape
        H = self.n_hidden
        Wh = self.params["Wh"]
        dZ = np.zeros((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            g = gates[:, t]
            i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tc = np.tanh(Cs[:, t])
            c_prev = Cs[:, t - 1] if t > 0 else np.zeros((B, H))
            dh = dHs[:, t] + dh_next
            dc = dc_next + dh * o * (1 - tc**2)
            dz = dZ[:, t]
            dz[:, :H] = dc * cand * i * (1 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1 - o)
            dz[:, 3 * H:] = dc * i * (1 - cand**2)
            dh_next = dz @ Wh.T
            dc_next = dc * f
        self.grads["Wx"] += np.einsum("btd,btg->dg", X, dZ)
        H_prev = np.concatenate([np.zeros((B, 1, H)), Hs[:, :-1]], axis=1)
        self.grads["Wh"] += np.einsum("bth,btg->hg", H_prev, dZ)
        self.grads["b"] += dZ.sum(axis=(0, 1))
        return dZ @ self.params["Wx"].T


class Adam:
    """Bias-corrected adaptive-moment optimizer over named parameter arrays.

    Parameters are updated in place, so estimators keep their references.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        updates = {}
        for k, p in self.params.items():
            g = grads[k]
            m = b1 * self.m[k] + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            new = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(new)):
                raise FloatingPointError(f"non-finite parameter update for {k}")
            updates[k] = (m, v, new)
        for k, (m, v, new) in updates.items():
            self.m[k], self.v[k] = m, v
            self.params[k][...] = new

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr, self.beta1, self.beta2, self.eps = state["lr"], state["beta1"], state["beta2"], state["eps"]
        for k in self.params:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: Adam) -> dict[str, np.ndarray]:
    if state.params is not params:
        raise ValueError("optimizer state belongs to a different parameter set")
    state.step(grads)
    return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[], float], params: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
               eps: float = 1e-5, max_entries: int | None = None, rng=None, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients against central finite differences of ``f``.

    ``f`` re-evaluates the scalar loss using the current contents of
    ``params``, which are perturbed in place and restored. Relative error is
    ``|a - n| / max(|a| + |n|, floor)``.
    """
    rng = np.random.default_rng(rng)
    worst, worst_name, count = 0.0, "", 0
    for name, p in params.items():
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = rng.choice(p.size, max_entries, replace=False)
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = f()
            flat[i] = old - eps
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            rel = abs(a_flat[i] - num) / max(abs(a_flat[i]) + abs(num), floor)
            count += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return GradCheckReport(worst, worst_name, count)


def save_checkpoint(path, tensors: dict[str, np.ndarray], optimizers: dict[str, Adam] | None = None,
                    meta: dict | None = None) -> None:
    def pack(a):
        a = np.asarray(a, dtype=np.float64)
        return {"shape": list(a.shape), "values": a.reshape(-1).tolist()}

    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {k: pack(v) for k, v in tensors.items()},
        "optimizers": {},
    }
    for name, opt in (optimizers or {}).items():
        st = opt.state_dict()
        record["optimizers"][name] = {
            "t": st["t"], "lr": st["lr"], "beta1": st["beta1"], "beta2": st["beta2"], "eps": st["eps"],
            "m": {k: pack(v) for k, v in st["m"].items()},
            "v": {k: pack(v) for k, v in st["v"].items()},
        }
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, dict], dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint file")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")

    def unpack(d):
        return np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])

    tensors = {k: unpack(v) for k, v in record["tensors"].items()}
    opts = {}
    for name, st in record["optimizers"].items():
        opts[name] = dict(st, m={k: unpack(v) for k, v in st["m"].items()},
                          v={k: unpack(v) for k, v in st["v"].items()})
    return tensors, opts, record["meta"]
