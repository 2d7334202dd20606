"""Tiny numpy MLPs with hand-written backprop, Adam, and policy heads.

Inputs are batched row-major: ``x`` has shape ``(batch, in_dim)``; a 1-D input
is treated as a batch of one and the output squeezed back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def orthogonal(shape: tuple[int, int], rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


@dataclass
class Tape:
    version: int
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    squeeze: bool


class Mlp:
    """Affine layers with tanh between them and a linear output layer."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        out_gain: float = 1.0,
        activation: str = "tanh",
    ):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.sizes) - 1
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if k == n_layers - 1 else 1.0
            self.weights.append(orthogonal((fan_out, fan_in), rng, gain))
            self.biases.append(np.zeros(fan_out))
        self.version = 0

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def touch(self) -> None:
        """Mark parameters as modified; tapes recorded earlier become stale."""
        self.version += 1

    def _act(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.activation == "tanh" else z

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Tape]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} does not match layer width {self.sizes[0]}")
        inputs, pre = [], []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w.T + b
            pre.append(z)
            h = z if k == last else self._act(z)
        tape = Tape(self.version, inputs, pre, squeeze)
        return (h[0] if squeeze else h), tape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, tape: Tape, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Reverse-mode gradients, summed over the batch.

        Returns parameter gradients ordered like :attr:`params` and the
        gradient with respect to the input.
        """
        if tape.version != self.version:
            raise RuntimeError("stale tape: parameters changed since the forward pass")
        g = np.asarray(grad_out, dtype=np.float64)
        if tape.squeeze:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last and self.activation == "tanh":
                g = g * (1.0 - np.tanh(tape.pre[k]) ** 2)
            grads[2 * k] = g.T @ tape.inputs[k]
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.weights[k]
        return grads, (g[0] if tape.squeeze else g)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Mlp:
        net = cls(data["sizes"], activation=data["activation"])
        net.weights = [np.asarray(w, dtype=np.float64).reshape(o, i) for w, o, i in zip(data["weights"], net.sizes[1:], net.sizes[:-1])]
        net.biases = [np.asarray(b, dtype=np.float64) for b in data["biases"]]
        return net


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def like(cls, params: Sequence[np.ndarray], lr: float, **kwargs) -> AdamState:
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kwargs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], like: Sequence[np.ndarray]) -> AdamState:
        return cls(
            lr=data["lr"],
            beta1=data["beta1"],
            beta2=data["beta2"],
            eps=data["eps"],
            step=data["step"],
            m=[np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(data["m"], like)],
            v=[np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(data["v"], like)],
        )


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return list(grads)
    scale = max_norm / total
    return [g * scale for g in grads]


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    max_grad_norm: float | None = None,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    if max_grad_norm is not None:
        grads = clip_by_global_norm(grads, max_grad_norm)
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_entropy(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def gaussian_logprob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * LOG_2PI).sum(axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float((0.5 + 0.5 * LOG_2PI + log_std).sum())


@dataclass
class PolicyHead:
    """An MLP plus its action distribution.

    ``kind`` is ``"categorical"`` (net outputs logits) or ``"gaussian"`` (net
    outputs the mean; ``log_std`` is a learned state-independent vector).
    """

    kind: str
    net: Mlp
    log_std: np.ndarray | None = None
    action_low: float | None = None
    action_high: float | None = None

    @classmethod
    def build(
        cls,
        kind: str,
        in_dim: int,
        out_dim: int,
        hidden: Sequence[int] = (64, 64),
        rng: np.random.Generator | None = None,
        init_log_std: float = math.log(0.5),
        action_bound: float | None = None,
    ) -> PolicyHead:
        net = Mlp([in_dim, *hidden, out_dim], rng=rng, out_gain=0.01)
        if kind == "categorical":
            return cls(kind, net)
        if kind == "gaussian":
            bound = action_bound
            return cls(kind, net, np.full(out_dim, init_log_std), None if bound is None else -bound, bound)
        raise ValueError(f"unknown policy head {kind!r}")

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + ([self.log_std] if self.log_std is not None else [])

    def touch(self) -> None:
        self.net.touch()

    def sample_and_logprob(self, features: np.ndarray, rng: np.random.Generator):
        """Sample actions; returns ``(env_action, raw_action, log_prob, entropy)``.

        For the Gaussian head the log-density belongs to the raw sample; the
        env action is the raw sample clamped to the action bounds.
        """
        out = self.net(features)
        squeeze = out.ndim == 1
        out2 = out[None, :] if squeeze else out
        if self.kind == "categorical":
            logp_all = log_softmax(out2)
            probs = np.exp(logp_all)
            u = rng.random(len(out2))
            cdf = np.cumsum(probs, axis=1)
            idx = np.minimum((cdf < u[:, None]).sum(axis=1), out2.shape[1] - 1)
            logp = logp_all[np.arange(len(idx)), idx]
            ent = -(probs * logp_all).sum(axis=1)
            raw = idx.astype(np.float64)
            env = idx
        else:
            std = np.exp(self.log_std)
            raw = out2 + std * rng.standard_normal(out2.shape)
            logp = gaussian_logprob(raw, out2, self.log_std)
            ent = np.full(len(out2), gaussian_entropy(self.log_std))
            env = self.clamp(raw)
        if squeeze:
            return env[0], raw[0], float(logp[0]), float(ent[0])
        return env, raw, logp, ent

    def clamp(self, actions: np.ndarray) -> np.ndarray:
        if self.action_low is None:
            return actions
        return np.clip(actions, self.action_low, self.action_high)

    def mode(self, features: np.ndarray) -> np.ndarray:
        out = self.net(features)
        if self.kind == "categorical":
            return np.argmax(out, axis=-1)
        return self.clamp(out)

    def evaluate(self, features: np.ndarray, raw_actions: np.ndarray):
        """Log-probabilities and entropies of stored actions, plus a tape."""
        out, tape = self.net.forward(np.atleast_2d(features))
        if self.kind == "categorical":
            logp_all = log_softmax(out)
            idx = raw_actions.astype(np.int64).reshape(-1)
            logp = logp_all[np.arange(len(idx)), idx]
            ent = -(np.exp(logp_all) * logp_all).sum(axis=1)
        else:
            acts = raw_actions.reshape(out.shape)
            logp = gaussian_logprob(acts, out, self.log_std)
            ent = np.full(len(out), gaussian_entropy(self.log_std))
        return logp, ent, (tape, out)

    def backward(self, cache, raw_actions: np.ndarray, dlogp: np.ndarray, dent: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients of ``sum(dlogp * logp + dent * entropy)``."""
        tape, out = cache
        if self.kind == "categorical":
            logp_all = log_softmax(out)
            p = np.exp(logp_all)
            idx = raw_actions.astype(np.int64).reshape(-1)
            onehot = np.zeros_like(out)
            onehot[np.arange(len(idx)), idx] = 1.0
            ent = -(p * logp_all).sum(axis=1, keepdims=True)
            g_out = dlogp[:, None] * (onehot - p) + dent[:, None] * (-p * (logp_all + ent))
            grads, _ = self.net.backward(tape, g_out)
            return grads
        acts = raw_actions.reshape(out.shape)
        var = np.exp(2.0 * self.log_std)
        diff = acts - out
        g_out = dlogp[:, None] * diff / var
        grads, _ = self.net.backward(tape, g_out)
        g_logstd = (dlogp[:, None] * (diff * diff / var - 1.0)).sum(axis=0) + dent.sum()
        return grads + [g_logstd]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "net": self.net.to_dict(),
            "log_std": None if self.log_std is None else self.log_std.tolist(),
            "action_low": self.action_low,
            "action_high": self.action_high,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PolicyHead:
        log_std = None if data["log_std"] is None else np.asarray(data["log_std"], dtype=np.float64)
        return cls(data["kind"], Mlp.from_dict(data["net"]), log_std, data["action_low"], data["action_high"])


def sample_and_logprob(head: PolicyHead, features: np.ndarray, rng: np.random.Generator):
    """Module-level alias of :meth:`PolicyHead.sample_and_logprob`."""
    return head.sample_and_logprob(features, rng)


def finite_difference_check(
    net: Mlp,
    x: np.ndarray,
    grad_out: np.ndarray | None = None,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between :meth:`Mlp.backward` and central differences.

    The scalar probed is ``sum(grad_out * net(x))``; every parameter and input
    entry is perturbed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out, tape = net.forward(x)
    if grad_out is None:
        grad_out = rng.standard_normal(out.shape)
    grads, g_in = net.backward(tape, grad_out)

    def objective() -> float:
        return float((net(x) * grad_out).sum())

    worst = 0.0
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            f_plus = objective()
            p[idx] = orig - h
            f_minus = objective()
            p[idx] = orig
            num = (f_plus - f_minus) / (2 * h)
            worst = max(worst, abs(num - g[idx]) / max(1.0, abs(num), abs(g[idx])))
    xf = np.array(x, dtype=np.float64)
    for idx in np.ndindex(xf.shape):
        orig = xf[idx]
        xf[idx] = orig + h
        f_plus = float((net(xf) * grad_out).sum())
        xf[idx] = orig - h
        f_minus = float((net(xf) * grad_out).sum())
        xf[idx] = orig
        num = (f_plus - f_minus) / (2 * h)
        worst = max(worst, abs(num - g_in[idx]) / max(1.0, abs(num), abs(g_in[idx])))
    return worst


def gradcheck_suite(n_nets: int = 100, seed: int = 0) -> list[float]:
    """Finite-difference errors for ``n_nets`` randomly shaped MLPs.

    Shapes, activations, batch sizes and biases are drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_nets):
        depth = int(rng.integers(1, 4))
        sizes = [int(s) for s in rng.integers(1, 9, size=depth + 1)]
        net = Mlp(sizes, rng, out_gain=float(rng.uniform(0.5, 2.0)), activation=str(rng.choice(["tanh", "identity"])))
        for b in net.biases:
            b[:] = rng.normal(0.0, 0.5, size=b.shape)
        batch = int(rng.integers(1, 5))
        x = rng.standard_normal((batch, sizes[0]))
        errors.append(finite_difference_check(net, x, rng=rng))
    return errors
