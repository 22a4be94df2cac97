"""Dense numeric primitives: a small MLP with exact backprop, flat softmax,
stable BCE, Adam, and a central-difference gradient checker.

Everything runs in float64. MLP inputs may be a single vector ``(in,)`` or a
batch of row vectors ``(B, in)``; outputs keep the same leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError, EvaluationError, InputError, UsageError

Arrays = dict[str, np.ndarray]


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape ``(in_l, out_l)`` and biases ``b[l]`` of shape ``(out_l,)``.

    Hidden layers use the rectifier; the last layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("MLP needs one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(
                    f"layer {l}: weight shape {w.shape} incompatible with bias shape {b.shape}")
            if l and self.weights[l - 1].shape[1] != w.shape[0]:
                raise ConfigurationError(
                    f"layer {l}: input width {w.shape[0]} != previous output "
                    f"{self.weights[l - 1].shape[1]}")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def to_arrays(self, prefix: str = "") -> Arrays:
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{l}"] = w
            out[f"{prefix}b{l}"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "",
                    activation: str = "relu") -> "MlpParams":
        weights, biases = [], []
        l = 0
        while f"{prefix}W{l}" in arrays:
            weights.append(np.asarray(arrays[f"{prefix}W{l}"], dtype=np.float64))
            biases.append(np.asarray(arrays[f"{prefix}b{l}"], dtype=np.float64))
            l += 1
        return cls(weights, biases, activation)

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.activation)


def init_mlp(widths: list[int], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    if len(widths) < 2 or min(widths) < 1:
        raise ConfigurationError(f"invalid layer widths {widths}")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


@dataclass
class MlpTape:
    params: MlpParams
    inputs: list[np.ndarray]          # input to each layer
    pre: list[np.ndarray]             # pre-activation of each layer
    squeeze: bool
    consumed: bool = field(default=False, repr=False)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x
    if a.ndim != 2 or a.shape[1] != params.widths[0]:
        raise ConfigurationError(
            f"input shape {x.shape} does not match first layer width {params.widths[0]}")
    inputs, pre = [], []
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if l < last else z
    out = a[0] if squeeze else a
    return out, MlpTape(params, inputs, pre, squeeze)


def mlp_backward(tape: MlpTape | None, grad_out: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Backprop ``grad_out`` through the recorded forward pass.

    Batched tapes sum parameter gradients over rows. A tape can be consumed once.
    """
    if tape is None:
        raise UsageError("mlp_backward needs the tape returned by mlp_forward")
    if tape.consumed:
        raise UsageError("tape already consumed by a previous mlp_backward call")
    g = np.asarray(grad_out, dtype=np.float64)
    g = g[None, :] if tape.squeeze else g
    if g.shape != tape.pre[-1].shape:
        raise ConfigurationError(
            f"output gradient shape {np.shape(grad_out)} does not match output shape "
            f"{tape.pre[-1].shape[1:] if tape.squeeze else tape.pre[-1].shape}")
    tape.consumed = True
    p = tape.params
    n = len(p.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for l in reversed(range(n)):
        if l < n - 1:
            g = g * (tape.pre[l] > 0.0)
        gw[l] = tape.inputs[l].T @ g
        gb[l] = g.sum(axis=0)
        g = g @ p.weights[l].T
    return MlpParams(gw, gb, p.activation), (g[0] if tape.squeeze else g)


def softmax_flat(logits: np.ndarray) -> np.ndarray:
    """Softmax over every entry of ``logits`` jointly; the result sums to one."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        return z.copy()
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_flat_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``softmax_flat`` output back to its logits."""
    return probs * (grad_probs - np.sum(probs * grad_probs))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Elementwise ``softplus(z) - y*z`` and its mean."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise InputError(f"logits shape {z.shape} != labels shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise InputError("labels must be 0 or 1")
    # max(z,0) - y z + log1p(exp(-|z|)) keeps the saturated side exact
    losses = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
    return losses, float(losses.mean()) if losses.size else 0.0


@dataclass
class AdamState:
    m: Arrays
    v: Arrays
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr, beta1, beta2, eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[Arrays, AdamState]:
    """One bias-corrected Adam update. Returns fresh arrays; inputs are untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ConfigurationError(
            f"parameter/gradient/state keys disagree: {sorted(set(params) ^ set(grads))}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ConfigurationError(
                f"{k}: parameter shape {p.shape}, gradient shape {g.shape}, "
                f"moment shape {state.m[k].shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def fd_check(loss_fn: Callable[[Arrays], tuple[float, Arrays]],
             params: Mapping[str, np.ndarray], step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / (|analytic| + |central| + 1e-12)``.

    ``loss_fn`` maps a parameter dict to ``(value, gradient dict)``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    value, analytic = loss_fn(base)
    if not np.isfinite(value):
        raise EvaluationError(f"loss is not finite at the base point: {value}")
    worst = 0.0
    for k, p in base.items():
        ga = np.asarray(analytic[k])
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            lp = loss_fn(base)[0]
            p[idx] = orig - step
            lm = loss_fn(base)[0]
            p[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise EvaluationError(f"loss not finite while perturbing {k}{list(idx)}")
            central = (lp - lm) / (2.0 * step)
            a = float(ga[idx])
            worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-12))
    return worst
