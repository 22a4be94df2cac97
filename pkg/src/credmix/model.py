"""Agent heads, masked agent-wise aggregation, and the global mixture.

Shapes: ``N`` agents, ``C`` classes, ``D`` embedding width, ``B`` batch rows.
Per-agent logits ``h`` are ``(B, N, C)``; the decision matrix ``W`` is ``(N, C)``
and lives on the flat simplex (all entries positive, total one).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError
from .kernel import (Arrays, MlpParams, MlpTape, init_mlp, mlp_backward, mlp_forward,
                     softmax_flat, softmax_flat_backward)


@dataclass
class ModelParams:
    agent_heads: list[MlpParams]
    global_head: MlpParams
    decision_logits: np.ndarray        # (N, C)
    mixture_logits: np.ndarray         # (2,): agents stream, global stream
    fusion: MlpParams                  # R^C -> R^C

    def __post_init__(self):
        C = self.global_head.widths[-1]
        D = self.global_head.widths[0]
        for i, head in enumerate(self.agent_heads):
            if head.widths[0] != D or head.widths[-1] != C:
                raise ConfigurationError(
                    f"agent {i} head maps {head.widths[0]}->{head.widths[-1]}, expected {D}->{C}")
        if self.decision_logits.shape != (len(self.agent_heads), C):
            raise ConfigurationError(
                f"decision logits shape {self.decision_logits.shape} != "
                f"({len(self.agent_heads)}, {C})")
        if self.mixture_logits.shape != (2,):
            raise ConfigurationError("mixture logits must have shape (2,)")
        if self.fusion.widths[0] != C or self.fusion.widths[-1] != C:
            raise ConfigurationError(f"fusion head must map {C}->{C}, got {self.fusion.widths}")

    @property
    def n_agents(self) -> int:
        return len(self.agent_heads)

    @property
    def n_classes(self) -> int:
        return self.global_head.widths[-1]

    @property
    def dim(self) -> int:
        return self.global_head.widths[0]

    @property
    def W(self) -> np.ndarray:
        return softmax_flat(self.decision_logits)

    @property
    def mixture(self) -> np.ndarray:
        return softmax_flat(self.mixture_logits)

    def to_arrays(self) -> Arrays:
        out: Arrays = {}
        for i, head in enumerate(self.agent_heads):
            out.update(head.to_arrays(f"agent{i}."))
        out.update(self.global_head.to_arrays("global."))
        out["decision"] = self.decision_logits
        out["mixture"] = self.mixture_logits
        out.update(self.fusion.to_arrays("fusion."))
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        n = 0
        while f"agent{n}.W0" in arrays:
            n += 1
        return cls([MlpParams.from_arrays(arrays, f"agent{i}.") for i in range(n)],
                   MlpParams.from_arrays(arrays, "global."),
                   np.asarray(arrays["decision"], dtype=np.float64),
                   np.asarray(arrays["mixture"], dtype=np.float64),
                   MlpParams.from_arrays(arrays, "fusion."))


def init_model(n_agents: int, n_classes: int, dim: int, rng: np.random.Generator,
               agent_hidden: Sequence[int] = (64,),
               fusion_hidden: Sequence[int] = (32,)) -> ModelParams:
    """Glorot heads; zero decision and mixture logits (uniform W, equal streams)."""
    if n_agents < 0 or n_classes < 1 or dim < 1:
        raise ConfigurationError(f"invalid sizes N={n_agents}, C={n_classes}, D={dim}")
    heads = [init_mlp([dim, *agent_hidden, n_classes], rng) for _ in range(n_agents)]
    glob = init_mlp([dim, *agent_hidden, n_classes], rng)
    fusion = init_mlp([n_classes, *fusion_hidden, n_classes], rng)
    return ModelParams(heads, glob, np.zeros((n_agents, n_classes)), np.zeros(2), fusion)


def full_mask(n_agents: int) -> np.ndarray:
    return np.ones(n_agents, dtype=bool)


def mask_from_bits(bits: int, n_agents: int) -> np.ndarray:
    return np.array([(bits >> i) & 1 for i in range(n_agents)], dtype=bool)


def agent_forward(params: ModelParams, partitions: np.ndarray
                  ) -> tuple[np.ndarray, list[MlpTape]]:
    """Logits of every agent on its own partition. ``(N, D) -> (N, C)`` or ``(B, N, D) -> (B, N, C)``."""
    x = np.asarray(partitions, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if params.n_agents == 0 and x.ndim == 3:
        x = x[:, :0, :params.dim]  # centralized model ignores partitions
    if x.ndim != 3 or x.shape[1] != params.n_agents or x.shape[2] != params.dim:
        raise ConfigurationError(
            f"partition embeddings shape {np.shape(partitions)} incompatible with "
            f"N={params.n_agents}, D={params.dim}")
    h = np.empty((x.shape[0], params.n_agents, params.n_classes))
    tapes = []
    for i, head in enumerate(params.agent_heads):
        h[:, i, :], tape = mlp_forward(head, x[:, i, :])
        tapes.append(tape)
    return (h[0] if single else h), tapes


def aggregate(h: np.ndarray, W: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``z[k] = sum_{i in mask} W[i,k] * h[i,k]``; W is not renormalized over the mask."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-2:] != W.shape:
        raise ConfigurationError(f"h shape {h.shape} incompatible with W shape {W.shape}")
    if mask is None:
        return (W * h).sum(axis=-2)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (W.shape[0],):
        raise ConfigurationError(f"mask length {mask.shape} != N={W.shape[0]}")
    return (W[mask] * h[..., mask, :]).sum(axis=-2)


def global_logits(params: ModelParams, x_global: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    return mlp_forward(params.global_head, x_global)


def mix_and_fuse(params: ModelParams, z_agents: np.ndarray, g: np.ndarray
                 ) -> tuple[np.ndarray, MlpTape]:
    w_a, w_g = params.mixture
    return mlp_forward(params.fusion, w_a * z_agents + w_g * g)


def global_mix(z_agents: np.ndarray, x_global: np.ndarray, params: ModelParams) -> np.ndarray:
    if np.shape(z_agents)[-1] != params.n_classes:
        raise ConfigurationError(f"z_A width {np.shape(z_agents)[-1]} != C={params.n_classes}")
    g, _ = global_logits(params, x_global)
    return mix_and_fuse(params, z_agents, g)[0]


def predict_coalition(params: ModelParams, partitions: np.ndarray, x_global: np.ndarray,
                      mask: np.ndarray | None = None) -> np.ndarray:
    """Prediction using only the agents in ``mask``; the global stream always participates."""
    h, _ = agent_forward(params, partitions)
    z = aggregate(h, params.W, mask)
    return global_mix(z, x_global, params)


def centralized_forward(params: ModelParams, x_global: np.ndarray) -> np.ndarray:
    """Single-stream baseline: a model configured with zero agents."""
    if params.n_agents:
        raise ConfigurationError("centralized_forward expects a model with no agents")
    return global_mix(np.zeros(np.shape(x_global)[:-1] + (params.n_classes,)), x_global, params)


@dataclass
class Forward:
    """Cached full-coalition forward pass over a batch, with everything backprop needs."""

    params: ModelParams
    h: np.ndarray
    agent_tapes: list[MlpTape]
    g: np.ndarray
    global_tape: MlpTape
    W: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    fusion_tape: MlpTape


def forward(params: ModelParams, partitions: np.ndarray, x_global: np.ndarray) -> Forward:
    h, tapes = agent_forward(params, partitions)
    if h.ndim == 2:
        raise ConfigurationError("forward expects a batch of cases")
    W = params.W
    z = aggregate(h, W)
    g, gtape = global_logits(params, x_global)
    logits, ftape = mix_and_fuse(params, z, g)
    return Forward(params, h, tapes, g, gtape, W, z, logits, ftape)


def backward(fwd: Forward, grad_logits: np.ndarray, freeze_decision: bool = False) -> Arrays:
    """Gradients of a scalar loss w.r.t. every parameter array, given ``dL/dlogits``."""
    p = fwd.params
    grads: Arrays = {}
    gfus, du = mlp_backward(fwd.fusion_tape, grad_logits)
    grads.update(gfus.to_arrays("fusion."))
    w_a, w_g = p.mixture
    dz = w_a * du
    dg = w_g * du
    dmix = np.array([np.sum(du * fwd.z), np.sum(du * fwd.g)])
    grads["mixture"] = softmax_flat_backward(p.mixture, dmix)
    gglob, _ = mlp_backward(fwd.global_tape, dg)
    grads.update(gglob.to_arrays("global."))
    if p.n_agents:
        dW = np.einsum("bk,bik->ik", dz, fwd.h)
        grads["decision"] = (np.zeros_like(dW) if freeze_decision
                             else softmax_flat_backward(fwd.W, dW))
        dh = dz[:, None, :] * fwd.W[None]
        for i, tape in enumerate(fwd.agent_tapes):
            gi, _ = mlp_backward(tape, dh[:, i, :])
            grads.update(gi.to_arrays(f"agent{i}."))
    else:
        grads["decision"] = np.zeros_like(p.decision_logits)
    return grads
