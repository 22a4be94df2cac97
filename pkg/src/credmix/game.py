"""Coalitional credit assignment over the agents of a model.

The value of a coalition ``S`` for class ``k`` is the batch-mean BCE of the
prediction that uses only the agents in ``S`` (global stream always on).
Lower is better, so an agent's marginal contribution to ``S`` is
``v_k(S) - v_k(S + {i})``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import BudgetError, ConfigurationError
from .kernel import bce_with_logits, softmax_flat_backward
from .model import (ModelParams, agent_forward, aggregate, global_logits, mask_from_bits,
                    mix_and_fuse)

MAX_EXACT_AGENTS = 12
KL_EPS = 1e-8
UNIFORM_FALLBACK = 1e-12


class CoalitionGame:
    """Per-class coalition losses on a frozen model and batch, memoized by bitmask.

    Agent and global head outputs are computed once; each coalition only
    re-runs the aggregation and fusion head.
    """

    def __init__(self, params: ModelParams, partitions: np.ndarray, x_global: np.ndarray,
                 labels: np.ndarray):
        self.params = params
        self.n_agents = params.n_agents
        self.labels = np.asarray(labels, dtype=np.float64)
        self.h, _ = agent_forward(params, partitions)
        self.g, _ = global_logits(params, x_global)
        self.W = params.W
        self._cache: dict[int, np.ndarray] = {}
        self.evaluations = 0

    @classmethod
    def from_data(cls, params: ModelParams, data) -> "CoalitionGame":
        return cls(params, data.partitions, data.global_, data.labels)

    @property
    def full(self) -> int:
        return (1 << self.n_agents) - 1

    def logits(self, bits: int) -> np.ndarray:
        z = aggregate(self.h, self.W, mask_from_bits(bits, self.n_agents))
        return mix_and_fuse(self.params, z, self.g)[0]

    def value(self, bits: int) -> np.ndarray:
        """Per-class batch-mean BCE for coalition ``bits``."""
        v = self._cache.get(bits)
        if v is None:
            self.evaluations += 1
            losses, _ = bce_with_logits(self.logits(bits), self.labels)
            v = losses.mean(axis=0)
            self._cache[bits] = v
        return v


def rewards_and_advantage(game: CoalitionGame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leave-one-out rewards ``r[i] = L(without i) - L(full)``, advantage ``r - mean_i r``.

    Returns ``(rewards, advantage, baseline)`` with shapes ``(N, C), (N, C), (C,)``.
    """
    N = game.n_agents
    full = game.value(game.full)
    r = np.array([game.value(game.full & ~(1 << i)) - full for i in range(N)])
    r = r.reshape(N, -1) if N else np.zeros((0, full.size))
    advantage, b = advantage_from_rewards(r)
    return r, advantage, b


def advantage_from_rewards(rewards: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the per-class mean over agents; columns of the result sum to zero."""
    if rewards.shape[0] == 0:
        return rewards.copy(), np.zeros(rewards.shape[1:])
    b = rewards.mean(axis=0)
    return rewards - b, b


def policy_gradient_loss(W: np.ndarray, advantage: np.ndarray) -> tuple[float, np.ndarray]:
    """``-sum(log W * A)`` and its gradient w.r.t. the decision logits (A held constant)."""
    if W.shape != advantage.shape:
        raise ConfigurationError(f"W shape {W.shape} != advantage shape {advantage.shape}")
    if W.size == 0:
        return 0.0, np.zeros_like(W)
    loss = -float(np.sum(np.log(W) * advantage))
    # d/dlogit of -sum A log W = -(A - W * sum A)
    return loss, -(advantage - W * advantage.sum())


def normalize_simplex(raw: np.ndarray) -> np.ndarray:
    total = float(raw.sum())
    if raw.size == 0:
        return raw.copy()
    if total < UNIFORM_FALLBACK:
        return np.full(raw.shape, 1.0 / raw.size)
    return raw / total


def shapley_mc(game: CoalitionGame, budget: int, rng: np.random.Generator,
               normalize: bool = True) -> np.ndarray:
    """Permutation-sampled, per-marginal rectified Shapley matrix ``(N, C)``.

    Each of ``budget`` random orderings contributes one marginal per agent
    (against its predecessors). The mean is normalized to the flat simplex
    unless ``normalize`` is False.
    """
    if budget < 1:
        raise ConfigurationError(f"sample budget must be >= 1, got {budget}")
    N = game.n_agents
    C = game.labels.shape[-1]
    acc = np.zeros((N, C))
    for _ in range(budget):
        bits = 0
        prev = game.value(0)
        for i in rng.permutation(N):
            bits |= 1 << int(i)
            cur = game.value(bits)
            acc[i] += np.maximum(prev - cur, 0.0)
            prev = cur
    acc /= budget
    return normalize_simplex(acc) if normalize else acc


@dataclass
class GameTable:
    """``values[bits, k]`` for every coalition bitmask."""

    n_agents: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != 1 << self.n_agents:
            raise ConfigurationError(
                f"table has {self.values.shape[0]} rows, need 2^{self.n_agents}")


def game_table(game: CoalitionGame) -> GameTable:
    if game.n_agents > MAX_EXACT_AGENTS:
        raise BudgetError(_budget_msg(game.n_agents))
    return GameTable(game.n_agents, np.array([game.value(b) for b in range(1 << game.n_agents)]))


def _budget_msg(n: int) -> str:
    return (f"exact Shapley over N={n} agents needs 2^{n} = {1 << n} coalition evaluations; "
            f"the limit is N <= {MAX_EXACT_AGENTS}")


@dataclass
class ExactShapley:
    phi: np.ndarray               # classical (unrectified) Shapley values
    rectified_raw: np.ndarray     # expected rectified marginal
    rectified: np.ndarray         # rectified_raw on the flat simplex


def shapley_exact(table: GameTable) -> ExactShapley:
    """Enumerate all coalitions.

    ``phi[i,k] = sum_{S not containing i} |S|!(N-|S|-1)!/N! (v_k(S) - v_k(S+i))``.
    """
    N = table.n_agents
    if N > MAX_EXACT_AGENTS:
        raise BudgetError(_budget_msg(N))
    v = table.values
    C = v.shape[1]
    weights = [math.factorial(s) * math.factorial(N - s - 1) / math.factorial(N)
               for s in range(N)]
    phi = np.zeros((N, C))
    rect = np.zeros((N, C))
    for i in range(N):
        bit = 1 << i
        terms = np.array([weights[bin(S).count("1")] * (v[S] - v[S | bit])
                          for S in range(1 << N) if not S & bit])
        # fsum is order-independent, so relabelled agents get bit-identical values
        for k in range(C):
            phi[i, k] = math.fsum(terms[:, k])
            rect[i, k] = math.fsum(np.maximum(terms[:, k], 0.0))
    return ExactShapley(phi, rect, normalize_simplex(rect))


@dataclass
class ShapleyState:
    phi_instant: np.ndarray | None = None
    phi_ema: np.ndarray | None = None
    beta: float = 0.9
    budget: int = 1

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"EMA decay must lie in [0, 1), got {self.beta}")


def ema_update(state: ShapleyState, phi_instant: np.ndarray) -> ShapleyState:
    """Blend into the running average and renormalize; the first call just copies."""
    phi_instant = np.asarray(phi_instant, dtype=np.float64)
    if state.phi_ema is None:
        ema = phi_instant.copy()
    else:
        if state.phi_ema.shape != phi_instant.shape:
            raise ConfigurationError(
                f"EMA shape {state.phi_ema.shape} != instant shape {phi_instant.shape}")
        ema = normalize_simplex(state.beta * state.phi_ema + (1.0 - state.beta) * phi_instant)
    return replace(state, phi_instant=phi_instant.copy(), phi_ema=ema)


def kl_loss(W: np.ndarray, phi: np.ndarray, eps: float = KL_EPS) -> tuple[float, np.ndarray]:
    """``KL(W || q)`` with ``q = (phi + eps)`` renormalized; gradient w.r.t. decision logits."""
    if W.shape != phi.shape:
        raise ConfigurationError(f"W shape {W.shape} != phi shape {phi.shape}")
    if W.size == 0:
        return 0.0, np.zeros_like(W)
    q = phi + eps
    q = q / q.sum()
    log_ratio = np.log(W) - np.log(q)
    loss = float(np.sum(W * log_ratio))
    return loss, softmax_flat_backward(W, log_ratio + 1.0)


def sample_budget(n_agents: int) -> int:
    """``ceil(2^(N/2))`` random orderings."""
    if n_agents < 1:
        raise ConfigurationError(f"need at least one agent, got {n_agents}")
    if n_agents % 2 == 0:
        return 1 << (n_agents // 2)
    return math.ceil(math.sqrt(2.0) * (1 << (n_agents // 2)))
