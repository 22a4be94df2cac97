"""Composite loss, the seeded training loop, and checkpoint persistence."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import SPLIT_STREAM
from .embedding import EmbeddedData
from .errors import ConfigurationError, EvaluationError, IntegrityError
from .game import (CoalitionGame, ShapleyState, ema_update, kl_loss, policy_gradient_loss,
                   rewards_and_advantage, sample_budget, shapley_mc)
from .kernel import AdamState, Arrays, adam_step, bce_with_logits, sigmoid
from .model import ModelParams, backward, forward, init_model

CHECKPOINT_FORMAT = "credmix-checkpoint"
CHECKPOINT_VERSION = 1

# named random sub-streams derived from the single run seed
STREAM_SPLIT = SPLIT_STREAM
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_SHAPLEY = 4

PRESETS: dict[str, dict[str, Any]] = {
    "hcc-like": dict(epochs=1000, learning_rate=5e-5, batch_size=4, lambda_pg=1.0,
                     lambda_shap=10.0),
    "mtb-like": dict(epochs=30, learning_rate=5e-3, batch_size=4, lambda_pg=1.0,
                     lambda_shap=10.0),
}


def stream(seed: int, stream_id: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream_id, *extra])


@dataclass(frozen=True)
class TrainConfig:
    n_agents: int
    n_classes: int
    dim: int
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 5e-3
    lambda_pg: float = 1.0
    lambda_shap: float = 10.0
    ema_beta: float = 0.9
    mc_budget: int | None = None
    shapley_interval: int = 1
    seed: int = 0
    agent_hidden: tuple[int, ...] = (64,)
    fusion_hidden: tuple[int, ...] = (32,)
    log_every: int | None = None      # steps; None logs once per epoch
    centralized_only: bool = False
    no_decision_matrix: bool = False
    no_contribution_losses: bool = False

    def __post_init__(self):
        object.__setattr__(self, "agent_hidden", tuple(self.agent_hidden))
        object.__setattr__(self, "fusion_hidden", tuple(self.fusion_hidden))
        if min(self.n_classes, self.dim, self.epochs, self.batch_size, self.shapley_interval) < 1:
            raise ConfigurationError("sizes, epochs, batch_size, shapley_interval must be positive")
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be positive (use centralized_only for none)")
        if self.lambda_pg < 0 or self.lambda_shap < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.mc_budget is not None and self.mc_budget < 1:
            raise ConfigurationError("mc_budget must be >= 1")
        if self.seed < 0:
            raise ConfigurationError("seed must be nonnegative")

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @property
    def model_agents(self) -> int:
        return 0 if self.centralized_only else self.n_agents

    @property
    def budget(self) -> int:
        return self.mc_budget if self.mc_budget is not None else sample_budget(self.n_agents)

    @property
    def contribution_active(self) -> bool:
        return not (self.centralized_only or self.no_decision_matrix
                    or self.no_contribution_losses)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["agent_hidden"] = list(self.agent_hidden)
        d["fusion_hidden"] = list(self.fusion_hidden)
        return d


@dataclass
class LossBreakdown:
    bce: float
    pg: float
    shap: float
    total: float


def total_loss(params: ModelParams, batch: EmbeddedData, shapley: ShapleyState,
               config: TrainConfig, game: CoalitionGame | None = None,
               advantage: np.ndarray | None = None
               ) -> tuple[LossBreakdown, Arrays, np.ndarray | None]:
    """BCE + lambda_pg * policy-gradient + lambda_shap * KL(W || phi_ema).

    The advantage and the Shapley target are constants: only the decision
    logits receive gradient from the two game terms. Pass ``advantage`` to pin
    it (e.g. for finite-difference checks); otherwise it is computed on
    ``batch``. Returns the breakdown, gradients, and the advantage used.
    """
    fwd = forward(params, batch.partitions, batch.global_)
    y = batch.labels
    _, bce = bce_with_logits(fwd.logits, y)
    grads = backward(fwd, (sigmoid(fwd.logits) - y) / y.size,
                     freeze_decision=config.no_decision_matrix)
    pg = shap = 0.0
    if config.contribution_active and params.n_agents:
        if advantage is None:
            game = game if game is not None else CoalitionGame.from_data(params, batch)
            _, advantage, _ = rewards_and_advantage(game)
        W = fwd.W
        pg, d_pg = policy_gradient_loss(W, advantage)
        grads["decision"] = grads["decision"] + config.lambda_pg * d_pg
        if shapley.phi_ema is not None:
            shap, d_kl = kl_loss(W, shapley.phi_ema)
            grads["decision"] = grads["decision"] + config.lambda_shap * d_kl
    else:
        advantage = None
    total = bce + config.lambda_pg * pg + config.lambda_shap * shap
    return LossBreakdown(bce, pg, shap, total), grads, advantage


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    adam: AdamState
    shapley: ShapleyState
    step: int
    meta: dict = field(default_factory=dict)

    @property
    def rng_state(self) -> dict:
        # every stream is re-derived from (seed, stream id, epoch or step)
        return {"scheme": "seedsequence-streams", "seed": self.config.seed,
                "streams": {"split": STREAM_SPLIT, "init": STREAM_INIT,
                            "shuffle": STREAM_SHUFFLE, "shapley": STREAM_SHAPLEY}}


def _enc(a: np.ndarray | None):
    if a is None:
        return None
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _dec(d) -> np.ndarray | None:
    if d is None:
        return None
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _payload(ck: Checkpoint) -> dict:
    arrays = ck.params.to_arrays()
    return {
        "config": ck.config.to_dict(),
        "params": {k: _enc(v) for k, v in arrays.items()},
        "adam": {"m": {k: _enc(v) for k, v in ck.adam.m.items()},
                 "v": {k: _enc(v) for k, v in ck.adam.v.items()},
                 "step": ck.adam.step, "lr": ck.adam.lr, "beta1": ck.adam.beta1,
                 "beta2": ck.adam.beta2, "eps": ck.adam.eps},
        "shapley": {"phi_instant": _enc(ck.shapley.phi_instant),
                    "phi_ema": _enc(ck.shapley.phi_ema),
                    "beta": ck.shapley.beta, "budget": ck.shapley.budget},
        "step": ck.step,
        "rng_state": ck.rng_state,
        "meta": ck.meta,
    }


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    body = _dumps(_payload(ck))
    digest = hashlib.sha256(body.encode()).hexdigest()
    head = _dumps({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION})[:-1]
    return f'{head},"payload":{body},"digest":"{digest}"}}\n'.encode()


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        doc = json.loads(raw)
        fmt, version, payload, digest = doc["format"], doc["version"], doc["payload"], doc["digest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint ({exc})") from None
    if fmt != CHECKPOINT_FORMAT or version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: format {fmt!r} v{version} is not "
                             f"{CHECKPOINT_FORMAT!r} v{CHECKPOINT_VERSION}")
    if hashlib.sha256(_dumps(payload).encode()).hexdigest() != digest:
        raise IntegrityError(f"{path}: content digest mismatch")
    cfg = TrainConfig(**payload["config"])
    params = ModelParams.from_arrays({k: _dec(v) for k, v in payload["params"].items()})
    a = payload["adam"]
    adam = AdamState({k: _dec(v) for k, v in a["m"].items()},
                     {k: _dec(v) for k, v in a["v"].items()},
                     a["step"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    s = payload["shapley"]
    shap = ShapleyState(_dec(s["phi_instant"]), _dec(s["phi_ema"]), s["beta"], s["budget"])
    return Checkpoint(cfg, params, adam, shap, payload["step"], payload.get("meta", {}))


class TrainingAborted(EvaluationError):
    pass


@dataclass
class StepInfo:
    step: int
    epoch: int
    params: ModelParams
    breakdown: LossBreakdown
    advantage: np.ndarray | None
    shapley: ShapleyState


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[dict]

    @property
    def params(self) -> ModelParams:
        return self.checkpoint.params


def initial_checkpoint(config: TrainConfig) -> Checkpoint:
    params = init_model(config.model_agents, config.n_classes, config.dim,
                        stream(config.seed, STREAM_INIT), config.agent_hidden,
                        config.fusion_hidden)
    adam = AdamState.zeros(params.to_arrays(), lr=config.learning_rate)
    return Checkpoint(config, params, adam, ShapleyState(beta=config.ema_beta,
                                                         budget=config.budget), 0)


def _check_finite(step: int, breakdown: LossBreakdown, grads: Arrays) -> None:
    for term in ("bce", "pg", "shap", "total"):
        if not math.isfinite(getattr(breakdown, term)):
            raise TrainingAborted(f"step {step}: non-finite loss term {term!r}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"step {step}: non-finite gradient in parameter block {name!r}")


def steps_per_epoch(n_cases: int, batch_size: int) -> int:
    return -(-n_cases // batch_size)


def train(config: TrainConfig, data: EmbeddedData, *, resume: Checkpoint | None = None,
          stop_at: int | None = None, on_step: Callable[[StepInfo], None] | None = None,
          trace_path: str | Path | None = None) -> TrainResult:
    """Seeded Adam training of every parameter block.

    Each epoch visits a seeded permutation of the cases in batches (last short
    batch kept). Per step: Shapley estimate on the batch (every
    ``shapley_interval`` steps), EMA update, composite loss, Adam step.
    ``stop_at`` ends early after that many total steps, which together with
    ``resume`` reproduces an uninterrupted run exactly.
    """
    if (data.n_agents, data.n_classes, data.dim) != (config.n_agents, config.n_classes,
                                                      config.dim):
        raise ConfigurationError(
            f"data has N={data.n_agents}, C={data.n_classes}, D={data.dim}; config expects "
            f"N={config.n_agents}, C={config.n_classes}, D={config.dim}")
    if resume is not None and resume.config != config:
        raise ConfigurationError("checkpoint was produced under a different TrainConfig")
    ck = resume if resume is not None else initial_checkpoint(config)
    params, adam, shap, step = ck.params, ck.adam, ck.shapley, ck.step
    n = len(data)
    spe = steps_per_epoch(n, config.batch_size)
    total_steps = config.epochs * spe
    end = total_steps if stop_at is None else min(stop_at, total_steps)
    log_every = config.log_every or spe
    trace: list[dict] = []
    trace_fh = open(trace_path, "a", encoding="utf-8") if trace_path else None
    order = None
    order_epoch = -1
    try:
        while step < end:
            epoch, j = divmod(step, spe)
            if epoch != order_epoch:
                order = stream(config.seed, STREAM_SHUFFLE, epoch).permutation(n)
                order_epoch = epoch
            batch = data.take(order[j * config.batch_size:(j + 1) * config.batch_size])
            game = None
            if params.n_agents:
                game = CoalitionGame.from_data(params, batch)
                if step % config.shapley_interval == 0:
                    phi = shapley_mc(game, shap.budget, stream(config.seed, STREAM_SHAPLEY, step))
                    shap = ema_update(shap, phi)
            breakdown, grads, advantage = total_loss(params, batch, shap, config, game=game)
            _check_finite(step, breakdown, grads)
            new_arrays, adam = adam_step(params.to_arrays(), grads, adam)
            W_used = params.W
            params = ModelParams.from_arrays(new_arrays)
            step += 1
            if on_step is not None:
                on_step(StepInfo(step, epoch, params, breakdown, advantage, shap))
            if step % log_every == 0 or step == end:
                rec = _trace_record(step, epoch, breakdown, W_used, shap)
                trace.append(rec)
                if trace_fh:
                    trace_fh.write(json.dumps(rec) + "\n")
    finally:
        if trace_fh:
            trace_fh.close()
    final = Checkpoint(config, params, adam, shap, step, dict(ck.meta))
    return TrainResult(final, trace)


def _trace_record(step: int, epoch: int, b: LossBreakdown, W: np.ndarray,
                  shap: ShapleyState) -> dict:
    kl = None
    if shap.phi_ema is not None and W.size:
        kl = kl_loss(W, shap.phi_ema)[0]
    return {
        "step": step, "epoch": epoch,
        "bce": b.bce, "pg": b.pg, "shap": b.shap, "total": b.total,
        "pg_loss": b.pg, "kl": kl,
        "W": W.tolist(),
        "phi_instant": None if shap.phi_instant is None else shap.phi_instant.tolist(),
        "phi_ema": None if shap.phi_ema is None else shap.phi_ema.tolist(),
    }
