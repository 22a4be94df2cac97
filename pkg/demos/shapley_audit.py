"""Compare three views of agent credit on one batch: exact Shapley values,
the permutation-sampled estimate used during training, and the leave-one-out
advantage that drives the policy-gradient term.

    python3 demos/shapley_audit.py
"""
import numpy as np

from credmix.data import SynthSpec, planted_alpha, synth_generate
from credmix.embedding import embed_dataset
from credmix.game import (CoalitionGame, game_table, rewards_and_advantage, sample_budget,
                          shapley_exact, shapley_mc)
from credmix.training import TrainConfig, train

N, C, D = 5, 3, 12
dataset, _ = synth_generate(SynthSpec(80, N, C, D, planted_alpha(N, C), 0.5, seed=1))
data = embed_dataset(dataset)
params = train(TrainConfig(N, C, D, epochs=10, learning_rate=1e-3, seed=1), data).params

game = CoalitionGame.from_data(params, data)
exact = shapley_exact(game_table(game))
np.set_printoptions(precision=4, suppress=True)
print("classical Shapley values (can be negative):\n", exact.phi)
print("efficiency check, sum over agents vs v(empty) - v(all):")
print("  ", exact.phi.sum(axis=0), game.value(0) - game.value(game.full))
print("rectified and normalized (the training target):\n", exact.rectified)

for M in (sample_budget(N), 50, 2000):
    est = shapley_mc(game, M, np.random.default_rng(0))
    print(f"M={M:5d} permutations: max abs gap to exact {np.abs(est - exact.rectified).max():.4f}")

_, advantage, baseline = rewards_and_advantage(game)
print("leave-one-out advantage (columns sum to zero):\n", advantage)
print(f"{game.evaluations} distinct coalitions evaluated out of {2 ** N}")
