"""Train the full model next to its ablations on a noisier synthetic task and
compare macro test AUC across seeds.

    python3 demos/ablations.py [n_seeds]
"""
import sys

import numpy as np

from credmix.data import SplitSpec, SynthSpec, planted_alpha, stratified_split, synth_generate
from credmix.embedding import embed_dataset
from credmix.evaluation import evaluate
from credmix.training import TrainConfig, train

N, C, D = 5, 4, 16
VARIANTS = {
    "full": {},
    "decision matrix only": {"no_contribution_losses": True},
    "uniform decision matrix": {"no_decision_matrix": True},
    "global stream only": {"centralized_only": True},
}

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
scores = {name: [] for name in VARIANTS}
for seed in range(n_seeds):
    dataset, _ = synth_generate(SynthSpec(200, N, C, D, planted_alpha(N, C, 1.0), 1.0, seed=seed))
    tr, te = stratified_split(dataset, SplitSpec(0.75, seed))
    train_data, test_data = embed_dataset(tr), embed_dataset(te)
    for name, flags in VARIANTS.items():
        cfg = TrainConfig(N, C, D, epochs=50, learning_rate=5e-4, seed=seed, **flags)
        summary, _ = evaluate(train(cfg, train_data).params, train_data, test_data,
                              dataset.class_names)
        scores[name].append(summary.macro_auc)
    print(f"seed {seed} done", flush=True)

for name, vals in scores.items():
    print(f"{name:24s} macro AUC {np.mean(vals):.4f} +/- {np.std(vals):.4f}")
