"""Produce a per-case report: each class score and its cutoff expressed as
percentiles of the training scores, plus the agents that moved the score most.

    python3 demos/attribution_report.py
"""
import json

from credmix.data import SplitSpec, SynthSpec, planted_alpha, stratified_split, synth_generate
from credmix.embedding import embed_dataset
from credmix.evaluation import attribution_report, evaluate, render_report
from credmix.training import TrainConfig, train

N, C, D = 4, 3, 12
dataset, _ = synth_generate(SynthSpec(120, N, C, D, planted_alpha(N, C), 0.5, seed=2))
train_set, test_set = stratified_split(dataset, SplitSpec(0.75, seed=2))
train_data, test_data = embed_dataset(train_set), embed_dataset(test_set)
result = train(TrainConfig(N, C, D, epochs=30, learning_rate=1e-3, seed=2), train_data)

# thresholds come from the training predictions only
_, thresholds = evaluate(result.params, train_data, test_data, dataset.class_names)
case_id = test_data.ids[0]
report = attribution_report(result.params, test_data.select([case_id]), thresholds,
                            result.checkpoint.shapley, dataset.class_names,
                            dataset.partition_names)
print(render_report(report))
print()
print(json.dumps(report.to_json()["classes"][0], indent=2))
