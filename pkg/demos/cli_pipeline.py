"""Run the command-line pipeline end to end in a scratch directory:
synth -> train (two seeds) -> eval -> attribute -> shapley-audit.

    python3 demos/cli_pipeline.py
"""
import tempfile
from pathlib import Path

from credmix.cli import main

with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    steps = [
        ["synth", "--n-cases", "120", "--agents", "4", "--classes", "3", "--dim", "12",
         "--seed", "5", "--out", str(root / "data")],
        ["train", "--dataset", str(root / "data" / "dataset.jsonl"), "--seeds", "0,1",
         "--preset", "mtb-like", "--epochs", "5", "--out", str(root / "run")],
        ["eval", str(root / "run" / "checkpoint_seed0.json"),
         str(root / "run" / "checkpoint_seed1.json")],
        ["attribute", str(root / "run" / "checkpoint_seed0.json"), "--case", "case007"],
        ["shapley-audit", str(root / "run" / "checkpoint_seed0.json"), "--exact",
         "--subset", "test"],
    ]
    for argv in steps:
        print("$ credmix", " ".join(argv[:1] + [a.replace(tmp, "$TMP") for a in argv[1:]]))
        if main(argv) != 0:
            raise SystemExit(f"step {argv[0]} failed")
    print("artifacts:", sorted(p.name for p in (root / "run").iterdir()))
