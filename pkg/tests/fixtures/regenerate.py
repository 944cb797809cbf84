"""Rebuild the pinned regression fixtures.

Run from the repository root: ``python3 tests/fixtures/regenerate.py``. Only
do this after a deliberate numerical change, and review the diff.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from gapl.config import TrainConfig
from gapl.data import GenSpec, generate
from gapl.evaluate import evaluate
from gapl.trainer import train

HERE = Path(__file__).parent


def canonical_curve() -> dict:
    gen = generate(GenSpec(d=64, N=49, M=10, D=2, shots=16, seed=7))
    res = train(gen.train, TrainConfig())
    return {"seed": 7, "config_hash": res.checkpoint.config.hash(),
            "loss_hex": [x.hex() for x in res.losses],
            "final_fused_train_acc": res.log[-1].acc["fused"]}


def seed_accuracies() -> dict:
    out = {}
    for seed in range(5):
        gen = generate(GenSpec(d=64, N=49, M=10, D=2, shots=16, seed=seed))
        model = train(gen.train, TrainConfig(seed=seed)).model
        accs = [evaluate(model, gen.test[dom], gap_domains=None)["report"]["accuracy"]["fused"]
                for dom in sorted(gen.test)]
        out[str(seed)] = float(np.mean(accs))
    return out


if __name__ == "__main__":
    (HERE / "canonical_curve.json").write_text(json.dumps(canonical_curve(), indent=1) + "\n")
    (HERE / "seed_accuracy.json").write_text(json.dumps(seed_accuracies(), indent=1) + "\n")
