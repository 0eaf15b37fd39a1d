"""Cold-start training on the copy task, comparing the four objectives.

Run with ``python3 notebooks/03_copy_task.py [steps]`` (default 3000 steps
per regime; a few minutes).  The acceptance suite runs the full 20k budget.
"""
import sys

import numpy as np

from softmax_pg.data import TaskSpec, corpus_stats, generate_task
from softmax_pg.estimators import EstimatorConfig
from softmax_pg.model import GRUModel
from softmax_pg.rewards import RewardConfig
from softmax_pg.samplers import greedy_decode_batch, sample_spg_batch
from softmax_pg.trainer import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
ds = generate_task(TaskSpec("copy", 20, 4, 8, 2000, 200, 200, seed=7, t_max=10))
print(corpus_stats(ds.splits["train"], 20))

runs = {}
for regime in ("mle", "raml", "pg", "spg"):
    model = GRUModel(20, 10, 32, 32)
    params = model.init_params(np.random.default_rng(0))
    cfg = TrainConfig(EstimatorConfig(regime, reward=RewardConfig(p_drop=0.4)), lr=0.2,
                      batch_size=32, max_steps=steps, eval_interval=250, seed=0)
    res = train(model, params, cfg, ds.splits["train"], ds.splits["valid"])
    runs[regime] = (model, res)
    curve = " ".join(f"{r.main_reward:.2f}" for r in res.history)
    print(f"{regime:5} {res.mean_step_ms:5.1f} ms/step  best {res.best_reward:.4f}  curve {curve}")

# where SPG goes wrong: the first word
model, res = runs["spg"]
valid = ds.splits["valid"]
decoded = greedy_decode_batch(model, res.best_params, [ex.x for ex in valid], RewardConfig())
first = np.mean([z[0] == ex.y[0] for z, ex in zip(decoded, valid)])
print(f"\nSPG first-word accuracy {first:.3f} (chance about {np.mean([1 / len(ex.x) for ex in valid]):.3f})")
for ex, z in list(zip(valid, decoded))[:5]:
    print("  y", ex.y, " greedy", z)

# the tilted targets it trains on
outs = sample_spg_batch(model, res.best_params, [ex.x for ex in valid[:5]], [ex.y for ex in valid[:5]],
                        RewardConfig(p_drop=0.4), np.random.default_rng(1))
for ex, o in zip(valid[:5], outs):
    tags = "".join("R" if w else "M" for w in o.w)
    print(f"  y {ex.y}  target {o.z}  steps {tags}  R={o.reward:.3f}")
