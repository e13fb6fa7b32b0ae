"""
Training a fast-weight learner on synthetic 5-way 1-shot tasks
==============================================================

Each episode draws 5 classes from a pool of Gaussian clusters, shows one
labelled example per class, and asks the model to label held-out queries.
The slow weights are trained with Adam across episodes; the fast weights
are rebuilt from scratch inside every episode.
"""
from fastweights.config import build_dataset, parse_config
from fastweights.episodes import RandomStream
from fastweights.model import FastWeightModel
from fastweights.trainer import MemorySink, evaluate, model_from_checkpoint, train_run

cfg = parse_config("""
seed = 0
model.input_shape = 16
model.mlp_hidden = 32
model.d_L = 32
data.source = synth_cluster
data.n_classes = 100
data.separation = 0.5
data.sigma = 0.25
train.n_episodes = 1500
train.eval_every = 250
train.eval_episodes = 100
train.test_episodes = 300
""")
pool, split = build_dataset(cfg)
print(f"{pool.n_classes} classes: {len(split.train_classes)} train, "
      f"{len(split.val_classes)} val, {len(split.test_classes)} test")

untrained = FastWeightModel(cfg.model.replace(input_shape=pool.input_shape))
before = evaluate(untrained, pool, split.test_classes, 300, RandomStream(0, "demo"))
print(f"untrained test accuracy: {before.mean:.3f}")

sink = MemorySink()
result = train_run(cfg, [sink], data=(pool, split))
for rec in result.val_history:
    print(f"  episode {rec['episode']:5d}   val acc {rec['mean_acc']:.3f}")

print(f"test accuracy of the best-val snapshot: {result.test.mean:.3f} "
      f"+/- {result.test.ci95:.3f}")

# The checkpoint rebuilds the same model.
model = model_from_checkpoint(result.best)
again = evaluate(model, pool, split.test_classes, 300, RandomStream(cfg.seed, "test"))
print(f"reloaded best snapshot: {again.mean:.3f}")
