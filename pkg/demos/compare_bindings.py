"""
Hebbian binding versus gradient mapping
=======================================

Both learners write the description set into the same fast-weight slot.
The Hebbian rule adds key/pseudovalue outer products; the gradient mapper
computes the description-set loss gradient with respect to the slot and
passes it through a small learned coordinate-wise network.  The second
costs one extra forward/backward over the description set.
"""
from fastweights.model import ModelSpec
from fastweights.trainer import format_timing_table, timing_bench

spec = ModelSpec(encoder="cnn_small", input_shape=(1, 28, 28), cnn_filters=32,
                 cnn_layers=4, d_L=128, n_way=5, k_shot=1)
rows = timing_bench([spec, spec.replace(binding="gradmap")], 10, warmup=5,
                    labels=["hebb", "gradmap"])
print(format_timing_table(rows))

hebb, grad = rows
print(f"\ndescribe is {grad.describe_ms / hebb.describe_ms:.1f}x slower with gradient mapping")
