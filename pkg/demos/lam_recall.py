"""
Outer-product memory: exact recall and crosstalk
================================================

A linear associative memory stores pairs as M = sum_i k_i v_i^T and reads
with q M.  Orthonormal keys give back every value exactly; correlated keys
leak a little of each stored value into every read.
"""
import numpy as np

from fastweights.memory import LAMemory, crosstalk_report
from fastweights.tensor import Tensor

rng = np.random.default_rng(0)
d, d_val, m = 32, 8, 10

q, _ = np.linalg.qr(rng.normal(size=(d, d)))
keys = q[:, :m].T
values = rng.normal(size=(m, d_val))

mem = LAMemory(d, d_val)
for k, v in zip(keys, values):
    mem.write(Tensor(k), Tensor(v))

err = max(np.abs(mem.read(Tensor(k)).data - v).max() for k, v in zip(keys, values))
print(f"orthonormal keys, {m} pairs stored: max recall error {err:.2e}")

# Random unit keys are only approximately orthogonal.
random_keys = rng.normal(size=(m, d))
random_keys /= np.linalg.norm(random_keys, axis=1, keepdims=True)
mem.reset()
mem.write_many(Tensor(random_keys), Tensor(values))

gram = crosstalk_report(random_keys)
off = gram[~np.eye(m, dtype=bool)]
print(f"random keys: mean |cos| between keys {np.abs(off).mean():.3f} "
      f"(1/sqrt(d) = {1 / np.sqrt(d):.3f})")

for n in (1, 5, 10, 20, 32):
    ks = rng.normal(size=(n, d))
    ks /= np.linalg.norm(ks, axis=1, keepdims=True)
    vs = rng.normal(size=(n, d_val))
    mem.reset()
    mem.write_many(Tensor(ks), Tensor(vs))
    read = mem.read(Tensor(ks)).data
    rel = np.linalg.norm(read - vs) / np.linalg.norm(vs)
    print(f"  {n:2d} random keys   relative read error {rel:.3f}")
