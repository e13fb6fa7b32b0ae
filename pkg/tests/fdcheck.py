"""Central finite differences, independent of the autodiff engine."""
import numpy as np


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """d f() / d x by perturbing ``x`` in place; ``f`` must read ``x`` on each call."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, n, floor: float = 1e-3) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true value is ~0 from dividing pure rounding
    noise by a tiny number.
    """
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def tiny_episode(seed: int = 0, d: int = 8, n_way: int = 3, n_query: int = 2):
    """3-way 1-shot description with ``n_query`` queries, as plain arrays."""
    rng = np.random.default_rng(seed)
    xd = rng.normal(size=(n_way, d))
    xq = rng.normal(size=(n_query, d))
    return xd, np.arange(n_way), xq, rng.integers(0, n_way, size=n_query)


def full_graph_check(spec, episode) -> dict[str, float]:
    """Relative error of every parameter's task-loss gradient against central FD.

    For first-order gradmap the description-set gradient is a constant of the
    outer loss by construction, so the FD side holds it fixed at its value for
    the unperturbed parameters.
    """
    from fastweights import tensor as T
    from fastweights.model import FastWeightModel

    xd, yd, xq, yq = episode
    model = FastWeightModel(spec)

    def loss():
        model.reset()
        model.describe(xd, yd)
        return T.softmax_cross_entropy(model.predict(xq), yq)

    tape = T.Tape()
    with tape:
        root = loss()
    tape.backward(root)
    params = model.parameters()
    auto = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
            for k, p in params.items()}
    if spec.binding == "gradmap" and not spec.gradmap_second_order:
        frozen = {k: v.data.copy()
                  for k, v in model.inner_gradients(model.encode(xd), yd).items()}
        model.inner_gradients = lambda keys, y: {k: T.Tensor(v) for k, v in frozen.items()}
    return {k: rel_error(auto[k], fd_grad(lambda: loss().item(), p.data))
            for k, p in params.items()}
