import numpy as np
import pytest

from fastweights import tensor as T
from fastweights.episodes import RandomStream
from fastweights.errors import ConfigurationError, InputError, LabelError, ProtocolError
from fastweights.model import (FastSlowLayer, FastWeightModel, GradMapper, ModelSpec,
                               describe_gradmap, describe_hebb, fast_slow_forward, predict)
from fastweights.tensor import Tape, Tensor

from fdcheck import fd_grad, rel_error

SMALL = ModelSpec(encoder="mlp", input_shape=(6,), mlp_hidden=(8,), d_L=10, n_way=3, seed=4)


def leaky(x, s=0.2):
    return np.where(x > 0, x, s * x)


def episode_data(seed, n_way=3, k=2, d=6, n_q=4):
    rng = np.random.default_rng(seed)
    xd = rng.normal(size=(n_way * k, d))
    yd = np.repeat(np.arange(n_way), k)
    xq = rng.normal(size=(n_q, d))
    yq = rng.integers(0, n_way, size=n_q)
    return xd, yd, xq, yq


def run_loss(model, xd, yd, xq, yq):
    model.reset()
    model.describe(xd, yd)
    return T.softmax_cross_entropy(model.predict(xq), yq)


# -- encoders ---------------------------------------------------------------

@pytest.mark.parametrize("filters", [64, 32])
def test_cnn_output_width(filters):
    spec = ModelSpec(encoder="cnn_small", input_shape=(1, 28, 28), cnn_filters=filters, d_L=8)
    m = FastWeightModel(spec)
    assert m.encoder.out_dim == filters
    assert m.encode(np.random.default_rng(0).normal(size=(2, 1, 28, 28))).shape == (2, filters)


def test_zero_input_gives_zero_key():
    spec = ModelSpec(encoder="cnn_small", input_shape=(1, 28, 28), cnn_filters=8, d_L=8)
    np.testing.assert_array_equal(FastWeightModel(spec).encode(np.zeros((1, 1, 28, 28))).data,
                                  np.zeros((1, 8)))
    np.testing.assert_array_equal(FastWeightModel(SMALL).encode(np.zeros((1, 6))).data,
                                  np.zeros((1, 8)))


def test_identical_inputs_identical_keys():
    m = FastWeightModel(SMALL)
    x = np.random.default_rng(0).normal(size=6)
    k = m.encode(np.stack([x, x])).data
    assert k[0].tobytes() == k[1].tobytes()


def test_encode_shape_mismatch():
    with pytest.raises(InputError):
        FastWeightModel(SMALL).encode(np.zeros((2, 5)))
    spec = ModelSpec(encoder="cnn_small", input_shape=(1, 28, 28), cnn_filters=4, d_L=8)
    with pytest.raises(InputError):
        FastWeightModel(spec).encode(np.zeros((1, 28, 28, 1)))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        FastWeightModel(SMALL.replace(n_way=1))
    with pytest.raises(ConfigurationError):
        FastWeightModel(SMALL.replace(encoder="cnn_small"))
    with pytest.raises(ConfigurationError):
        FastWeightModel(SMALL.replace(binding="gradmap", fast_placement="softmax_only_fast"))
    with pytest.raises(ConfigurationError):
        FastWeightModel(SMALL.replace(hidden_layer=False))


# -- fast/slow layer --------------------------------------------------------

def make_layer(use_slow=True, use_fast=True, seed=0):
    return FastSlowLayer("fc", 5, 4, "leaky", use_slow=use_slow, use_fast=use_fast,
                         rng=RandomStream(seed, "init"))


def test_zero_memory_reduces_to_slow_path():
    layer = make_layer()
    h = Tensor(np.random.default_rng(1).normal(size=5))
    np.testing.assert_array_equal(fast_slow_forward(layer, h).data,
                                  leaky(h.data @ layer.W.data + layer.b.data))


def test_fast_only_is_memory_readout():
    layer = make_layer(use_slow=False)
    rng = np.random.default_rng(2)
    layer.mem.write_many(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 4))))
    h = rng.normal(size=5)
    np.testing.assert_array_equal(fast_slow_forward(layer, Tensor(h)).data,
                                  leaky(layer.mem.M.data.T @ h))


def test_random_instance_matches_direct_evaluation():
    layer = make_layer()
    rng = np.random.default_rng(3)
    layer.mem.write_many(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 4))))
    H = rng.normal(size=(7, 5))
    expected = leaky(H @ layer.W.data + layer.b.data) + leaky(H @ layer.mem.M.data)
    np.testing.assert_allclose(layer.forward(Tensor(H)).data, expected, atol=1e-14)


def test_disabling_fast_path_is_plain_dense_layer_bit_exact():
    layer = make_layer()
    rng = np.random.default_rng(4)
    layer.mem.write_many(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 4))))
    h = Tensor(rng.normal(size=(6, 5)))
    dense = T.leaky_relu(T.add(T.matmul(h, layer.W), layer.b), 0.2)
    assert layer.forward(h, fast=False).data.tobytes() == dense.data.tobytes()


def test_both_paths_disabled():
    with pytest.raises(ConfigurationError):
        make_layer(use_slow=False, use_fast=False)


# -- Hebbian description ----------------------------------------------------

def test_empty_description_leaves_memory_zero():
    m = FastWeightModel(SMALL)
    xq = np.random.default_rng(0).normal(size=(3, 6))
    describe_hebb(m, [])
    np.testing.assert_array_equal(m.fc.mem.M.data, 0)
    slow = m.out.forward(m.fc.forward(m.encode(xq), fast=False))
    np.testing.assert_array_equal(predict(m, xq).data, slow.data)


@pytest.mark.parametrize("scale", [3.0, 5.0])
def test_exact_recall_two_way_without_training(scale):
    spec = ModelSpec(encoder="identity", input_shape=(4,), n_way=2,
                     fast_placement="softmax_only_fast", hidden_layer=False)
    m = FastWeightModel(spec)
    x = scale * np.eye(4)[:2]
    describe_hebb(m, [(x[0], 0), (x[1], 1)])
    p = T.softmax(predict(m, x)).data
    assert p[0, 0] > 0.99 and p[1, 1] > 0.99
    assert list(p.argmax(axis=1)) == [0, 1]


def test_description_order_reversal():
    xd, yd, xq, _ = episode_data(0)
    a, b = FastWeightModel(SMALL), FastWeightModel(SMALL)
    describe_hebb(a, list(zip(xd, yd)))
    describe_hebb(b, list(zip(xd[::-1], yd[::-1])))
    np.testing.assert_allclose(predict(a, xq).data, predict(b, xq).data, atol=1e-9, rtol=0)


def test_label_permutation_equivariance_softmax_placement():
    spec = ModelSpec(encoder="mlp", input_shape=(6,), mlp_hidden=(16,), n_way=4,
                     fast_placement="softmax_only_fast", hidden_layer=False, seed=2)
    rng = np.random.default_rng(8)
    xd = rng.normal(size=(4, 6))
    yd = np.arange(4)
    xq = xd + 0.1 * rng.normal(size=(4, 6))
    perm = rng.permutation(4)
    a, b = FastWeightModel(spec), FastWeightModel(spec)
    a.describe(xd, yd)
    b.describe(xd, perm[yd])
    pa, pb = predict(a, xq).data, predict(b, xq).data
    np.testing.assert_array_equal(perm[pa.argmax(axis=1)], pb.argmax(axis=1))


def test_hebbian_phase_writes_n_and_keeps_slow_weights():
    m = FastWeightModel(SMALL)
    xd, yd, _, _ = episode_data(1)
    before = m.checksum()
    m.describe(xd, yd)
    assert m.fc.mem.write_count == len(yd)
    assert m.checksum() == before


def test_fc_and_softmax_writes_both_layers():
    m = FastWeightModel(SMALL.replace(fast_placement="fc_and_softmax"))
    xd, yd, xq, _ = episode_data(2)
    m.describe(xd, yd)
    assert m.fc.mem.write_count == m.out.mem.write_count == len(yd)
    keys = m.encode(xd)
    values = m.projector.project(yd, noise=False)
    np.testing.assert_allclose(m.fc.mem.M.data, keys.data.T @ values.data, atol=1e-12)
    h = m.fc.forward(keys).data
    np.testing.assert_allclose(m.out.mem.M.data, h.T @ np.eye(3)[yd], atol=1e-12)


def test_episode_isolation():
    xd, yd, xq, _ = episode_data(3)
    xd2, yd2, _, _ = episode_data(4)
    a, b = FastWeightModel(SMALL), FastWeightModel(SMALL)
    a.describe(xd2, yd2)
    a.predict(xq)
    a.reset()
    a.describe(xd, yd)
    b.describe(xd, yd)
    assert a.predict(xq).data.tobytes() == b.predict(xq).data.tobytes()


def test_protocol_errors():
    m = FastWeightModel(SMALL)
    with pytest.raises(ProtocolError):
        m.predict(np.zeros((1, 6)))
    with pytest.raises(LabelError):
        m.describe(np.zeros((1, 6)), [3])
    m.describe(np.zeros((1, 6)), [0])
    with pytest.raises(ProtocolError):
        m.describe(np.zeros((1, 6)), [0])
    with pytest.raises(ConfigurationError):
        describe_gradmap(FastWeightModel(SMALL), [])


def test_label_noise_only_when_training():
    spec = SMALL.replace(noise_halfwidth=0.01)
    xd, yd, _, _ = episode_data(5)
    a, b = FastWeightModel(spec), FastWeightModel(spec)
    a.describe(xd, yd, RandomStream(0, "noise"), train=False)
    b.describe(xd, yd, None, train=False)
    assert a.fc.mem.M.data.tobytes() == b.fc.mem.M.data.tobytes()
    a.reset()
    a.describe(xd, yd, RandomStream(0, "noise"), train=True)
    assert not np.array_equal(a.fc.mem.M.data, b.fc.mem.M.data)


# -- gradient-mapped description --------------------------------------------

GRADMAP = SMALL.replace(binding="gradmap")


def test_gradmap_zero_gradient_gives_constant_matrix():
    g = GradMapper((40, 40), RandomStream(0, "g"))
    g.params["gradmap.b0"].data[:] = np.random.default_rng(0).normal(size=40)
    M = g(Tensor(np.zeros((5, 4)))).data
    np.testing.assert_array_equal(M, np.full((5, 4), M[0, 0]))
    assert M[0, 0] == pytest.approx(g(Tensor(np.zeros((1, 1)))).item(), abs=1e-15)


def test_gradmap_is_coordinatewise():
    g = GradMapper((40, 40), RandomStream(0, "g"))
    G = np.random.default_rng(1).normal(size=(3, 4))
    M = g(Tensor(G)).data
    for idx in np.ndindex(G.shape):
        assert M[idx] == pytest.approx(g(Tensor(np.array([[G[idx]]]))).item(), abs=1e-15)


def test_gradmap_starts_near_slow_only():
    m = FastWeightModel(GRADMAP)
    xd, yd, xq, _ = episode_data(6)
    m.describe(xd, yd)
    assert np.max(np.abs(m.fc.mem.M.data)) < 0.05
    slow = m.out.forward(m.fc.forward(m.encode(xq), fast=False)).data
    np.testing.assert_allclose(m.predict(xq).data, slow, atol=0.1)


@pytest.mark.parametrize("placement", ["fc_layer", "fc_and_softmax", "softmax_fast_and_slow"])
def test_inner_gradients_equal_sum_of_per_example_backward(placement):
    m = FastWeightModel(GRADMAP.replace(fast_placement=placement))
    xd, yd, _, _ = episode_data(7)
    keys = m.encode(xd)
    closed = {k: v.data for k, v in m.inner_gradients(keys, yd).items()}
    total = {layer.name: np.zeros_like(layer.W.data) for layer in m.fast_layers()}
    for i in range(len(yd)):
        for layer in m.head:
            layer.W.grad = None
        tape = Tape()
        with tape:
            h = Tensor(keys.data[i])
            for layer in m.head:
                h = layer.forward(h, fast=False)
            loss = T.softmax_cross_entropy(h, int(yd[i]))
        tape.backward(loss)
        for layer in m.fast_layers():
            total[layer.name] += layer.W.grad
    assert set(closed) == set(total)
    for k in total:
        np.testing.assert_allclose(closed[k], total[k], atol=1e-12)


def test_gradmap_assigns_mapped_gradient():
    m = FastWeightModel(GRADMAP)
    xd, yd, _, _ = episode_data(8)
    G = m.inner_gradients(m.encode(xd), yd)["fc"]
    m.describe(xd, yd)
    np.testing.assert_allclose(m.fc.mem.M.data, m.gradmap(G).data, atol=1e-15)
    assert m.fc.mem.write_count == len(yd)


@pytest.mark.parametrize("second_order", [False, True])
def test_gradmap_parameter_gradients_match_fd(second_order):
    m = FastWeightModel(GRADMAP.replace(gradmap_second_order=second_order,
                                        gradmap_hidden=(6, 6), gradmap_out_scale=1.0))
    data = episode_data(9)
    tape = Tape()
    with tape:
        loss = run_loss(m, *data)
    tape.backward(loss)
    for name, p in m.gradmap.params.items():
        num = fd_grad(lambda: run_loss(m, *data).item(), p.data)
        assert rel_error(p.grad, num) < 1e-4, name


def _encoder_grads(model, data):
    for p in model.parameters().values():
        p.grad = None
    tape = Tape()
    with tape:
        loss = run_loss(model, *data)
    tape.backward(loss)
    return {k: v.grad.copy() for k, v in model.parameters().items() if k.startswith("encoder")}


@pytest.mark.parametrize("binding", ["hebb", "gradmap"])
def test_truncation_removes_description_branch_only(binding):
    # first-order gradmap already detaches the inner gradient, so only the
    # second-order form has a description branch to remove
    spec = SMALL.replace(binding=binding, gradmap_out_scale=1.0, gradmap_second_order=True)
    data = episode_data(10)
    xd, yd, xq, yq = data
    truncated = _encoder_grads(FastWeightModel(spec.replace(truncate_through_rule=True)), data)
    full = _encoder_grads(FastWeightModel(spec), data)

    # reference: fast weights built outside any tape, then only the query branch is traced
    ref = FastWeightModel(spec)
    ref.describe(xd, yd)
    fixed = ref.fc.mem.M.data.copy()
    for p in ref.parameters().values():
        p.grad = None
    tape = Tape()
    with tape:
        ref.reset()
        ref.fc.mem.assign(Tensor(fixed), len(yd))
        ref._described = True
        loss = T.softmax_cross_entropy(ref.predict(xq), yq)
    tape.backward(loss)
    for k, g in truncated.items():
        np.testing.assert_allclose(g, ref.parameters()[k].grad, atol=1e-13)
        assert np.any(g != 0)
    assert any(not np.allclose(full[k], truncated[k]) for k in full)


def test_truncated_hebb_description_branch_is_zero():
    spec = SMALL.replace(truncate_through_rule=True)
    m = FastWeightModel(spec)
    xd, yd, _, _ = episode_data(11)
    tape = Tape()
    with tape:
        m.describe(xd, yd)
        loss = T.sum(m.fc.mem.M)
    assert loss.node_id is None  # nothing upstream of M is on the tape


def test_first_order_gradmap_has_no_description_branch():
    spec = SMALL.replace(binding="gradmap", gradmap_out_scale=1.0)
    data = episode_data(12)
    a = _encoder_grads(FastWeightModel(spec), data)
    b = _encoder_grads(FastWeightModel(spec.replace(truncate_through_rule=True)), data)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], atol=1e-13)
