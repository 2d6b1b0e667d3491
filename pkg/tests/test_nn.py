from __future__ import annotations

import numpy as np
import pytest

from evoensemble.nn import (
    AdamState,
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dense,
    LeakyReLU,
    Network,
    ShapeError,
    TapeError,
    adam_step,
    compose,
    grad_check,
    load_network,
    mse_loss,
    network_from_bytes,
    network_to_bytes,
)
from evoensemble.nn.checkpoint import CheckpointError
from evoensemble.nn.gradcheck import relative_error
from evoensemble.nn.layers import resolve_padding

F64 = np.float64


def random_case(kind: str, seed: int) -> tuple[Network, np.ndarray]:
    """A small float64 network holding one layer of ``kind`` plus its input."""
    rng = np.random.default_rng(seed)
    batch = int(rng.integers(2, 5))
    length = int(rng.integers(3, 8))
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 4))
    if kind == "dense":
        layer = Dense(c_in * length, c_out, rng=rng, dtype=F64)
        shape = (c_in * length,)
    elif kind == "conv1d":
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        padding = "same" if stride == 1 and rng.random() < 0.5 else int(rng.integers(0, 2))
        length = max(length, k)
        layer = Conv1d(c_in, c_out, k, stride=stride, padding=padding, rng=rng, dtype=F64)
        shape = (length, c_in)
    elif kind == "convtranspose1d":
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        padding = "same" if stride == 1 and rng.random() < 0.5 else 0
        layer = ConvTranspose1d(c_in, c_out, k, stride=stride, padding=padding, rng=rng, dtype=F64)
        shape = (length, c_in)
    elif kind == "batchnorm":
        layer = BatchNorm1d(c_in, dtype=F64)
        layer.params["gamma"][...] = rng.uniform(0.5, 1.5, c_in)
        layer.params["beta"][...] = rng.standard_normal(c_in)
        shape = (length, c_in)
    else:
        layer = LeakyReLU(float(rng.uniform(0.01, 0.3)))
        shape = (length, c_in)
    x = rng.standard_normal((batch,) + shape)
    if kind == "lrelu":
        # keep inputs away from the kink where the derivative is undefined
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
    return Network([layer], shape), x


@pytest.mark.parametrize("kind", ["dense", "conv1d", "convtranspose1d", "batchnorm", "lrelu"])
@pytest.mark.parametrize("seed", range(20))
def test_grad_check_every_layer_kind(kind, seed):
    net, x = random_case(kind, seed)
    assert grad_check(net, x, eps=1e-5, mode="train", seed=seed) < 1e-4


def test_grad_check_stacked_autoencoder():
    rng = np.random.default_rng(0)
    net = Network(
        [
            Conv1d(2, 3, 3, rng=rng, dtype=F64),
            LeakyReLU(),
            BatchNorm1d(3, dtype=F64),
            ConvTranspose1d(3, 2, 3, rng=rng, dtype=F64),
        ],
        (5, 2),
    )
    assert grad_check(net, rng.standard_normal((4, 5, 2))) < 1e-4


def test_grad_check_rejects_float32():
    net = Network([Dense(3, 2, rng=np.random.default_rng(0))], (3,))
    with pytest.raises(TypeError):
        grad_check(net, np.zeros((2, 3)))


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-3)


def test_dense_forward_matches_matmul():
    rng = np.random.default_rng(1)
    layer = Dense(4, 3, rng=rng, dtype=F64)
    net = Network([layer], (4,))
    x = rng.standard_normal((5, 4))
    W, b = layer.params["weight"], layer.params["bias"]
    np.testing.assert_allclose(net(x), x @ W + b)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(2)
    layer = Conv1d(2, 3, 3, padding=0, rng=rng, dtype=F64)
    x = rng.standard_normal((1, 6, 2))
    y = Network([layer], (6, 2))(x)
    W, b = layer.params["weight"], layer.params["bias"]
    expected = np.array([[sum(x[0, t + j] @ W[j] for j in range(3)) + b for t in range(4)]])
    np.testing.assert_allclose(y, expected)


@pytest.mark.parametrize("k,s,length", [(1, 1, 4), (3, 1, 5), (4, 2, 3), (8, 1, 4), (2, 3, 6)])
def test_transposed_conv_output_length(k, s, length):
    layer = ConvTranspose1d(2, 1, k, stride=s, padding=0, rng=np.random.default_rng(0))
    assert layer.output_shape((length, 2)) == ((length - 1) * s + k, 1)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 6, 8])
def test_same_padding_round_trip_keeps_length(k):
    rng = np.random.default_rng(k)
    net = Network([Conv1d(3, 5, k, rng=rng), ConvTranspose1d(5, 3, k, rng=rng)], (4, 3))
    assert net(np.zeros((2, 4, 3), dtype=np.float32)).shape == (2, 4, 3)
    assert sum(resolve_padding("same", k)) == k - 1


def test_shape_error_names_layer():
    net = Network([Dense(4, 2, rng=np.random.default_rng(0))], (4,))
    with pytest.raises(ShapeError, match=r"layer 0 \(dense\)"):
        net(np.zeros((2, 5), dtype=np.float32))


def test_batchnorm_statistics_only_change_on_commit():
    bn = BatchNorm1d(2, dtype=F64)
    net = Network([bn], (3, 2))
    x = np.random.default_rng(0).standard_normal((4, 3, 2)) + 5.0
    _, tape = net.forward(x, "train")
    np.testing.assert_array_equal(bn.buffers["running_mean"], 0.0)
    net.commit(tape)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.reshape(-1, 2).mean(axis=0))


def test_batchnorm_train_output_is_standardised():
    net = Network([BatchNorm1d(3, dtype=F64)], (6, 3))
    x = np.random.default_rng(4).standard_normal((8, 6, 3)) * 4 + 2
    y = net.forward(x, "train")[0].reshape(-1, 3)
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-5)


def test_stale_tape_rejected_after_update():
    rng = np.random.default_rng(0)
    net = Network([Dense(3, 2, rng=rng, dtype=F64)], (3,))
    x = rng.standard_normal((2, 3))
    y, tape = net.forward(x, "train")
    net.touch()
    with pytest.raises(TapeError):
        net.backward(tape, np.ones_like(y))


def test_tape_from_other_network_rejected():
    a = Network([Dense(3, 2, rng=np.random.default_rng(0))], (3,))
    b = a.copy()
    y, tape = a.forward(np.zeros((1, 3), dtype=np.float32), "train")
    with pytest.raises(TapeError):
        b.backward(tape, np.ones_like(y))


def test_mse_loss_value_and_gradient():
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.zeros((2, 2))
    loss, g = mse_loss(pred, target)
    assert loss == pytest.approx(7.5)
    np.testing.assert_allclose(g, pred / 2)


def test_adam_first_step_is_lr_sized():
    # with m/v bias correction the first update is lr * sign(g)
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([0.3, -4.0, 1e-3])]
    state = AdamState(lr=0.1)
    adam_step(p, g, state)
    np.testing.assert_allclose(p[0], [0.9, -1.9, 0.4], atol=1e-5)
    assert state.step == 1


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(5)
    p = rng.standard_normal(4)
    ref = p.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = AdamState(lr=0.01)
    params = [p]
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step(params, [g], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params[0], ref, rtol=1e-12)


def test_compose_shares_parameters():
    rng = np.random.default_rng(0)
    a = Network([Dense(4, 2, rng=rng)], (4,))
    b = Network([Dense(2, 4, rng=rng)], (2,))
    ab = compose(a, b)
    assert ab.n_parameters() == a.n_parameters() + b.n_parameters()
    assert ab.parameters()[0] is a.parameters()[0]
    x = rng.standard_normal((3, 4)).astype(np.float32)
    np.testing.assert_array_equal(ab(x), b(a(x)))


def _sample_network(dtype=np.float32):
    rng = np.random.default_rng(9)
    return Network(
        [
            Conv1d(3, 4, 3, rng=rng, dtype=dtype),
            LeakyReLU(0.2),
            BatchNorm1d(4, dtype=dtype),
            ConvTranspose1d(4, 3, 3, rng=rng, dtype=dtype),
            Dense(3, 2, rng=rng, dtype=dtype),
        ],
        (5, 3),
    )


def test_checkpoint_round_trip_is_exact(tmp_path):
    net = _sample_network()
    x = np.random.default_rng(0).standard_normal((2, 5, 3)).astype(np.float32)
    net.commit(net.forward(x, "train")[1])
    path = tmp_path / "net.bin"
    from evoensemble.nn import save_network

    save_network(net, path)
    back = load_network(path)
    for a, b in zip(net.parameters(), back.parameters()):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(net(x), back(x))
    assert network_to_bytes(back) == path.read_bytes()


def test_checkpoint_header_and_corruption():
    blob = network_to_bytes(_sample_network())
    assert blob[:8] == b"EVOENSNN"
    with pytest.raises(CheckpointError):
        network_from_bytes(b"NOTMAGIC" + blob[8:])
    with pytest.raises(CheckpointError):
        network_from_bytes(blob[:-4])
