import numpy as np
import pytest

from segqa import nnet
from segqa.errors import FormatError, NumericError, ValidationError

from gradcheck import check_network
from oracles import conv3d_loop


def _away_from_zero(x):
    # keep ReLU inputs off the kink
    return np.where(np.abs(x) < 0.05, x + 0.1, x)


LAYER_CASES = {
    "conv": (lambda: [nnet.Conv3D(2, 3, kernel=3, stride=1, pad=1)], (2, 2, 4, 4, 4)),
    "conv_strided": (lambda: [nnet.Conv3D(1, 2, kernel=2, stride=2)], (2, 1, 4, 4, 4)),
    "conv_transpose": (lambda: [nnet.ConvTranspose3D(2, 2, kernel=2, stride=2)], (2, 2, 2, 2, 2)),
    "conv_transpose_pad": (lambda: [nnet.ConvTranspose3D(1, 2, kernel=3, stride=2, pad=1)],
                           (1, 1, 3, 3, 3)),
    "dense": (lambda: [nnet.Dense(5, 4)], (3, 5)),
    "relu": (lambda: [nnet.ReLU()], (3, 6)),
    "sigmoid": (lambda: [nnet.Sigmoid()], (3, 6)),
    "softmax": (lambda: [nnet.Softmax()], (2, 4, 2, 2, 2)),
    "flatten": (lambda: [nnet.Flatten(), nnet.Dense(16, 2)], (2, 2, 2, 2, 2)),
    "reshape": (lambda: [nnet.Reshape((2, 2, 2, 2)), nnet.Conv3D(2, 1, kernel=1)], (2, 16)),
    "upsample": (lambda: [nnet.Upsample(2), nnet.Conv3D(1, 1, kernel=1)], (1, 1, 2, 2, 2)),
    "voxel_bias": (lambda: [nnet.VoxelBias((1, 2, 2, 2))], (2, 1, 2, 2, 2)),
    "sample_gaussian": (lambda: [nnet.SampleGaussian(3, kl_weight=0.7)], (4, 6)),
}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients(case):
    make, shape = LAYER_CASES[case]
    net = nnet.Network(make(), seed=3)
    for name, p in net.named_params():
        net.set_param(name, np.random.default_rng(7).normal(0, 0.5, p.shape).astype(np.float32))
    x = _away_from_zero(np.random.default_rng(5).normal(size=shape))
    errs = check_network(net, x)
    assert max(errs.values()) < 1e-3, errs


def test_composed_three_layer_net_gradients():
    net = nnet.Network([nnet.Conv3D(1, 2, kernel=3, pad=1), nnet.ReLU(),
                        nnet.Flatten(), nnet.Dense(2 * 27, 3), nnet.Sigmoid()], seed=11)
    x = np.random.default_rng(2).normal(size=(2, 1, 3, 3, 3))
    errs = check_network(net, x)
    assert max(errs.values()) < 1e-3, errs


def test_conv_matches_loop_oracle(rng):
    layer = nnet.Conv3D(2, 3, kernel=3, stride=2, pad=1)
    layer.init(rng)
    x = rng.normal(size=(2, 2, 5, 4, 5)).astype(np.float32)
    got = layer.forward(x.astype(np.float64), False, None)
    want = conv3d_loop(x.astype(np.float64), layer.params["w"].astype(np.float64),
                       layer.params["b"].astype(np.float64), stride=2, pad=1)
    assert np.allclose(got, want, atol=1e-10)


def test_conv_transpose_is_adjoint(rng):
    conv = nnet.Conv3D(2, 3, kernel=2, stride=2)
    conv.init(rng)
    tconv = nnet.ConvTranspose3D(3, 2, kernel=2, stride=2)
    tconv.params["w"] = conv.params["w"].astype(np.float64)
    tconv.params["b"] = np.zeros(2)
    conv.params = {k: v.astype(np.float64) for k, v in conv.params.items()}
    conv.params["b"][:] = 0
    x = rng.normal(size=(1, 2, 4, 4, 4))
    y = rng.normal(size=(1, 3, 2, 2, 2))
    lhs = np.sum(conv.forward(x, False, None) * y)
    rhs = np.sum(x * tconv.forward(y, False, None))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_softmax_rows_sum_to_one(rng):
    y = nnet.Softmax().forward(rng.normal(size=(3, 5, 2, 2, 2)) * 50, False, None)
    assert np.allclose(y.sum(axis=1), 1.0)


def test_sample_gaussian_eval_returns_mu():
    layer = nnet.SampleGaussian(2)
    x = np.array([[1.0, 2.0, -3.0, 0.5]])
    assert np.array_equal(layer.forward(x, False, None), x[:, :2])
    with pytest.raises(ValidationError):
        layer.forward(x, True, None)


def test_sample_gaussian_statistics():
    mu = np.full(200_000, 1.5)
    ls = np.full(200_000, np.log(0.5))
    z = nnet.sample_gaussian(mu, ls, 0)
    assert z.mean() == pytest.approx(1.5, abs=0.01)
    assert z.std() == pytest.approx(0.5, abs=0.01)
    assert np.array_equal(z, nnet.sample_gaussian(mu, ls, 0))


def test_backward_before_forward():
    with pytest.raises(ValidationError):
        nnet.Network([nnet.Dense(2, 2)]).backward(np.zeros((1, 2)))
    with pytest.raises(ValidationError):
        nnet.Dense(2, 2).backward(np.zeros((1, 2)))


def test_adam_rejects_nonfinite_gradient():
    p = {"a": np.zeros(2)}
    with pytest.raises(NumericError):
        nnet.adam_step(p, {"a": np.array([np.nan, 0.0])}, nnet.AdamState())


def test_adam_minimises_quadratic():
    net = nnet.Network([nnet.Dense(1, 1)], seed=0)
    opt = nnet.Adam(net, lr=0.05)
    x = np.linspace(-1, 1, 16)[:, None].astype(np.float32)
    y = 3.0 * x - 1.0
    for _ in range(400):
        loss, g = nnet.mse_loss(net.forward(x, train=True), y)
        net.backward(g)
        opt.step()
    assert loss < 1e-4


def test_cross_entropy_gradient_matches_finite_difference(rng):
    logits = rng.normal(size=(4, 5))
    t = np.array([0, 3, 4, 1])
    _, g = nnet.softmax_cross_entropy(logits, t)
    eps = 1e-6
    for i, j in [(0, 0), (1, 3), (2, 2), (3, 4)]:
        lp, lm = logits.copy(), logits.copy()
        lp[i, j] += eps
        lm[i, j] -= eps
        num = (nnet.softmax_cross_entropy(lp, t)[0] - nnet.softmax_cross_entropy(lm, t)[0]) / (2 * eps)
        assert g[i, j] == pytest.approx(num, abs=1e-7)


def test_checkpoint_round_trip(tmp_path):
    net = nnet.Network([nnet.Conv3D(1, 2, kernel=3, pad=1), nnet.ReLU(), nnet.Flatten(),
                        nnet.Dense(2 * 8, 3)], seed=9)
    nnet.save_network(net, tmp_path / "n.bin")
    back = nnet.load_network(tmp_path / "n.bin")
    assert back.spec() == net.spec()
    for (a, pa), (b, pb) in zip(net.named_params(), back.named_params()):
        assert a == b and pa.tobytes() == pb.tobytes()
    x = np.random.default_rng(0).normal(size=(1, 1, 2, 2, 2)).astype(np.float32)
    assert np.array_equal(net(x), back(x))


def test_unknown_layer_kind():
    with pytest.raises(FormatError):
        nnet.network_from_spec([{"kind": "NOPE"}])
