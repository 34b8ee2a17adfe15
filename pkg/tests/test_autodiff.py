import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factoradapt import autodiff as ad
from factoradapt.selfcheck import primitive_cases


@pytest.mark.parametrize("case", primitive_cases(), ids=lambda c: c[0])
def test_primitive_gradients_match_central_differences(case):
    _, fn, params = case
    assert ad.finite_difference_check(fn, params) <= 1e-6


def test_linear_chain_gradient():
    w = ad.Parameter("w", [[1.0, 2.0], [3.0, 4.0]])
    x = np.array([[1.0, -1.0]])
    with ad.Tape():
        y = ad.tsum(ad.matmul(x, w.t))
    g = ad.backward(y)
    np.testing.assert_array_equal(g["w"], [[1.0, 1.0], [-1.0, -1.0]])
    np.testing.assert_array_equal(w.grad, g["w"])


def test_gradients_accumulate_until_zeroed():
    p = ad.Parameter("p", [2.0])
    for _ in range(2):
        with ad.Tape():
            loss = ad.tsum(ad.square(p.t))
        ad.backward(loss)
    assert p.grad[0] == pytest.approx(8.0)
    p.zero_grad()
    assert p.grad[0] == 0.0


def test_parameter_read_twice_shares_one_leaf():
    p = ad.Parameter("p", [3.0])
    with ad.Tape():
        loss = ad.tsum(ad.mul(p.t, p.t))
    assert ad.backward(loss)["p"][0] == pytest.approx(6.0)


def test_unreachable_parameter_gets_zero_gradient():
    used = ad.Parameter("used", [1.0, 2.0])
    idle = ad.Parameter("idle", [5.0, 5.0, 5.0])
    with ad.Tape():
        loss = ad.tsum(used.t)
    g = ad.backward(loss, [used, idle])
    np.testing.assert_array_equal(g["idle"], np.zeros(3))


def test_frozen_parameter_receives_nothing():
    p = ad.Parameter("p", [1.0], trainable=False)
    with ad.Tape():
        loss = ad.tsum(ad.mul(p.t, 3.0))
    g = ad.backward(loss, [p])
    assert "p" not in g
    assert p.grad[0] == 0.0


def test_second_backward_on_same_tape_is_an_error():
    p = ad.Parameter("p", [1.0])
    with ad.Tape():
        loss = ad.tsum(p.t)
    ad.backward(loss)
    with pytest.raises(ad.TapeError):
        ad.backward(loss)


def test_non_scalar_loss_is_rejected():
    p = ad.Parameter("p", [1.0, 2.0])
    with ad.Tape():
        y = ad.mul(p.t, 2.0)
    with pytest.raises(ad.TapeError):
        ad.backward(y)


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(np.array([0.0, 1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(np.array([1e4]))


def test_no_grad_records_nothing():
    p = ad.Parameter("p", [1.0])
    with ad.Tape() as tape:
        with ad.no_grad():
            ad.mul(p.t, 2.0)
    assert tape.nodes == []


def test_dropout_is_identity_outside_training():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ad.dropout(x, 0.5, None, training=False).data, x)
    with pytest.raises(ValueError):
        ad.dropout(x, 0.5, None, training=True)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 7, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(x, w, None, stride=2).data
    ref = np.zeros((1, 3, 3, 2))
    for o in range(3):
        for i in range(3):
            for j in range(2):
                ref[0, o, i, j] = np.sum(x[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_finite_difference_check_rejects_nondeterministic_losses():
    p = ad.Parameter("p", [1.0])
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError):
        ad.finite_difference_check(lambda: ad.tsum(ad.mul(p.t, rng.random())), [p])


def test_finite_difference_check_detects_a_wrong_gradient():
    p = ad.Parameter("p", [0.7, -0.2])

    def broken():
        # forward is x^2, recorded backward pretends it is 3x^2
        x = p.t
        out = ad._make("bad", x.data**2, (x,), lambda g: ad._accum(x, g * 3 * x.data**2))
        return ad.tsum(out)

    assert ad.finite_difference_check(broken, [p]) > 0.1


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = [ad.Parameter("a.w", rng.standard_normal((3, 2))), ad.Parameter("b", rng.standard_normal(4), trainable=False)]
    path = tmp_path / "x.ckpt"
    ad.save_parameters(path, params)
    back = ad.load_parameters(path)
    for p in params:
        assert back[p.name].data.tobytes() == p.data.tobytes()
        assert back[p.name].trainable == p.trainable


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValueError):
        ad.load_parameters(path)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    s = ad.softmax(x).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(ad.log_softmax(x).data), s, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_layer_norm_output_is_standardised(seed):
    x = np.random.default_rng(seed).standard_normal((3, 6)) * 4 + 2
    y = ad.layer_norm(x, np.ones(6), np.zeros(6)).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)
