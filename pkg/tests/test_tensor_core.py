import numpy as np
import pytest

from dlif.checks import run_all_checks
from dlif.tensor import (MissingProvenanceError, NonFiniteError, NonScalarLossError, PrimitiveKind, ShapeError,
                         Tensor, apply_primitive, backward, finite_diff_check, ops)
from dlif.tensor import dlif_io


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_relu_forward():
    assert ops.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_l2_normalize_345():
    np.testing.assert_allclose(ops.l2_normalize(Tensor([3.0, 4.0]), axis=0).data, [0.6, 0.8], atol=1e-15)


def test_conv_all_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_sum_square_grad():
    x = leaf([1.0, 2.0, 3.0])
    backward(ops.sum(ops.square(x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_mean_grad():
    x = leaf(np.arange(4.0))
    backward(ops.mean(x))
    assert x.grad.tolist() == [0.25] * 4


def test_backward_accumulates():
    x = leaf([1.0, -2.0])
    backward(ops.sum(x))
    backward(ops.sum(x))
    assert x.grad.tolist() == [2.0, 2.0]


def test_shared_subexpression_grad():
    x = leaf([2.0])
    y = ops.mul(x, x)
    backward(ops.sum(ops.add(y, y)))
    assert x.grad.tolist() == [8.0]


def test_detached_ancestors_untouched():
    a = leaf([1.0, 2.0])
    b = leaf([3.0, 4.0])
    mid = ops.mul(a, a)
    loss = ops.sum(ops.add(ops.mul(mid.detach(), b), b))
    backward(loss)
    assert a.grad is None
    assert b.grad.tolist() == [2.0, 5.0]


def test_non_scalar_loss_rejected():
    with pytest.raises(NonScalarLossError):
        backward(ops.square(leaf([1.0, 2.0])))


def test_missing_provenance():
    with pytest.raises(MissingProvenanceError):
        backward(Tensor([1.0]))


def test_shape_errors_name_kind():
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        ops.relu(Tensor([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        ops.log(Tensor([0.0, 1.0]))


def test_apply_primitive_by_name():
    out = apply_primitive("scale", [Tensor([1.0, 2.0])], {"factor": 3.0})
    assert out.data.tolist() == [3.0, 6.0]
    assert out.op_record.kind is PrimitiveKind.SCALE


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(5, 3, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    b = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_normalize_and_softmax_invariants():
    rng = np.random.default_rng(4)
    for _ in range(50):
        x = rng.normal(size=(5, 7)) * rng.uniform(1e-6, 1e3)
        n = ops.l2_normalize(Tensor(x), axis=1).data
        assert np.all(np.abs(np.linalg.norm(n, axis=1) - 1) < 1e-9)
        p = ops.softmax(Tensor(rng.normal(size=(4, 6)) * 5), axis=1).data
        assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)
        assert np.all((p > 0) & (p < 1))


def test_channel_std_biased_with_eps():
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
    ref = np.sqrt(x.var(axis=(2, 3)) + 1e-6)
    np.testing.assert_allclose(ops.channel_std(Tensor(x)).data, ref, atol=1e-14)


def test_relu_subgradient_zero_at_kink():
    x = leaf([0.0, 1.0])
    backward(ops.sum(ops.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_gradcheck_sigmoid_linear():
    rng = np.random.default_rng(6)
    w = leaf(rng.normal(size=(4, 4)))
    x = Tensor(rng.normal(size=(3, 4)))
    rep = finite_diff_check(lambda: ops.sum(ops.sigmoid(ops.linear(x, w))), [w], step=1e-4)
    assert rep.passed and rep.max_rel_error < 1e-5


def test_gradcheck_constant():
    p = leaf([1.0, 2.0])
    rep = finite_diff_check(lambda: ops.scale(ops.sum(p), 0.0), [p])
    assert rep.passed and rep.max_rel_error == 0.0


def test_gradcheck_flags_wrong_gradient():
    p = leaf([1.0, 2.0])
    # detaching one factor hides half the derivative from backprop
    rep = finite_diff_check(lambda: ops.sum(ops.mul(p, p.detach())), [p])
    assert not rep.passed and rep.failures
    assert rep.max_rel_error == pytest.approx(0.5, abs=1e-6)


def test_gradcheck_subsamples_large_params():
    p = leaf(np.random.default_rng(7).normal(size=1500))
    rep = finite_diff_check(lambda: ops.sum(ops.square(p)), [p], max_elements=1000)
    assert rep.params[0].n_checked == 1000 and rep.passed


def test_every_primitive_gradcheck():
    results = dict(run_all_checks(seed=11, include="primitives"))
    assert set(results) == {k.value for k in PrimitiveKind}
    for name, rep in results.items():
        assert rep.passed, (name, rep.max_rel_error)


def test_dlif_roundtrip(tmp_path):
    a = np.random.default_rng(8).normal(size=(2, 3, 4)).astype(np.float32).astype(np.float64)
    dlif_io.save(tmp_path / "a.dlif", a)
    blob = (tmp_path / "a.dlif").read_bytes()
    assert blob[:5] == b"DLIF1" and blob[5] == 3
    assert int.from_bytes(blob[6:10], "little") == 2
    assert len(blob) == 5 + 1 + 12 + 4 * 24
    np.testing.assert_array_equal(dlif_io.load(tmp_path / "a.dlif"), a)


def test_dlif_bad_magic():
    with pytest.raises(dlif_io.FormatError):
        dlif_io.decode(b"XXXX1\x00" + b"\x00" * 4)
