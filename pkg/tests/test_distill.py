import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hefriendly import KDParams, TeacherHandle, kd_loss, soft_targets
from hefriendly.autodiff import Tape, Tensor, backward, ops, using_tape
from hefriendly.autodiff.gradcheck import finite_difference_check
from hefriendly.errors import ContractError, DataError, DimensionError
from hefriendly.graph import ModelGraph

logit_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 6)), elements=st.floats(-50, 50))


def entropy(p):
    return -float(np.sum(p * np.log(p)))


class TestSoftTargets:
    def test_standard_softmax(self):
        np.testing.assert_allclose(soft_targets([[2.0, 0.0]], 1.0).data, [[0.8808, 0.1192]], atol=1e-4)

    @pytest.mark.parametrize("tau", [0.5, 1.0, 10.0])
    def test_equal_logits_uniform(self, tau):
        np.testing.assert_allclose(soft_targets([[4.0, 4.0, 4.0]], tau).data, [[1 / 3] * 3], atol=1e-15)

    def test_large_temperature_uniform(self):
        np.testing.assert_allclose(soft_targets([[5.0, -5.0]], 1e6).data, [[0.5, 0.5]], atol=1e-5)

    @given(logit_rows, st.floats(0.1, 100))
    def test_rows_sum_to_one(self, z, tau):
        np.testing.assert_allclose(soft_targets(z, tau).data.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    @given(logit_rows, st.floats(0.1, 100), st.floats(-1e3, 1e3))
    def test_shift_invariant(self, z, tau, c):
        np.testing.assert_allclose(soft_targets(z + c, tau).data, soft_targets(z, tau).data, rtol=0, atol=1e-12)

    def test_stable_for_huge_logits(self):
        assert np.isfinite(soft_targets([[1e4, -1e4]], 1.0).data).all()

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(ContractError):
            soft_targets([[1.0, 2.0]], tau)


class TestKDLoss:
    def test_alpha_zero_is_plain_ce(self):
        rng = np.random.default_rng(0)
        z, t = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        y = rng.integers(0, 3, 5)
        got = kd_loss(Tensor(z), t, y, KDParams(10, 0.0)).item()
        assert got == ops.cross_entropy(Tensor(z), y).item()

    def test_entropy_example(self):
        z = np.array([[2.0, 0.0]])
        q = np.exp(z) / np.exp(z).sum()
        got = kd_loss(Tensor(z), z, [0], KDParams(1.0, 1.0)).item()
        assert got == pytest.approx(entropy(q), abs=1e-12)
        # -(0.8808 ln 0.8808 + 0.1192 ln 0.1192)
        assert got == pytest.approx(0.36533, abs=1e-5)

    def test_kd_multiplier(self):
        rng = np.random.default_rng(1)
        z, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        y = rng.integers(0, 3, 4)
        qt = soft_targets(t, 10).data
        log_qs = np.log(soft_targets(z, 10).data)
        ce_soft = -np.sum(qt * log_qs) / 4
        ce_hard = ops.cross_entropy(Tensor(z), y).item()
        got = kd_loss(Tensor(z), t, y, KDParams(10, 0.1)).item()
        assert got == pytest.approx(10 * ce_soft + 0.9 * ce_hard, rel=1e-12)

    @given(arrays(np.float64, (3, 4), elements=st.floats(-20, 20)),
           arrays(np.float64, (3, 4), elements=st.floats(-20, 20)),
           st.floats(0.5, 20), st.floats(0, 1))
    def test_non_negative(self, z, t, tau, alpha):
        assert kd_loss(Tensor(z), t, [0, 1, 3], KDParams(tau, alpha)).item() >= 0

    def test_no_gradient_to_teacher(self):
        rng = np.random.default_rng(2)
        z = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        t = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        with using_tape(Tape()):
            backward(kd_loss(z, t, [0, 1, 2], KDParams()))
        assert t.grad is None
        assert z.grad is not None

    def test_student_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        z = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="z")
        t = rng.normal(size=(4, 3))
        report = finite_difference_check(lambda: kd_loss(z, t, [0, 2, 1, 1], KDParams(10, 0.1)), [z])
        assert report.passed

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            kd_loss(Tensor(np.zeros((1, 2))), np.zeros((1, 2)), [2], KDParams())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            kd_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)), [0, 1], KDParams())

    @pytest.mark.parametrize("tau,alpha", [(0, 0.1), (1, -0.1), (1, 1.1)])
    def test_bad_params(self, tau, alpha):
        with pytest.raises(ContractError):
            KDParams(tau, alpha)


class TestTeacher:
    def _graph(self):
        cfg = {"input_shape": [3], "layers": [{"type": "dense", "out_features": 4, "activation": "relu"},
                                              {"type": "batch_norm"}, {"type": "dense", "out_features": 2}]}
        return ModelGraph.from_config(cfg, np.random.default_rng(0)).with_mode("train")

    def test_frozen_eval_copy(self):
        g = self._graph()
        teacher = TeacherHandle(g)
        assert teacher.graph.mode == "eval"
        assert not any(p.requires_grad for p in teacher.parameters())
        assert all(p.requires_grad for p in g.parameters())

    def test_logits_record_nothing_and_leave_params(self):
        teacher = TeacherHandle(self._graph())
        before = [p.data.copy() for p in teacher.parameters()]
        tape = Tape()
        with using_tape(tape):
            teacher.logits(Tensor(np.ones((2, 3))))
        assert len(tape) == 0
        for b, p in zip(before, teacher.parameters()):
            np.testing.assert_array_equal(b, p.data)
