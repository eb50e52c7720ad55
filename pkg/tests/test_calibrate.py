import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopqlab.autodiff import ContractError, Node, NumericError
from loopqlab.calibrate import (CalibLossConfig, CalibProblem, CalibrationError, OptConfig,
                                Teacher, compute_mu, estimate_fisher, kl_divergence,
                                run_calibration, trajectory_loss)
from loopqlab.looplm import Trajectory, forward
from loopqlab.methods.cta import TransitionAdapterParams
from loopqlab.quant import QuantSpec, calibrate_static_scales, new_scheme

SPEC = QuantSpec(bits_w=4, bits_a=4, group_size=16)


def _traj(rows, logits):
    states = [[Node(np.array(h, float).reshape(1, 1, -1)) for h in row] for row in rows]
    return Trajectory(states, Node(np.array(logits, float).reshape(1, 1, -1)))


def _scheme(model, tokens, bits=4):
    spec = QuantSpec(bits_w=bits, bits_a=bits, group_size=16)
    return calibrate_static_scales(new_scheme(model, spec, "affine"), model, tokens)


# -- loss ----------------------------------------------------------------------------

def test_hand_evaluated_two_loop_loss():
    teacher = _traj([[[0, 0], [1, 0]], [[1, 0], [1, 2]]], [0.0, 0.0])
    teacher.states[1][0] = teacher.states[0][1]
    student = _traj([[[0, 0], [1, 1]], [[2, 1], [1, 1]]], [0.0, np.log(3.0)])
    terms = trajectory_loss(teacher, student, CalibLossConfig(lam=0.1), mu=np.array([0.5, 0.25]))
    kl = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
    assert terms.kl.item() == pytest.approx(kl, rel=1e-12)
    assert terms.hidden.item() == pytest.approx(0.5 * 0.5 + 0.75 * 0.5)
    assert terms.final.item() == pytest.approx(0.5 * 0.5 + 0.25 * 0.5)
    assert terms.transition.item() == pytest.approx(1.0)
    assert terms.total.item() == pytest.approx(kl + 0.1 * 2.0, rel=1e-12)


def test_sum_norm_variant_scales_by_width():
    teacher = _traj([[[0, 0], [1, 0]], [[1, 0], [1, 2]]], [0.0, 0.0])
    student = _traj([[[0, 0], [1, 1]], [[2, 1], [1, 1]]], [0.0, 0.0])
    mean = trajectory_loss(teacher, student, CalibLossConfig(), None)
    total = trajectory_loss(teacher, student, CalibLossConfig(norm="sum"), None)
    assert total.hidden.item() == pytest.approx(2 * mean.hidden.item())


def test_student_equal_to_teacher(tiny_model, tokens):
    traj = forward(tiny_model, tokens)
    fp = Teacher.from_trajectory(traj)
    mu = np.array([0.3, 0.6, 0.9])
    adapters = TransitionAdapterParams.init(3, 16)
    terms = trajectory_loss(fp, traj, CalibLossConfig(), mu, adapters)
    assert terms.kl.item() == pytest.approx(0.0, abs=1e-12)
    assert terms.transition.item() == 0.0
    expect = sum(mu[t] * np.mean((fp.hidden[t] - fp.final) ** 2) for t in range(3))
    assert terms.final.item() == pytest.approx(expect, rel=1e-12)
    assert terms.hidden.item() == 0.0
    zero = trajectory_loss(fp, traj, CalibLossConfig(), np.zeros(3), adapters)
    assert zero.total.item() == pytest.approx(0.0, abs=1e-12)


def test_identity_adapter_transition_term_is_raw_mismatch(tiny_model, tokens):
    problem = CalibProblem(tiny_model, tokens)
    q = problem.student(_scheme(tiny_model, tokens), None, slice(None))
    cfg = CalibLossConfig()
    plain = trajectory_loss(problem.teacher, q, cfg, None)
    adapted = trajectory_loss(problem.teacher, q, cfg, None, TransitionAdapterParams.init(3, 16))
    assert plain.transition.item() == adapted.transition.item()
    raw = sum(np.mean((q.states[t][-1].value - problem.teacher.loop_in[t + 1]) ** 2)
              for t in range(2))
    assert plain.transition.item() == pytest.approx(raw, rel=1e-12)


def test_shape_mismatch_rejected(tiny_model, tokens):
    traj = forward(tiny_model, tokens)
    with pytest.raises(ContractError):
        trajectory_loss(Teacher.from_trajectory(forward(tiny_model, tokens[:2])), traj,
                        CalibLossConfig())


def test_kl_zero_for_equal_logits_and_topk_noop(rng):
    z = rng.standard_normal((2, 3, 10))
    assert kl_divergence(z, Node(z)).item() == pytest.approx(0.0, abs=1e-14)
    zs = Node(rng.standard_normal((2, 3, 10)))
    assert kl_divergence(z, zs, topk=1000).item() == kl_divergence(z, zs).item()


def test_loss_config_validation():
    with pytest.raises(ValueError):
        CalibLossConfig(lam=-1)
    with pytest.raises(ValueError):
        CalibLossConfig(norm="max")


# -- adaptive weights ------------------------------------------------------------------

def _teacher(hidden):
    h = np.asarray(hidden, float).reshape(-1, 1, 1, 1)
    return Teacher(h, h, np.zeros((1, 1, 2)))


def test_mu_hand_evaluated():
    mu = compute_mu(_teacher([0, 1, 3]), np.array([1, 1, 5], float).reshape(3, 1, 1, 1), eps=0)
    # distances to final: 9, 4, 0; mismatch 1, 0, 4 with tails 5, 4, 4
    np.testing.assert_allclose(mu, [9 / 14, 4 / 8, 0.0])


def test_mu_near_one_for_perfect_student():
    h = np.array([0.0, 1.0, 3.0])
    mu = compute_mu(_teacher(h), h.reshape(3, 1, 1, 1))
    np.testing.assert_allclose(mu[:2], 1.0, atol=1e-8)
    assert mu[2] == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(1.0, 4.0))
def test_mu_in_unit_interval_and_monotone_in_mismatch(teach, stud, grow):
    fp = _teacher(teach)
    s = np.asarray(stud).reshape(3, 1, 1, 1)
    mu = compute_mu(fp, s)
    assert ((mu >= 0) & (mu < 1)).all()
    worse = np.asarray(teach).reshape(3, 1, 1, 1) + grow * (s - np.asarray(teach).reshape(3, 1, 1, 1))
    assert (compute_mu(fp, worse) <= mu + 1e-15).all()


# -- calibration loop --------------------------------------------------------------------

def test_zero_steps_returns_inputs_unchanged(tiny_model, tokens):
    scheme = _scheme(tiny_model, tokens)
    adapters = TransitionAdapterParams.init(3, 16, seed=0)
    out, ad_out, rep = run_calibration(tiny_model, scheme, adapters, tokens, opt=OptConfig(steps=0))
    for k, v in scheme.parameters().items():
        np.testing.assert_array_equal(out.parameters()[k], v)
    assert ad_out.is_identity()
    assert rep.initial == rep.final and rep.steps == []


def test_calibration_lowers_loss_and_logs_consistent_terms(tiny_model, tokens):
    scheme = _scheme(tiny_model, tokens)
    adapters = TransitionAdapterParams.init(3, 16, seed=0)
    before = {k: v.copy() for k, v in scheme.parameters().items()}
    out, _, rep = run_calibration(tiny_model, scheme, adapters, tokens,
                                  opt=OptConfig(steps=30, batch_size=6, seed=0))
    assert rep.final["total"] <= rep.initial["total"]
    for s in rep.steps:
        parts = s["kl"] + s["lam"] * (s["hidden"] + s["final"] + s["transition"])
        assert s["total"] == pytest.approx(parts, rel=1e-9, abs=1e-12)
        assert s["grad_norm"] >= 0
    # inputs untouched
    for k, v in scheme.parameters().items():
        np.testing.assert_array_equal(v, before[k])
    assert out.parameters()["0.qkv.c"].shape == before["0.qkv.c"].shape


def test_frozen_parameters_give_constant_loss(tiny_model, tokens):
    opt = OptConfig(steps=5, batch_size=len(tokens), train_scales=False, train_transforms=False,
                    train_adapters=False)
    _, _, rep = run_calibration(tiny_model, _scheme(tiny_model, tokens),
                                TransitionAdapterParams.init(3, 16), tokens, opt=opt)
    totals = [s["total"] for s in rep.steps]
    assert max(totals) == min(totals)


def test_calibration_is_deterministic(tiny_model, tokens):
    scheme = _scheme(tiny_model, tokens)
    opt = OptConfig(steps=8, batch_size=3, seed=7)
    a = run_calibration(tiny_model, scheme, TransitionAdapterParams.init(3, 16), tokens, opt=opt)
    b = run_calibration(tiny_model, scheme, TransitionAdapterParams.init(3, 16), tokens, opt=opt)
    assert a[2].digest() == b[2].digest()


def test_only_groups_restricts_training(tiny_model, tokens):
    scheme = _scheme(tiny_model, tokens)
    out, _, _ = run_calibration(tiny_model, scheme, None, tokens,
                                opt=OptConfig(steps=3, only_groups=["1.qkv"]))
    for k, v in scheme.parameters().items():
        same = np.array_equal(out.parameters()[k], v)
        assert same == (not k.startswith("1.qkv"))


class _Exploding(CalibProblem):
    calls = 0

    def loss(self, *a, **kw):
        if a[3] is not None:  # training step (nodes given)
            self.calls += 1
            if self.calls == 3:
                raise NumericError("nan")
        return super().loss(*a, **kw)


def test_non_finite_loss_aborts_with_last_finite_step(tiny_model, tokens):
    problem = _Exploding(tiny_model, tokens)
    with pytest.raises(CalibrationError, match=r"step 2.*'step': 1"):
        run_calibration(tiny_model, _scheme(tiny_model, tokens), None, problem,
                        opt=OptConfig(steps=5))


# -- Fisher ------------------------------------------------------------------------------

def test_fisher_zero_when_loss_is_constant(tiny_model, tokens):
    problem = CalibProblem(tiny_model, tokens)
    scheme = new_scheme(tiny_model, QuantSpec(bits_w=0, bits_a=0, group_size=16), "affine")
    psi = estimate_fisher(problem, scheme, None, [np.arange(6)], names=["0.qkv.P0"])
    assert np.abs(psi["0.qkv.P0"]).max() < 1e-20


def test_fisher_single_and_repeated_batches(tiny_model, tokens):
    problem = CalibProblem(tiny_model, tokens)
    scheme = _scheme(tiny_model, tokens)
    idx = np.arange(4)
    one = estimate_fisher(problem, scheme, None, [idx], names=["1.down.P0", "0.qkv.c"])
    leaf = Node(scheme.parameters()["1.down.P0"], requires_grad=True)
    problem.loss(scheme, None, idx, {"1.down.P0": leaf}).total.backward()
    np.testing.assert_allclose(one["1.down.P0"], leaf.grad ** 2, rtol=1e-12, atol=1e-30)
    two = estimate_fisher(problem, scheme, None, [idx, idx], names=["1.down.P0", "0.qkv.c"])
    for k in one:
        np.testing.assert_allclose(two[k], one[k], rtol=1e-12, atol=1e-30)
        assert (one[k] >= 0).all()
    with pytest.raises(ContractError):
        estimate_fisher(problem, scheme, None, [])
