import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from loopqlab import autodiff as ad
from loopqlab.autodiff import ContractError, Node
from loopqlab.calibrate import CalibProblem
from loopqlab.looplm import forward, init_model
from loopqlab.methods.baselines import BaselineKind, apply_baseline, smooth_factors
from loopqlab.methods.cta import TransitionAdapterParams, apply_cta, cta_transition
from loopqlab.methods.las import enable_las, las_added_parameters
from loopqlab.methods.slt import (SharingGapReport, select_loop_dependent,
                                  sharing_gap_from_gradients, sharing_gap_scores,
                                  transform_fraction, untie)
from loopqlab.quant import (QuantizedLinear, QuantSpec, collect_activation_stats, new_scheme,
                            quantize_act, scales_from_stats)

SPEC = QuantSpec(bits_w=4, bits_a=4, group_size=16)


def quantized_run(model, scheme, tokens, adapters=None):
    return forward(model, tokens, linear=QuantizedLinear(scheme),
                   transition=cta_transition(adapters))


def static_scheme(model, tokens, mode="affine"):
    s = new_scheme(model, SPEC, mode)
    return scales_from_stats(s, collect_activation_stats(model, s, tokens))


def assert_same_trajectory(a, b):
    for ra, rb in zip(a.states, b.states):
        for x, y in zip(ra, rb):
            np.testing.assert_array_equal(x.value, y.value)
    np.testing.assert_array_equal(a.logits.value, b.logits.value)


# -- CTA ---------------------------------------------------------------------------

def test_cta_identity_at_init(rng):
    p = TransitionAdapterParams.init(T=4, d=16, rank=8, seed=0)
    assert p.is_identity()
    h = rng.standard_normal((3, 16))
    for t in range(3):
        np.testing.assert_array_equal(apply_cta(p, h, t).value, h)


def test_cta_at_init_leaves_trajectory_bit_identical(tiny_model, tokens):
    scheme = static_scheme(tiny_model, tokens)
    adapters = TransitionAdapterParams.init(3, 16, seed=1)
    assert_same_trajectory(quantized_run(tiny_model, scheme, tokens),
                           quantized_run(tiny_model, scheme, tokens, adapters))


def test_cta_pure_shift(rng):
    p = TransitionAdapterParams.init(T=3, d=4, rank=2)
    p.b[1] = 0.25
    h = rng.standard_normal((2, 4))
    np.testing.assert_array_equal(apply_cta(p, h, 1).value, h + 0.25)
    np.testing.assert_array_equal(apply_cta(p, h, 0).value, h)


def test_cta_hand_evaluated_low_rank_path():
    h = np.array([[1.0, -1.0, 2.0, 0.0]])
    U = np.array([[1.0], [0.0], [2.0], [0.0]])
    V = np.array([[0.5], [0.5], [0.0], [1.0]])
    a = np.array([[2.0, 1.0, 1.0, 1.0]])
    p = TransitionAdapterParams(a, np.zeros((1, 4)), np.array([[3.0]]), U, V, eps=1e-6)
    rms = np.sqrt((1 + 1 + 4 + 0) / 4 + 1e-6)
    n = h / rms
    # (a - 1) * n adds n[0] to feature 0; low rank: (n @ V) * 3 = 0 * 3 -> 0 for this V
    expect = h + np.array([[n[0, 0], 0, 0, 0]]) + ((n @ V) * 3.0) @ U.T
    np.testing.assert_allclose(apply_cta(p, h, 0).value, expect, rtol=1e-14)
    V2 = np.array([[1.0], [0.0], [0.0], [0.0]])
    p.V = V2
    expect2 = h + np.array([[n[0, 0], 0, 0, 0]]) + 3.0 * n[0, 0] * U.T
    np.testing.assert_allclose(apply_cta(p, h, 0).value, expect2, rtol=1e-14)


def test_cta_no_transition_after_last_loop(rng):
    p = TransitionAdapterParams.init(T=3, d=4)
    with pytest.raises(ContractError):
        apply_cta(p, rng.standard_normal((1, 4)), 2)
    p.extrapolate = True
    assert apply_cta(p, rng.standard_normal((1, 4)), 5).shape == (1, 4)


def test_cta_gradients_finite_difference(rng):
    p = TransitionAdapterParams.init(T=3, d=6, rank=2, seed=2, uv_std=0.3)
    p.eta[:] = rng.standard_normal(p.eta.shape)
    h = rng.standard_normal((2, 6))
    R = rng.standard_normal((2, 6))
    for name in ("a", "b", "eta", "U", "V"):
        base = getattr(p, name).copy()

        def f(v, name=name):
            q = p.copy()
            setattr(q, name, v)
            return float(np.sum(apply_cta(q, h, 1).value * R))
        node = Node(base, requires_grad=True)
        ad.sum(apply_cta(p, h, 1, {"cta." + name: node}) * R).backward()
        fd = ad.finite_difference(f, base)
        assert np.linalg.norm(node.grad - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


# -- LAS ---------------------------------------------------------------------------

def test_las_with_loop_constant_stats_reproduces_shared(tiny_model, tokens):
    scheme = new_scheme(tiny_model, SPEC)
    stats = collect_activation_stats(tiny_model, scheme, tokens)
    const = {k: np.tile(v.max(axis=0), (3, 1)) for k, v in stats.items()}
    shared = scales_from_stats(scheme, const)
    las = enable_las(shared, const)
    for k, g in las.groups.items():
        assert g.las and g.act_scale.shape == (3, g.d_in // 16)
        for t in range(3):
            np.testing.assert_array_equal(g.act_scale[t], shared.groups[k].act_scale)
    assert_same_trajectory(quantized_run(tiny_model, shared, tokens),
                           quantized_run(tiny_model, las, tokens))


def test_las_tiling_is_bit_neutral(tiny_model, tokens):
    shared = static_scheme(tiny_model, tokens)
    assert_same_trajectory(quantized_run(tiny_model, shared, tokens),
                           quantized_run(tiny_model, enable_las(shared), tokens))


def test_las_scale_ratios_follow_loop_magnitudes():
    # loop-t magnitude 2^t -> per-loop scale ratios 2^t
    model = init_model(tiny_config(mode="linear", T=4), seed=0)
    for layer in range(2):
        model.weights[f"{layer}.linear"] = 2 ** 0.5 * np.eye(16)
    toks = np.arange(8).reshape(1, 8)
    scheme = new_scheme(model, SPEC)
    stats = collect_activation_stats(model, scheme, toks)
    las = enable_las(scheme, stats)
    c = las.groups["0.linear"].act_scale[:, 0]
    np.testing.assert_allclose(c / c[0], 2.0 ** np.arange(4), rtol=1e-12)


def test_las_parameter_count_is_order_TL(tiny_model, tokens):
    shared = static_scheme(tiny_model, tokens)
    las = enable_las(shared)
    G = sum(g.act_scale.size for g in shared.groups.values())
    assert las_added_parameters(shared, las) == (3 - 1) * G


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.2, 5.0), min_size=2, max_size=4),
       st.integers(0, 2 ** 16))
def test_las_never_worse_per_loop(mags, seed):
    # per-loop abs-max init vs shared max-over-loops init on drifting inputs
    rng = np.random.default_rng(seed)
    spec = QuantSpec(bits_a=4, group_size=8)
    xs = [m * rng.standard_normal((64, 8)) for m in mags]
    per = [np.abs(x).max() / 7 for x in xs]
    shared = max(per)
    for x, c in zip(xs, per):
        mse_las = np.mean((quantize_act(x, np.array(c), spec).value - x) ** 2)
        mse_sh = np.mean((quantize_act(x, np.array(shared), spec).value - x) ** 2)
        # abs-max scales never clip, so the finer grid cannot lose by more than rounding luck
        assert mse_las <= mse_sh * 1.0 + c * c / 12 * 0.5


# -- SLT ---------------------------------------------------------------------------

def test_sharing_gap_formula_hand_case():
    phi = np.array([[1.0, 0.0], [3.0, 0.0]])
    psi = np.array([4.0, 1.0])
    # Var_t over column 0 = 1, column 1 = 0
    assert sharing_gap_from_gradients(phi, psi, eps=0.0) == pytest.approx(0.25)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (1, 6), elements=st.floats(-3, 3)), st.integers(1, 5))
def test_sharing_gap_zero_for_identical_loops(row, T):
    phi = np.repeat(row, T, axis=0)
    assert sharing_gap_from_gradients(phi, np.ones(6)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-3, 3)),
       hnp.arrays(np.float64, (5,), elements=st.floats(0, 3)))
def test_sharing_gap_nonnegative_and_matches_numpy_variance(phi, psi):
    s = sharing_gap_from_gradients(phi, psi, 1e-8)
    assert s >= 0
    assert s == pytest.approx(np.sum(phi.var(axis=0) / (psi + 1e-8)), rel=1e-9, abs=1e-9)


def test_tied_copy_gradients_sum_to_shared_gradient(tiny_model, tokens):
    problem = CalibProblem(tiny_model, tokens)
    scheme = static_scheme(tiny_model, tokens)
    idx = np.arange(len(tokens))
    rep = sharing_gap_scores(problem, scheme, None, [idx])
    leaf = Node(scheme.groups["1.down"].transform.factors[0], requires_grad=True)
    problem.loss(scheme, None, idx, {"1.down.P0": leaf}).total.backward()
    np.testing.assert_allclose(rep.phi["1.down"].sum(axis=0), leaf.grad.ravel(), rtol=1e-9,
                               atol=1e-15)
    # single batch: psi is the squared total gradient
    np.testing.assert_allclose(rep.psi["1.down"], leaf.grad.ravel() ** 2, rtol=1e-9, atol=1e-30)


def test_sharing_gap_zero_for_single_loop(tokens):
    model = init_model(tiny_config(T=1), seed=0)
    problem = CalibProblem(model, tokens)
    rep = sharing_gap_scores(problem, static_scheme(model, tokens), None, [np.arange(6)])
    assert all(v == 0.0 for v in rep.scores.values())


def test_sharing_gap_invariant_to_batch_order(tiny_model, tokens):
    problem = CalibProblem(tiny_model, tokens)
    scheme = static_scheme(tiny_model, tokens)
    b = [np.array([0, 1, 2]), np.array([3, 4, 5])]
    r1 = sharing_gap_scores(problem, scheme, None, b)
    r2 = sharing_gap_scores(problem, scheme, None, b[::-1])
    for k in r1.scores:
        assert r1.scores[k] == pytest.approx(r2.scores[k], rel=1e-9)


def test_sharing_gap_needs_batches(tiny_model, tokens):
    with pytest.raises(ContractError):
        sharing_gap_scores(CalibProblem(tiny_model, tokens), static_scheme(tiny_model, tokens),
                           None, [])


def test_untie_is_bit_neutral_and_preserves_las(tiny_model, tokens):
    scheme = enable_las(static_scheme(tiny_model, tokens))
    scheme.groups["0.qkv"].act_scale[1] *= 1.5  # loop-dependent scales must survive untying
    un = untie(scheme, list(scheme.groups))
    assert all(g.untied for g in un.groups.values())
    np.testing.assert_array_equal(un.groups["0.qkv"].act_scale, scheme.groups["0.qkv"].act_scale)
    assert_same_trajectory(quantized_run(tiny_model, scheme, tokens),
                           quantized_run(tiny_model, un, tokens))


def test_untie_shared_scales_become_tiled(tiny_model, tokens):
    scheme = static_scheme(tiny_model, tokens)
    un = untie(scheme, ["1.o_proj"])
    assert un.groups["1.o_proj"].act_scale.shape == (3, 1)
    assert not un.groups["0.o_proj"].untied
    assert_same_trajectory(quantized_run(tiny_model, scheme, tokens),
                           quantized_run(tiny_model, un, tokens))


def _report(scores):
    return SharingGapReport(scores, {}, {})


def test_selection_ranking_and_ties():
    rep = _report({"1.qkv": 2.0, "0.up_gate": 2.0, "0.down": 2.0, "1.down": 5.0, "0.qkv": 0.1})
    assert rep.ranking() == ["1.down", "0.down", "0.up_gate", "1.qkv", "0.qkv"]
    assert select_loop_dependent(rep, 0) == []
    assert select_loop_dependent(rep, 2) == ["1.down", "0.down"]
    assert sorted(select_loop_dependent(rep, 5)) == sorted(rep.scores)
    with pytest.raises(ContractError):
        select_loop_dependent(rep, 6)


def test_progressive_selection_rescores_between_rounds():
    first = _report({"0.qkv": 3.0, "0.down": 2.0, "1.qkv": 1.0})
    second = _report({"0.qkv": 3.0, "0.down": 0.0, "1.qkv": 9.0})
    seen = []

    def rescore(chosen):
        seen.append(list(chosen))
        return second
    assert select_loop_dependent(first, 2, rounds=2, rescore=rescore) == ["0.qkv", "1.qkv"]
    assert seen == [["0.qkv"]]


def test_transform_fraction(tiny_model, tokens):
    scheme = static_scheme(tiny_model, tokens)
    assert transform_fraction(scheme) == 0.0
    un = untie(scheme, ["0.qkv"])
    per = 16 * 16
    total_shared = 6 * per + 2 * 32 * 32
    assert transform_fraction(un) == pytest.approx(3 * per / (total_shared + 3 * per))


# -- baselines -----------------------------------------------------------------------

def test_smooth_factors_hand_case():
    np.testing.assert_allclose(smooth_factors([4.0, 1.0], [1.0, 1.0], 0.5), [2.0, 1.0])


def test_rotation_baseline_preserves_function_without_quantization(tiny_model, tokens):
    spec = QuantSpec(bits_w=0, bits_a=0, group_size=16)
    scheme = apply_baseline("rotation", tiny_model, spec, tokens, seed=4)
    fp = forward(tiny_model, tokens).final.value
    q = forward(tiny_model, tokens, linear=QuantizedLinear(scheme)).final.value
    assert np.linalg.norm(q - fp) / np.linalg.norm(fp) < 1e-10


def test_symmetric_baseline_on_zero_model_is_zero(tokens):
    model = init_model(tiny_config(mode="linear"), seed=0)
    for k in ("0.linear", "1.linear"):
        model.weights[k][:] = 0.0
    scheme = apply_baseline(BaselineKind.symmetric, model, SPEC, tokens)
    out = forward(model, tokens, linear=QuantizedLinear(scheme)).final.value
    assert not out.any()


def test_smooth_baseline_uses_diagonal_transform(tiny_model, tokens):
    scheme = apply_baseline("smooth_scale", tiny_model, SPEC, tokens)
    for g in scheme.groups.values():
        P = g.transform.matrix()
        np.testing.assert_array_equal(P, np.diag(np.diag(P)))
        assert (np.diag(P) > 0).all()


def test_learned_affine_has_no_loop_dependent_parameters(tiny_model, tokens):
    calls = []

    def cal(s):
        calls.append(s)
        return s
    scheme = apply_baseline("learned_affine", tiny_model, SPEC, tokens, calibration=cal)
    assert len(calls) == 1
    c = scheme.count_parameters()
    assert c["loop_transform"] == 0 and c["loop_scale"] == 0
    assert all(g.transform.mode == "affine" for g in scheme.groups.values())
