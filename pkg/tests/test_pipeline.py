import numpy as np
import pytest
from conftest import tiny_config

from loopqlab.calibrate import OptConfig
from loopqlab.looplm import ConfigError, forward, init_model
from loopqlab.methods.cta import TransitionAdapterParams, cta_transition
from loopqlab.methods.las import enable_las
from loopqlab.pipeline import ArmConfig, DataConfig, evaluate_arm, make_data, quantize_arm
from loopqlab.quant import QuantizedLinear, QuantSpec, calibrate_static_scales, new_scheme

SPEC = QuantSpec(bits_w=4, bits_a=4, group_size=16)


def test_symmetric_arm_is_pure_rtn(tiny_model, tokens):
    res = quantize_arm(tiny_model, SPEC, ArmConfig(kind="symmetric"), tokens)
    assert res.calibration is None and res.adapters is None
    for g in res.scheme.groups.values():
        assert g.transform.mode == "identity" and g.act_scale.ndim == 1


def test_loopq_without_components_is_learned_affine(tiny_model, tokens):
    opt = OptConfig(steps=4, batch_size=3, seed=2)
    off = quantize_arm(tiny_model, SPEC, ArmConfig(las=False, slt=False, cta=False), tokens,
                       opt=opt, seed=2)
    la = quantize_arm(tiny_model, SPEC, ArmConfig(kind="learned_affine"), tokens, opt=opt, seed=2)
    assert off.adapters is None and off.selected == []
    for k, v in la.scheme.parameters().items():
        np.testing.assert_array_equal(off.scheme.parameters()[k], v)
    assert off.calibration.digest() == la.calibration.digest()


def test_component_attachment_order_is_irrelevant_before_calibration(tiny_model, tokens):
    shared = calibrate_static_scales(new_scheme(tiny_model, SPEC, "affine", seed=0), tiny_model,
                                     tokens)
    adapters = TransitionAdapterParams.init(3, 16, seed=0)
    run = lambda s, a: forward(tiny_model, tokens, linear=QuantizedLinear(s),
                               transition=cta_transition(a)).final.value
    las_then_cta = run(enable_las(shared), adapters)
    cta_then_las = run(enable_las(shared), TransitionAdapterParams.init(3, 16, seed=0))
    neither = run(shared, None)
    np.testing.assert_array_equal(las_then_cta, cta_then_las)
    np.testing.assert_array_equal(las_then_cta, neither)


def test_full_loopq_arm(tiny_model, tokens):
    arm = ArmConfig(slt_budget=2, slt_rounds=2, slt_recal_steps=1, slt_batches=2, cta_rank=2)
    res = quantize_arm(tiny_model, SPEC, arm, tokens, opt=OptConfig(steps=3, batch_size=3))
    assert len(res.selected) == 2 and len(res.sharing_gap) == 2
    for k, g in res.scheme.groups.items():
        assert g.untied == (k in res.selected) and g.act_scale.shape[0] == 3
    assert res.adapters is not None
    s = res.summary()
    assert 0 < s["loop_transform_fraction"] < 1 and s["selected"] == res.selected


def test_group_size_mismatch_is_config_error(tiny_model, tokens):
    with pytest.raises(ConfigError):
        quantize_arm(tiny_model, QuantSpec(group_size=6), ArmConfig(kind="symmetric"), tokens)


def test_bad_arm_config():
    with pytest.raises(ConfigError):
        ArmConfig(kind="gptq")
    with pytest.raises(ConfigError):
        ArmConfig(slt_rounds=0)


def test_loop_extrapolation_reuses_last_index(tokens):
    model = init_model(tiny_config(), 0)
    res = quantize_arm(model, SPEC, ArmConfig(slt=False), tokens,
                       opt=OptConfig(steps=2, batch_size=3))
    deep = evaluate_arm(model, res, tokens, T=5)
    assert deep.T == 5 and res.scheme.loop_index(4) == 2
    assert np.isfinite(deep.rel_err).all()
    same = evaluate_arm(model, res, tokens, T=3)
    np.testing.assert_allclose(deep.rel_err[:3], same.rel_err)


def test_data_splits_disjoint_and_seeded():
    cfg = tiny_config()
    dc = DataConfig(calib_samples=8, eval_samples=8, seq_len=8, pretrain_samples=8)
    a, b = make_data(cfg, dc, 0), make_data(cfg, dc, 0)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(a["calib"], a["eval"])
    assert not np.array_equal(a["calib"], make_data(cfg, dc, 1)["calib"])


def test_untie_gains_zero_without_training(tiny_model, tokens):
    from loopqlab.calibrate import CalibProblem
    from loopqlab.experiments import untie_gains
    scheme = calibrate_static_scales(new_scheme(tiny_model, SPEC, "affine"), tiny_model, tokens)
    gains = untie_gains(tiny_model, scheme, CalibProblem(tiny_model, tokens), steps=0, lr=1e-3)
    assert sorted(gains) == sorted(scheme.groups) and set(gains.values()) == {0.0}
    some = untie_gains(tiny_model, scheme, CalibProblem(tiny_model, tokens), steps=3, lr=1e-3)
    assert all(np.isfinite(v) for v in some.values())
