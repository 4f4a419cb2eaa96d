import dataclasses

import numpy as np
import pytest

from advad.engine import (AttackConfig, MODE_ADVADX, NonFiniteStateError,
                          advad_attack, advadx_attack, backward_step,
                          effect_of_t_sweep, forward_noise, load_deep_trace,
                          read_step_records, run_attack, save_deep_trace,
                          write_step_records)
from advad.data import Dataset
from advad.guidance import StepRangeError
from advad.imagecore import ImageTensor, ValueRange
from advad.model import BuiltinCnn, Mask, NoCamSupportError
from advad.schedule import Schedule, make_schedule

from conftest import (ConstantClassifier, LinearClassifier,
                      NanGradientClassifier)


def unit_img(a):
    return ImageTensor(np.asarray(a, dtype=np.float64), ValueRange.UNIT)


# ---------------------------------------------------------------------------
# elementary ops

def test_forward_noise_zero_noise():
    s = make_schedule(10)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (3, 3, 2))
    out = forward_noise(unit_img(x), np.zeros((3, 3, 2)), s)
    np.testing.assert_allclose(out.data, np.sqrt(s.alpha[10]) * x, atol=1e-15)


def test_forward_noise_alpha_one_is_identity():
    # hand-built degenerate schedule with alpha_T = 1
    s = Schedule(T=1, beta_min=0.5, beta_max=0.5, alpha=np.array([1.0, 1.0]))
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (2, 2, 1))
    out = forward_noise(unit_img(x), rng.standard_normal((2, 2, 1)), s)
    np.testing.assert_array_equal(out.data, x)


def test_forward_noise_matches_scalar_oracle():
    s = make_schedule(37)
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (4, 2, 3))
    eps = rng.standard_normal((4, 2, 3))
    out = forward_noise(unit_img(x), eps, s).data
    a = s.alpha[37]
    for idx in np.ndindex(x.shape):
        want = np.sqrt(a) * x[idx] + np.sqrt(1 - a) * eps[idx]
        assert abs(out[idx] - want) <= 1e-15


def test_backward_step_consistent_with_fixed_trajectory():
    s = make_schedule(64)
    rng = np.random.default_rng(3)
    x_ori = rng.uniform(-1, 1, (3, 3, 3))
    eps0 = rng.standard_normal((3, 3, 3))
    for t in (64, 30, 1):
        a_t, a_prev = s.alpha[t], s.alpha[t - 1]
        x_bar_t = np.sqrt(a_t) * x_ori + np.sqrt(1 - a_t) * eps0
        got = backward_step(unit_img(x_bar_t), eps0, s, t).data
        want = np.sqrt(a_prev) * x_ori + np.sqrt(1 - a_prev) * eps0
        assert np.abs(got - want).max() <= 1e-12


def test_backward_step_matches_scalar_oracle():
    s = make_schedule(20)
    rng = np.random.default_rng(4)
    x = rng.uniform(-2, 2, (2, 3, 1))
    eps = rng.standard_normal((2, 3, 1))
    t = 11
    got = backward_step(unit_img(x), eps, s, t).data
    a_t, a_prev = s.alpha[t], s.alpha[t - 1]
    for idx in np.ndindex(x.shape):
        x0 = (x[idx] - np.sqrt(1 - a_t) * eps[idx]) / np.sqrt(a_t)
        want = np.sqrt(a_prev) * x0 + np.sqrt(1 - a_prev) * eps[idx]
        assert abs(got[idx] - want) <= 1e-15


def test_backward_step_range_check():
    s = make_schedule(5)
    with pytest.raises(StepRangeError):
        backward_step(unit_img(np.zeros((2, 2, 1))), np.zeros((2, 2, 1)), s, 6)


def test_identity_loop_literal_composition_f64():
    """T=1000 of literal backward steps with the fixed noise returns to the
    original within 1e-9 in unit range (64-bit)."""
    s = make_schedule(1000)
    rng = np.random.default_rng(5)
    x_ori = rng.uniform(-1, 1, (4, 4, 3))
    eps0 = rng.standard_normal((4, 4, 3))
    x = forward_noise(unit_img(x_ori), eps0, s)
    for t in range(1000, 0, -1):
        x = backward_step(x, eps0, s, t)
    assert np.abs(x.data - x_ori).max() <= 1e-9


# ---------------------------------------------------------------------------
# attack loop

def _sample(trained_model, test_samples, i=0):
    return test_samples[i]


def test_guidance_disabled_identity_f64(trained_model, test_samples):
    img, label = test_samples[0]
    cfg = AttackConfig(T=200)
    res = advad_attack(trained_model, img, label, cfg, image_index=0,
                       force_disable_guidance=True)
    # endpoint-prediction recursion with zero guidance is drift-free
    assert np.abs(res.x_adv_raw.data - img.data).max() <= 1e-4
    assert res.guided_steps == 0
    assert res.success_raw == (not res.clean_correct)


def test_guidance_disabled_identity_f32_T1000(trained_model, test_samples):
    img, label = test_samples[1]
    cfg = AttackConfig(T=1000, precision="f32")
    res = advad_attack(trained_model, img, label, cfg, image_index=1,
                       force_disable_guidance=True)
    assert np.abs(res.x_adv_raw.data.astype(np.float64)
                  - img.data).max() <= 1e-4     # byte units


def test_attack_deterministic(trained_model, test_samples):
    img, label = test_samples[2]
    cfg = AttackConfig(T=60, trace=True)
    a = advad_attack(trained_model, img, label, cfg, image_index=2)
    b = advad_attack(trained_model, img, label, cfg, image_index=2)
    assert np.array_equal(a.x_adv_raw.data, b.x_adv_raw.data)
    assert a.success_raw == b.success_raw
    assert [r.p_f for r in a.trace.steps] == [r.p_f for r in b.trace.steps]


def test_attack_budget_invariant_f64(trained_model, test_samples):
    cfg = AttackConfig(T=300)
    for i in (3, 4, 5):
        img, label = test_samples[i]
        res = advad_attack(trained_model, img, label, cfg, image_index=i)
        linf = np.abs(res.x_adv_raw.data - img.data).max()
        assert linf <= 255 * cfg.xi * (1 + 1e-6)
        # quantization adds at most half a level
        linf_q = np.abs(res.x_adv_quantized.data - img.data).max()
        assert linf_q <= 255 * cfg.xi + 0.5 + 1e-9


def test_advadx_skips_when_already_fooled():
    clf = ConstantClassifier([0.0, 1.0])   # always predicts class 1
    rng = np.random.default_rng(6)
    img = ImageTensor(np.round(rng.uniform(0, 255, (8, 8, 3))), ValueRange.BYTE)
    cfg = AttackConfig(T=50, mode=MODE_ADVADX)
    res = advadx_attack(clf, img, 0, cfg, image_index=0)
    assert res.guided_steps == 0
    assert not res.clean_correct
    # identity trajectory up to the byte<->unit affine round trip
    assert np.abs(res.x_adv_raw.data - img.data).max() <= 1e-9


class OnesCam(BuiltinCnn):
    def cam_mask(self, img, label):
        return Mask(np.ones((img.height, img.width)))


def test_cam_mask_of_ones_matches_no_cam(trained_model, test_samples):
    ones_model = OnesCam(trained_model.num_classes,
                         trained_model.in_channels, seed=0)
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        setattr(ones_model, name, getattr(trained_model, name).copy())
    img, label = test_samples[6]
    with_cam = advadx_attack(ones_model, img, label,
                             AttackConfig(T=80, mode=MODE_ADVADX, use_cam=True),
                             image_index=6)
    without = advadx_attack(ones_model, img, label,
                            AttackConfig(T=80, mode=MODE_ADVADX),
                            image_index=6)
    assert np.array_equal(with_cam.x_adv_raw.data, without.x_adv_raw.data)


def test_use_cam_requires_capable_classifier():
    clf = LinearClassifier(np.zeros((2, 8 * 8 * 3)), np.zeros(2))
    img = ImageTensor(np.zeros((8, 8, 3)), ValueRange.BYTE)
    cfg = AttackConfig(T=5, mode=MODE_ADVADX, use_cam=True)
    with pytest.raises(NoCamSupportError):
        advadx_attack(clf, img, 0, cfg)


def test_non_finite_guard():
    clf = NanGradientClassifier([1.0, 0.0])
    img = ImageTensor(np.full((4, 4, 3), 100.0), ValueRange.BYTE)
    with pytest.raises(NonFiniteStateError):
        advad_attack(clf, img, 0, AttackConfig(T=10))


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(xi=-0.1).validate()
    with pytest.raises(ValueError):
        AttackConfig(T=0).validate()
    with pytest.raises(ValueError):
        AttackConfig(use_cam=True, mode="advad").validate()
    with pytest.raises(ValueError):
        AttackConfig(precision="f16").validate()
    with pytest.raises(ValueError):
        AttackConfig(mode="fgsm").validate()
    with pytest.raises(ValueError):
        run_attack(None, None, 0, dataclasses.replace(AttackConfig(), mode="pgd"))


def test_trace_running_checks_present(trained_model, test_samples):
    img, label = test_samples[7]
    res = advad_attack(trained_model, img, label, AttackConfig(T=50, trace=True),
                       image_index=7)
    run = res.trace.running
    assert run["premise_holds"]
    assert run["premise_linf_max"] <= run["rho"]
    assert run["xhat_bound_margin"] <= 1e-9
    assert run["x0_bound_margin"] <= 1e-9
    assert run["prop1_residual"] <= 1e-8
    assert len(res.trace.steps) == 50


def test_step_records_round_trip(tmp_path, trained_model, test_samples):
    img, label = test_samples[8]
    res = advad_attack(trained_model, img, label, AttackConfig(T=20, trace=True),
                       image_index=8)
    path = tmp_path / "steps.jsonl"
    write_step_records(res.trace, path)
    back = read_step_records(path)
    assert len(back) == 20
    for a, b in zip(res.trace.steps, back):
        assert (a.t, a.p_f, a.delta_linf, a.lambda_t, a.skipped) == \
            (b.t, b.p_f, b.delta_linf, b.lambda_t, b.skipped)


def test_deep_trace_round_trip(tmp_path, trained_model, test_samples):
    img, label = test_samples[9]
    res = advad_attack(trained_model, img, label,
                       AttackConfig(T=15, deep_trace=True), image_index=9)
    blob, meta = tmp_path / "d.advfs", tmp_path / "m.json"
    save_deep_trace(res.trace, blob, meta)
    back = load_deep_trace(blob, meta)
    assert back.T == 15
    assert back.precision == "f32"
    np.testing.assert_array_equal(back.eps0,
                                  res.trace.eps0.astype(np.float32))
    np.testing.assert_array_equal(back.delta,
                                  res.trace.delta.astype(np.float32))
    assert [r.t for r in back.steps] == [r.t for r in res.trace.steps]


def test_effect_of_t_sweep_shapes(trained_model, test_samples):
    ds = Dataset(test_samples[:3], 2, "synthetic")
    rows = effect_of_t_sweep(trained_model, ds, [20], AttackConfig())
    assert len(rows) == 1 and rows[0]["T"] == 20
    with pytest.raises(ValueError):
        effect_of_t_sweep(trained_model, ds, [], AttackConfig())


def test_attack_requires_byte_input(trained_model):
    img = ImageTensor(np.zeros((32, 32, 3)), ValueRange.UNIT)
    with pytest.raises(ValueError, match="byte range"):
        advad_attack(trained_model, img, 0, AttackConfig(T=5))
