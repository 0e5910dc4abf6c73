import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jomold import model as mdl
from jomold import tensorcore as tc
from jomold.errors import ConfigError, DimensionError, FormatError, NumericError

import oracles


def random_setup(seed, d=None, t=None, c=None, b=None):
    rng = np.random.default_rng(seed)
    d = d or int(rng.integers(1, 9))
    t = t or int(rng.integers(1, 5))
    c = c or int(rng.integers(1, 4))
    b = b or int(rng.integers(1, 4))
    cfg = mdl.ModelConfig(d, t, c)
    params = mdl.ModelParams.init(cfg, tc.make_rng(seed))
    for name in ("classifier_b", "temporal_b", "modality_b"):
        getattr(params, name)[:] = rng.normal(0, 0.5, size=c)
    fa, fv = rng.normal(size=(b, t, d)), rng.normal(size=(b, t, d))
    y = (rng.random((b, c)) < 0.5).astype(float)
    ya = y * (rng.random((b, c)) < 0.8)
    yv = y * (rng.random((b, c)) < 0.8)
    return cfg, params, fa, fv, ya, yv, y


def nested(params):
    return {k: v.tolist() for k, v in params.blocks().items()}


def test_config_validation():
    with pytest.raises(ConfigError):
        mdl.ModelConfig(0, 1, 1)
    with pytest.raises(ConfigError):
        mdl.ModelConfig(1, 1, 1, threshold=1.0)


def test_enhance_single_segment():
    rng = np.random.default_rng(0)
    fa, fv = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    ha, hv = mdl.enhance_features(fa, fv, skip_cross_modal=True)
    np.testing.assert_allclose(ha, 2 * fa, rtol=1e-15)
    np.testing.assert_allclose(hv, 2 * fv, rtol=1e-15)
    ha, hv = mdl.enhance_features(fa, fv, skip_cross_modal=False)
    np.testing.assert_allclose(ha, 2 * fa + fv, rtol=1e-14)
    np.testing.assert_allclose(hv, 2 * fv + fa, rtol=1e-14)


def test_enhance_identical_segments():
    f = np.tile(np.array([[0.3, -1.2, 2.0]]), (2, 1))
    ha, _ = mdl.enhance_features(f, f, skip_cross_modal=True)
    np.testing.assert_allclose(ha - f, f, rtol=1e-15)


def test_enhance_shape_mismatch():
    with pytest.raises(DimensionError):
        mdl.enhance_features(np.ones((2, 3)), np.ones((3, 3)))


def test_single_segment_pools_to_segment_probability():
    cfg, params, fa, fv, *_ = random_setup(1, t=1)
    out = mdl.forward_video(params, fa[0], fv[0])
    np.testing.assert_allclose(out.pooled_audio, out.seg_audio[0], rtol=1e-15)
    np.testing.assert_allclose(out.pooled_visual, out.seg_visual[0], rtol=1e-15)


def test_attentive_pool_injected_weights():
    seg = np.array([[0.2], [0.8]])
    half = np.full((2, 1), 0.5)
    w_av = np.zeros((2, 2, 1))
    w_av[:, 0, :] = 1.0
    p_a, p_v, p, _ = mdl.attentive_pool(seg, seg[::-1], half, half, w_av)
    assert p_a[0] == pytest.approx(0.5)
    assert p_v[0] == pytest.approx(0.5)
    # modality mask on audio makes the video probability the audio one
    seg_v = np.array([[0.9], [0.1]])
    w_a = np.array([[0.25], [0.75]])
    p_a, _, p, _ = mdl.attentive_pool(seg, seg_v, w_a, half, w_av)
    assert p[0] == pytest.approx(p_a[0], rel=1e-15)


def test_forward_matches_scalar_oracle():
    for seed in range(10):
        cfg, params, fa, fv, ya, yv, y = random_setup(seed)
        for skip in (True, False):
            out = mdl.forward(params, fa, fv, skip)
            for i in range(fa.shape[0]):
                p_a, p_v, p, seg_a, seg_v = oracles.video_forward(nested(params), fa[i].tolist(), fv[i].tolist(), skip)
                np.testing.assert_allclose(out.pooled_audio[i], p_a, rtol=1e-10)
                np.testing.assert_allclose(out.pooled_visual[i], p_v, rtol=1e-10)
                np.testing.assert_allclose(out.pooled_video[i], p, rtol=1e-10)
                np.testing.assert_allclose(out.seg_audio[i], seg_a, rtol=1e-10)
                np.testing.assert_allclose(out.seg_visual[i], seg_v, rtol=1e-10)


def test_batch_losses_examples():
    cfg = mdl.ModelConfig(4, 3, 5)
    params = mdl.ModelParams.zeros(cfg)
    rng = np.random.default_rng(3)
    fa, fv = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    ones = np.ones((2, 5))
    total = mdl.batch_losses(params, fa, fv, ones, ones, ones).total
    assert total == pytest.approx(3 * 5 * math.log(2), rel=1e-12)
    params.classifier_b[:] = 40.0
    assert mdl.batch_losses(params, fa, fv, ones, ones, ones).total == pytest.approx(0.0, abs=1e-5)


def test_batch_losses_match_scalar_oracle():
    for seed in range(10):
        cfg, params, fa, fv, ya, yv, y = random_setup(100 + seed)
        for skip in (True, False):
            got = mdl.batch_losses(params, fa, fv, ya, yv, y, skip).total
            ref = oracles.batch_total(nested(params), fa.tolist(), fv.tolist(), ya.tolist(), yv.tolist(), y.tolist(), skip)
            assert got == pytest.approx(ref, abs=1e-10)


def test_batch_losses_label_shape():
    cfg, params, fa, fv, ya, yv, y = random_setup(5, b=2, c=2)
    with pytest.raises(DimensionError):
        mdl.batch_losses(params, fa, fv, ya[:1], yv, y)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_forward_invariants(seed, skip):
    cfg, params, fa, fv, *_ = random_setup(seed)
    out = mdl.forward(params, fa * 3, fv * 3, skip)
    np.testing.assert_allclose(out.temporal_audio.sum(axis=-2), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.temporal_visual.sum(axis=-2), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.modality_weights.sum(axis=-2), 1.0, atol=1e-9)
    tol = 1e-12
    for pooled, seg in ((out.pooled_audio, out.seg_audio), (out.pooled_visual, out.seg_visual)):
        assert np.all(pooled >= seg.min(axis=-2) - tol) and np.all(pooled <= seg.max(axis=-2) + tol)
    both = np.concatenate([out.seg_audio, out.seg_visual], axis=-2)
    assert np.all(out.pooled_video >= both.min(axis=-2) - tol)
    assert np.all(out.pooled_video <= both.max(axis=-2) + tol)
    for arr in (out.seg_audio, out.seg_visual):
        assert np.all((arr > 0) & (arr < 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_skip_cross_modal_isolates_audio(seed):
    cfg, params, fa, fv, ya, yv, y = random_setup(seed)
    base = mdl.forward(params, fa, fv, skip_cross_modal=True)
    other = mdl.forward(params, fa, fv + np.random.default_rng(seed).normal(size=fv.shape), True)
    np.testing.assert_array_equal(base.seg_audio, other.seg_audio)
    np.testing.assert_array_equal(base.pooled_audio, other.pooled_audio)
    la1 = mdl.batch_losses(params, fa, fv, ya, yv, y, True).audio
    la2 = mdl.batch_losses(params, fa, fv * 2, ya, yv, y, True).audio
    np.testing.assert_array_equal(la1, la2)


def test_gradient_check_reference_size():
    cfg, params, fa, fv, ya, yv, y = random_setup(7, d=4, t=3, c=2, b=2)
    for skip in (True, False):
        _, grads = mdl.loss_and_grads(params, fa, fv, ya, yv, y, skip)
        flat = np.concatenate([grads[n].ravel() for n in mdl.BLOCKS])

        def f(vec):
            return mdl.batch_losses(mdl.ModelParams.from_flat(cfg, vec), fa, fv, ya, yv, y, skip).total

        assert tc.finite_diff_check(f, params.flatten(), flat) < 1e-3


def test_feature_gradients():
    cfg, params, fa, fv, ya, yv, y = random_setup(8, d=3, t=3, c=2, b=2)
    _, _, (g_fa, g_fv) = mdl.loss_and_grads(params, fa, fv, ya, yv, y, False, feature_grads=True)
    f = lambda x: mdl.batch_losses(params, x.reshape(fa.shape), fv, ya, yv, y).total  # noqa: E731
    assert tc.finite_diff_check(f, fa, g_fa) < 1e-3
    f = lambda x: mdl.batch_losses(params, fa, x.reshape(fv.shape), ya, yv, y).total  # noqa: E731
    assert tc.finite_diff_check(f, fv, g_fv) < 1e-3


def test_positive_only_gradient():
    cfg, params, fa, fv, ya, yv, y = random_setup(9, d=3, t=2, c=2, b=2)
    _, grads = mdl.loss_and_grads(params, fa, fv, ya, yv, y, positive_only=True)
    flat = np.concatenate([grads[n].ravel() for n in mdl.BLOCKS])
    f = lambda v: mdl.batch_losses(mdl.ModelParams.from_flat(cfg, v), fa, fv, ya, yv, y,  # noqa: E731
                                   positive_only=True).total
    assert tc.finite_diff_check(f, params.flatten(), flat) < 1e-3


def test_adam_zero_gradient_keeps_params():
    cfg, params, *_ = random_setup(10)
    before = params.copy()
    opt = mdl.Adam(params)
    opt.step(params, {n: np.zeros_like(v) for n, v in params.blocks().items()}, lr=0.1)
    for n in mdl.BLOCKS:
        np.testing.assert_array_equal(getattr(params, n), getattr(before, n))


def test_adam_descends_on_quadratic():
    cfg = mdl.ModelConfig(1, 1, 1)
    params = mdl.ModelParams.zeros(cfg)
    params.classifier_b[:] = 3.0
    opt = mdl.Adam(params)
    grads = {n: np.zeros_like(v) for n, v in params.blocks().items()}
    grads["classifier_b"] = 2 * params.classifier_b.copy()
    opt.step(params, grads, lr=0.1)
    assert params.classifier_b[0] ** 2 < 9.0
    assert params.classifier_b[0] == pytest.approx(2.9)


def test_adam_rejects_non_finite_gradient():
    cfg, params, *_ = random_setup(11)
    grads = {n: np.zeros_like(v) for n, v in params.blocks().items()}
    grads["temporal_w"][0, 0] = np.nan
    with pytest.raises(NumericError, match="temporal_w"):
        mdl.Adam(params).step(params, grads, 0.1)


def test_backward_and_step_reduces_loss():
    cfg, params, fa, fv, ya, yv, y = random_setup(12, d=6, t=4, c=3, b=3)
    opt = mdl.Adam(params)
    first = mdl.batch_losses(params, fa, fv, ya, yv, y).total
    for _ in range(30):
        params, _ = mdl.backward_and_step(params, fa, fv, ya, yv, y, opt, 0.05)
    assert mdl.batch_losses(params, fa, fv, ya, yv, y).total < first


def test_checkpoint_roundtrip(tmp_path):
    cfg, params, *_ = random_setup(13, d=5, t=3, c=4)
    path = tmp_path / "m.jmck"
    mdl.save_checkpoint(path, cfg, params)
    raw = path.read_bytes()
    assert raw[:5] == b"JMCK1"
    assert raw[5:17] == (5).to_bytes(4, "little") + (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    loaded = mdl.load_params(path, cfg)
    for n in mdl.BLOCKS:
        np.testing.assert_array_equal(getattr(loaded, n), getattr(params, n))


def test_checkpoint_rejections(tmp_path):
    cfg, params, *_ = random_setup(14, d=5, t=3, c=4)
    path = tmp_path / "m.jmck"
    mdl.save_checkpoint(path, cfg, params)
    with pytest.raises(DimensionError, match="do not match"):
        mdl.load_params(path, mdl.ModelConfig(5, 3, 2))
    bad = tmp_path / "bad.jmck"
    bad.write_bytes(b"XXXXX" + path.read_bytes()[5:])
    with pytest.raises(FormatError, match="magic"):
        mdl.load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError, match="truncated"):
        mdl.load_checkpoint(bad)
    bad.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        mdl.load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:5] + (0).to_bytes(4, "little") + path.read_bytes()[9:])
    with pytest.raises(FormatError):
        mdl.load_checkpoint(bad)


def test_params_flat_roundtrip():
    cfg, params, *_ = random_setup(15)
    again = mdl.ModelParams.from_flat(cfg, params.flatten())
    np.testing.assert_array_equal(again.flatten(), params.flatten())
    with pytest.raises(DimensionError):
        mdl.ModelParams.from_flat(cfg, np.zeros(3))


def test_predict_segments_threshold():
    cfg, params, fa, fv, *_ = random_setup(16)
    a, v = mdl.predict_segments(params, fa, fv, 0.5)
    out = mdl.forward(params, fa, fv, False)
    np.testing.assert_array_equal(a, out.seg_audio >= 0.5)
    np.testing.assert_array_equal(v, out.seg_visual >= 0.5)
