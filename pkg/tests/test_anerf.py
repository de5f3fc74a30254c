import math

import numpy as np
import pytest

from sonicfield import dsp
from sonicfield.anerf import (ANerfConfig, ANerfModel, IrANerfModel, IrConfig, MaskPair, Refine,
                              acoustic_loss, compose_binaural, compose_multi, ir_magnitude_loss,
                              multi_source_masks, predict_ir, predict_masks, synthesize,
                              synthesize_multi)
from sonicfield.core import ConfigurationError, relative_error
from sonicfield.geometry import Pose
from sonicfield.training import batch_loss_and_grads, stats_loss

from _miniature import MINI_STFT, H, mini_data, miniature_gradient_error, smooth_miniature

CFG = dsp.StftConfig()


def small_model(**kw):
    kw.setdefault("width", 16)
    return ANerfModel(**kw)


def random_poses(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.9, 1.9, (n, 2)), rng.uniform(0, 2 * math.pi, n)


class TestConfig:
    def test_defaults(self):
        cfg = ANerfConfig()
        assert (cfg.width, cfg.n_bins, cfg.pe_freqs) == (128, 257, 10)
        assert cfg.coordinate_transform and not cfg.refine and cfg.fusion == "add_input"

    def test_bad_fusion(self):
        with pytest.raises(ConfigurationError):
            ANerfConfig(fusion="multiply")

    def test_bad_direction_mode(self):
        with pytest.raises(ConfigurationError):
            ANerfConfig(direction_mode="none")

    def test_mask_pair_lengths(self):
        with pytest.raises(ValueError):
            MaskPair(np.zeros(3), np.zeros(4))


class TestMasks:
    def test_ranges(self):
        model = small_model(seed=1)
        xy, th = random_poses(40)
        m_m, m_d, _ = model.forward(xy, th, np.array([0.3, -0.2]))
        assert m_m.shape == m_d.shape == (40, 257)
        assert np.all((m_m >= 0) & (m_m <= 1))
        assert np.all((m_d >= -1) & (m_d <= 1))

    def test_zero_output_layer(self):
        model = small_model(zero_output=True)
        m = predict_masks(model, Pose(0.5, 0.5, theta=1.0), [0.0, 0.0])
        np.testing.assert_array_equal(m.m_m, 0.5)
        np.testing.assert_array_equal(m.m_d, 0.0)

    def test_predict_matches_batch_row(self):
        model = small_model(seed=2)
        xy, th = random_poses(5, 1)
        m_m, m_d, _ = model.forward(xy, th, np.zeros(2))
        single = predict_masks(model, Pose(*xy[3], theta=th[3]), np.zeros(2))
        np.testing.assert_allclose(single.m_m, m_m[3], rtol=0, atol=1e-15)
        np.testing.assert_allclose(single.m_d, m_d[3], rtol=0, atol=1e-15)

    def test_deterministic(self):
        xy, th = random_poses(3)
        a = small_model(seed=4).forward(xy, th, np.zeros(2))[0]
        b = small_model(seed=4).forward(xy, th, np.zeros(2))[0]
        np.testing.assert_array_equal(a, b)

    def test_rigid_motion_changes_only_position(self):
        # with the coordinate transform the heading enters only through the
        # source-relative angle, so rotating heading and source together is a no-op
        model = small_model(seed=5)
        xy = np.array([[0.4, -0.3]])
        src = np.array([1.0, 0.5])
        a = model.forward(xy, [0.7], src)
        rot = 0.9
        v = src - xy[0]
        c, s = math.cos(rot), math.sin(rot)
        src2 = xy[0] + np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])
        b = model.forward(xy, [0.7 + rot], src2)
        np.testing.assert_allclose(a[0], b[0], atol=1e-14)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)

    def test_no_ct_uses_absolute_heading(self):
        model = small_model(seed=5, coordinate_transform=False)
        xy = np.array([[0.4, -0.3]])
        a = model.forward(xy, [0.7], np.array([1.0, 0.5]))[1]
        b = model.forward(xy, [0.7], np.array([-1.0, 0.0]))[1]
        np.testing.assert_array_equal(a, b)


class TestVisualPath:
    def test_zero_embedding_is_vision_free(self):
        plain = small_model(seed=7)
        av = small_model(seed=7, visual=True)
        xy, th = random_poses(4)
        a = plain.forward(xy, th, np.zeros(2))
        b = av.forward(xy, th, np.zeros(2), np.zeros((4, 16)))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_zero_mapper_output(self):
        from sonicfield.avmapper import AvMapper, map_features
        mapper = AvMapper(16, zero_output=True)
        e = map_features(mapper, np.ones(512), np.ones(512))
        np.testing.assert_array_equal(e, 0.0)

    def test_embedding_shape_checked(self):
        model = small_model(visual=True)
        with pytest.raises(ConfigurationError):
            model.forward(np.zeros((2, 2)) + 0.5, [0, 0], np.zeros(2), np.zeros((2, 3)))

    def test_concat_needs_embedding(self):
        model = small_model(visual=True, fusion="concat")
        with pytest.raises(ConfigurationError):
            model.forward(np.array([[0.5, 0.5]]), [0.0], np.zeros(2))

    def test_embed_without_mapper(self):
        with pytest.raises(ConfigurationError):
            small_model().embed(np.zeros((1, 1024)))

    def test_embedding_changes_masks(self):
        model = small_model(seed=3, visual=True)
        xy, th = random_poses(2)
        a = model.forward(xy, th, np.zeros(2), np.zeros((2, 16)))[0]
        b = model.forward(xy, th, np.zeros(2), np.full((2, 16), 0.5))[0]
        assert np.abs(a - b).max() > 1e-6


class TestComposition:
    def test_algebra(self):
        rng = np.random.default_rng(0)
        spec = dsp.stft(rng.standard_normal(4000))
        masks = MaskPair(rng.uniform(0, 1, 257), rng.uniform(-1, 1, 257))
        s_l, s_r, s_m = compose_binaural(spec, masks)
        s_d = masks.m_d[:, None] * s_m.magnitude
        np.testing.assert_allclose(s_l.magnitude + s_r.magnitude, 2 * s_m.magnitude, atol=1e-14)
        np.testing.assert_allclose(s_l.magnitude - s_r.magnitude, 2 * s_d, atol=1e-14)
        np.testing.assert_array_equal(s_l.phase, spec.phase)

    def test_bin_mismatch(self):
        spec = dsp.stft(np.zeros(2000))
        with pytest.raises(ValueError):
            compose_binaural(spec, MaskPair(np.ones(9), np.zeros(9)))

    def test_unit_masks_double_left(self):
        x = np.random.default_rng(1).standard_normal(6000)
        model = small_model(zero_output=True)
        out = synthesize(model, Pose(0.5, 0.5), x, [0.0, 0.0])
        # m_m = 1/2, m_d = 0: each ear is half the source
        np.testing.assert_allclose(out, 0.5 * np.stack([x, x]), atol=1e-6)

    def test_identity_refine_is_noop(self):
        rng = np.random.default_rng(2)
        spec = dsp.stft(rng.standard_normal(3000))
        masks = MaskPair(rng.uniform(0, 1, 257), rng.uniform(-1, 1, 257))
        plain = compose_binaural(spec, masks)
        refined = compose_binaural(spec, masks, Refine())
        for a, b in zip(plain, refined):
            np.testing.assert_allclose(a.magnitude, b.magnitude, atol=1e-14)

    def test_refine_backward(self):
        rng = np.random.default_rng(3)
        r = Refine()
        r.kernel += rng.normal(0, 0.1, r.kernel.shape)
        mag = rng.uniform(0, 1, (6, 5))
        proj = rng.standard_normal((6, 5))
        g_in, g_k = r.backward(mag, proj, 1)
        loss = lambda: float(np.sum(r.apply(mag, 1) * proj))
        from sonicfield.core import numeric_gradient
        np.testing.assert_allclose(g_k, numeric_gradient(loss, r.kernel)[1], rtol=1e-7, atol=1e-10)
        np.testing.assert_allclose(g_in, numeric_gradient(loss, mag), rtol=1e-7, atol=1e-10)


class TestAcousticLoss:
    def test_equal(self):
        a = np.ones((4, 3))
        assert acoustic_loss((a, a, a), (a, a, a)) == 0.0

    def test_unit_terms(self):
        z, o = np.zeros((9, 4)), np.ones((9, 4))
        assert acoustic_loss((o, o, o), (z, z, z)) == 3.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(4)
        pred = [rng.uniform(size=(5, 7)) for _ in range(3)]
        tgt = [rng.uniform(size=(5, 7)) for _ in range(3)]
        total = 0.0
        for p, t in zip(pred, tgt):
            acc = 0.0
            for i in range(5):
                for j in range(7):
                    acc += (p[i, j] - t[i, j]) ** 2
            total += acc / 35
        assert acoustic_loss(pred, tgt) == pytest.approx(total, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            acoustic_loss([np.ones(3)] * 3, [np.ones(4)] * 3)

    def test_stats_loss_equals_direct_loss(self):
        # loss on sufficient statistics vs acoustic_loss on composed spectrograms
        rng = np.random.default_rng(5)
        n = 40
        srcs = [rng.standard_normal(n) for _ in range(3)]
        tgts = [rng.standard_normal((2, n)) for _ in range(3)]
        from sonicfield.training import observation_stats
        stats = [observation_stats([s], t, MINI_STFT) for s, t in zip(srcs, tgts)]
        m_m = rng.uniform(0, 1, (3, 9))
        m_d = rng.uniform(-1, 1, (3, 9))
        loss, _ = stats_loss([(m_m, m_d)], np.array([s[0] for s in stats]),
                             np.array([s[1] for s in stats]), np.array([s[2] for s in stats]),
                             stats[0][3])
        direct = []
        for p in range(3):
            spec = dsp.stft(srcs[p], MINI_STFT)
            s_l, s_r, s_m = compose_binaural(spec, MaskPair(m_m[p], m_d[p]))
            left = dsp.stft(tgts[p][0], MINI_STFT).magnitude
            right = dsp.stft(tgts[p][1], MINI_STFT).magnitude
            direct.append(acoustic_loss((s_m, s_l, s_r), (0.5 * (left + right), left, right)))
        assert loss == pytest.approx(np.mean(direct), rel=1e-10)


class TestGradients:
    @pytest.mark.parametrize("visual", [False, True])
    def test_end_to_end(self, visual):
        models, data = smooth_miniature(11, visual=visual)
        worst, _ = miniature_gradient_error(models, data, max_entries=64,
                                            rng=np.random.default_rng(0))
        assert worst < 1e-3

    @pytest.mark.parametrize("kw", [dict(fusion="concat"), dict(fusion="add_all"),
                                    dict(direction_mode="concat"),
                                    dict(coordinate_transform=False)])
    def test_variants(self, kw):
        models, data = smooth_miniature(12, **kw)
        worst, _ = miniature_gradient_error(models, data, max_entries=48,
                                            rng=np.random.default_rng(1))
        assert worst < 1e-3

    def test_two_sources(self):
        models, data = smooth_miniature(13, visual=False, n_sources=2)
        worst, per = miniature_gradient_error(models, data, max_entries=48,
                                              rng=np.random.default_rng(2))
        assert worst < 1e-3
        assert any(k.startswith("src1.") for k in per)

    def test_mapper_receives_gradient(self):
        models, data = smooth_miniature(14)
        _, grads = batch_loss_and_grads(models, data, np.arange(len(data)))
        for name in ("mapper.0.weight", "mapper.2.weight", "emb.table"):
            assert np.abs(grads[name]).max() > 0

    def test_stale_tape(self):
        from sonicfield.core import UsageError
        model = small_model(seed=1)
        m_m, m_d, cache = model.forward(np.array([[0.5, 0.5]]), [0.3], np.zeros(2))
        model.bump()
        with pytest.raises(UsageError):
            model.backward(cache, np.ones_like(m_m), np.ones_like(m_d))


class TestMultiSource:
    def test_single_is_predict_masks(self):
        model = small_model(seed=8)
        pose = Pose(0.2, 0.4, theta=0.5)
        (m,) = multi_source_masks([model], pose, [[1.0, 1.0]])
        ref = predict_masks(model, pose, [1.0, 1.0])
        np.testing.assert_array_equal(m.m_m, ref.m_m)
        np.testing.assert_array_equal(m.m_d, ref.m_d)

    def test_identical_sources_double(self):
        model = small_model(seed=9)
        pose = Pose(0.2, 0.4, theta=0.5)
        x = np.random.default_rng(0).standard_normal(3000)
        spec = dsp.stft(x)
        masks = multi_source_masks([model, model], pose, [[1.0, 1.0]] * 2)
        l2, r2, m2 = compose_multi([spec, spec], masks)
        l1, r1, m1 = compose_binaural(spec, masks[0])
        np.testing.assert_allclose(l2.magnitude, 2 * l1.magnitude, rtol=1e-14)
        np.testing.assert_allclose(r2.magnitude, 2 * r1.magnitude, rtol=1e-14)
        np.testing.assert_allclose(m2.magnitude, 2 * m1.magnitude, rtol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            multi_source_masks([small_model()], Pose(0, 0), [[1, 1], [0, 1]])

    def test_synthesize_multi_shape(self):
        models = [small_model(seed=k) for k in range(2)]
        rng = np.random.default_rng(3)
        out = synthesize_multi(models, Pose(0.1, 0.1), rng.standard_normal((2, 2500)),
                               [[1, 0], [0, 1]])
        assert out.shape == (2, 2500)


class TestIrVariant:
    def test_output_length(self):
        model = IrANerfModel(width=8, ir_length=123)
        assert predict_ir(model, Pose(0.1, 0.2), [1.0, 0.0]).shape == (2, 123)

    def test_zero_output_is_silent(self):
        model = IrANerfModel(width=8, ir_length=50, zero_output=True)
        np.testing.assert_array_equal(predict_ir(model, Pose(0.1, 0.2), [1.0, 0.0]), 0.0)

    def test_config_defaults(self):
        cfg = IrConfig()
        assert cfg.ir_length > 0 and cfg.time_freqs > 0

    def test_magnitude_loss_gradient(self):
        rng = np.random.default_rng(6)
        cfg = MINI_STFT
        pred = rng.standard_normal((2, 30))
        gt = np.abs(rng.standard_normal((2, cfg.n_bins, cfg.n_frames(30))))
        loss, grad = ir_magnitude_loss(pred, gt, cfg)
        from sonicfield.core import numeric_gradient
        num = numeric_gradient(lambda: ir_magnitude_loss(pred, gt, cfg)[0], pred)
        assert relative_error(grad, num).max() < 1e-4

    def test_bad_envelope(self):
        with pytest.raises(ConfigurationError):
            IrConfig(envelope="linear")

    def test_decay_envelope_never_rises(self):
        model = IrANerfModel(width=8, ir_length=200, seed=3)
        last = model.mlp2.layers[-1]
        # unit carrier exposes the gain
        last.weight[:2] = 0.0
        last.bias[:2] = 1.0
        model.bump()
        ir = predict_ir(model, Pose(0.5, -0.3), [1.0, 0.0])
        assert np.all(ir > 0) and np.all(ir <= 1)
        assert np.all(np.diff(ir, axis=1) < 0)

    def test_plain_head_is_linear_in_last_layer(self):
        model = IrANerfModel(width=8, ir_length=40, envelope="none", seed=2)
        before = predict_ir(model, Pose(0.1, 0.2), [1.0, 0.0])
        model.mlp2.layers[-1].bias[:] += 0.25
        model.bump()
        np.testing.assert_allclose(predict_ir(model, Pose(0.1, 0.2), [1.0, 0.0]), before + 0.25,
                                   atol=1e-12)

    @pytest.mark.parametrize("envelope", ["decay", "none"])
    def test_parameter_gradients(self, envelope):
        rng = np.random.default_rng(7)
        model = IrANerfModel(width=6, ir_length=24, pe_freqs=2, time_freqs=3, seed=1,
                             envelope=envelope)
        xy = np.array([[0.3, -0.4], [-0.7, 0.2]])
        th = np.array([0.4, 2.0])
        src = np.array([0.9, 0.8])
        proj = rng.standard_normal((2, 2, 24))
        ir, cache = model.forward(xy, th, src)
        grads = model.backward(cache, proj)
        loss = lambda: float(np.sum(model.forward(xy, th, src)[0] * proj))
        from sonicfield.core import gradient_check
        worst, _ = gradient_check(loss, model.parameters(), grads, H)
        assert worst < 1e-4
