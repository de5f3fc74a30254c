import math

import numpy as np
import pytest

from sonicfield import dsp, metrics
from sonicfield import simulator as sim
from sonicfield.encoding import DegenerateGeometryError
from sonicfield.geometry import Pose

SR = 22050


def noise(seed=0, n=SR):
    return np.random.default_rng(seed).standard_normal(n) * 0.1


def ear_magnitudes(stereo):
    return [dsp.stft(ch).magnitude for ch in stereo]


def interior(m):
    return m[:, 4:-4]


class TestSceneSpec:
    def test_validation(self):
        with pytest.raises(sim.SceneError):
            sim.SceneSpec(sources=[])
        with pytest.raises(sim.SceneError):
            sim.SceneSpec(sources=[sim.Source((0, 0))], d_min=0.0)
        with pytest.raises(sim.SceneError):
            sim.SceneSpec(sources=[sim.Source((0, 0))], ild_alpha=1.5)
        with pytest.raises(sim.SceneError):
            sim.SceneSpec(sources=[sim.Source((0, 0))], ir_params=sim.IrParams(t60=0.0))

    @pytest.mark.parametrize("make", [sim.oracle_scene, sim.material_scene, sim.two_source_scene,
                                      sim.sphere_scene, sim.ir_scene])
    def test_dict_round_trip(self, make):
        scene = make()
        assert sim.SceneSpec.from_dict(scene.to_dict()) == scene

    def test_from_dict_schema_error(self):
        with pytest.raises(sim.SceneError):
            sim.SceneSpec.from_dict({"sources": [{"pos": [0, 0]}]})


class TestBinaural:
    def test_half_distance_facing(self):
        scene = sim.oracle_scene()
        x = noise()
        d = 2 * scene.d_min
        out = sim.simulate_binaural(scene, Pose(-d, 0.0, theta=0.0), x)
        ref = dsp.stft(x).magnitude
        for m in ear_magnitudes(out):
            np.testing.assert_allclose(interior(m), 0.5 * interior(ref), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)

    def test_hard_left_ratio(self):
        scene = sim.oracle_scene(ild_alpha=0.6)
        # heading +x with the source at +y: source directly to the left
        out = sim.simulate_binaural(scene, Pose(0.0, -1.0, theta=0.0), noise(1))
        left, right = ear_magnitudes(out)
        ratio = interior(left).sum() / interior(right).sum()
        assert ratio == pytest.approx(1.6 / 0.4, rel=1e-6)

    def test_mixture_recovers_scaled_source(self):
        scene = sim.oracle_scene()
        x = noise(2)
        pose = Pose(0.8, 1.1, theta=2.0)
        out = sim.simulate_binaural(scene, pose, x)
        left, right = ear_magnitudes(out)
        g = sim.distance_gain(math.hypot(0.8, 1.1), scene.d_min)
        np.testing.assert_allclose(interior(0.5 * (left + right)), g * interior(dsp.stft(x).magnitude),
                                   rtol=1e-5, atol=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            sim.simulate_binaural(sim.oracle_scene(), Pose(0.0, 0.0), noise())

    def test_needs_one_waveform_per_source(self):
        with pytest.raises(sim.SceneError):
            sim.simulate_binaural(sim.two_source_scene(), Pose(0.0, 0.0), noise())

    def test_mirror_swaps_channels(self):
        scene = sim.oracle_scene()
        x = noise(3)
        a = sim.simulate_binaural(scene, Pose(1.0, 0.7, theta=2.5), x)
        # reflect across the x axis: y -> -y, heading -> -heading
        b = sim.simulate_binaural(scene, Pose(1.0, -0.7, theta=(-2.5) % (2 * math.pi)), x)
        np.testing.assert_allclose(a[0], b[1], atol=1e-12)
        np.testing.assert_allclose(a[1], b[0], atol=1e-12)

    def test_energy_decreases_with_distance(self):
        scene = sim.oracle_scene()
        x = noise(4)
        energies = [np.sum(sim.simulate_binaural(scene, Pose(-d, 0.0, theta=0.3), x) ** 2)
                    for d in np.linspace(0.6, 1.8, 7)]
        assert np.all(np.diff(energies) < 0)

    def test_air_absorption_is_frequency_dependent(self):
        scene = sim.oracle_scene(air_absorption=0.5)
        m_mix, m_diff = sim.source_masks(scene, Pose(1.5, 0.0), 257)
        assert m_mix[0] > m_mix[-1]
        assert m_mix[-1] == pytest.approx(m_mix[0] * math.exp(-0.5 * 1.5))
        np.testing.assert_array_equal(m_diff, m_diff[0])

    def test_material_panel_attenuates_when_facing(self):
        scene = sim.material_scene(absorption=0.6)
        # the panel centre lies straight ahead on the x axis
        facing = sim.material_gain(scene, Pose(0.5, 0.0, theta=0.0))
        away = sim.material_gain(scene, Pose(0.5, 0.0, theta=math.pi))
        assert away == 1.0
        assert facing == pytest.approx(0.4, abs=1e-12)

    def test_material_gain_off_axis(self):
        scene = sim.material_scene(absorption=0.6)
        pose = Pose(0.0, 1.0, theta=0.0)
        delta = math.atan2(-1.0, 1.925)
        assert sim.material_gain(scene, pose) == pytest.approx(1 - 0.6 * math.cos(delta) ** 4)

    def test_masks_stay_in_model_range(self):
        rng = np.random.default_rng(0)
        scene = sim.material_scene()
        for pose in sim.sample_poses(scene, 100, rng):
            m_mix, m_diff = sim.source_masks(scene, pose, 9)
            assert np.all((0 <= m_mix) & (m_mix <= 1))
            assert np.all(np.abs(m_diff) <= 1)

    def test_two_sources_mix_additively(self):
        scene = sim.two_source_scene()
        a, b = noise(5), noise(6)
        pose = Pose(0.2, 0.1, theta=1.0)
        both = sim.simulate_binaural(scene, pose, [a, b])
        cfg = dsp.StftConfig()
        expect_l = expect_r = 0
        for i, s in enumerate((a, b)):
            m, dm = sim.source_masks(scene, pose, cfg.n_bins, i)
            mag = np.abs(dsp.stft_complex(s)) * m[:, None]
            expect_l = expect_l + mag * (1 + dm[:, None])
            expect_r = expect_r + mag * (1 - dm[:, None])
        # magnitudes add per source; the phase is that of the summed recording
        phase = np.exp(1j * np.angle(dsp.stft_complex(a + b)))
        n = len(a)
        np.testing.assert_allclose(both[0], dsp.istft_complex(expect_l * phase, cfg, n), atol=1e-12)
        np.testing.assert_allclose(both[1], dsp.istft_complex(expect_r * phase, cfg, n), atol=1e-12)


class TestImpulseResponse:
    def test_direct_delay(self):
        scene = sim.oracle_scene()
        scene.ir_params = sim.IrParams(sample_rate=SR, length_s=0.3)
        ir = sim.simulate_ir(scene, Pose(-3.43, 0.0, theta=0.0))
        # 3.43 m at 343 m/s and 22050 Hz is 220.5 samples, rounded half to even
        first = int(np.flatnonzero(ir[0])[0])
        assert first == 220
        assert ir[0, first] == pytest.approx(sim.distance_gain(3.43, scene.d_min))

    def test_schroeder_reaches_minus_60_at_t60(self):
        scene = sim.oracle_scene()
        scene.ir_params = sim.IrParams(t60=0.5, tail_level=1.0, length_s=1.5, sample_rate=SR)
        # analytic Schroeder curve of the energy envelope exp(-6 ln10 t / t60)
        a = 6 * math.log(10) / 0.5
        t = 0.5
        level = 10 * math.log10(math.exp(-a * t))
        assert level == pytest.approx(-60.0)

    def test_t60_calibration(self):
        scene = sim.ir_scene(t60=0.3, t60_slope=0.0, sample_rate=SR, length_s=0.8)
        est = [metrics.t60(sim.simulate_ir(scene, Pose(1.0, 0.5), seed=s), SR) for s in range(10)]
        assert np.mean(est) == pytest.approx(0.3, rel=0.05)

    def test_c50_matches_closed_form(self):
        t60 = 0.4
        scene = sim.ir_scene(t60=t60, t60_slope=0.0, sample_rate=SR, length_s=1.2)
        scene.ir_params.tail_level = 1.0
        vals = []
        for s in range(10):
            ir = sim.simulate_ir(scene, Pose(0.2, 0.1), seed=s)
            tail = ir[:, int(np.argmax(np.abs(ir[0]))) + 1:]
            vals.append(metrics.c50(tail, SR))
        ratio_sim = 10 ** (np.mean(vals) / 10)
        ratio_ref = 10 ** (sim.exponential_c50(t60) / 10)
        assert ratio_sim == pytest.approx(ratio_ref, rel=0.05)

    def test_t60_varies_with_position(self):
        scene = sim.ir_scene(t60=0.3, t60_slope=0.1)
        assert sim.local_t60(scene, Pose(1.0, 0.0)) == pytest.approx(0.4)
        assert sim.local_t60(scene, Pose(-1.0, 0.0)) == pytest.approx(0.2)

    def test_default_scene_decays_are_measurable(self):
        scene = sim.ir_scene()
        train, val = sim.generate_ir_dataset(scene, 40, seed=2)
        sr = scene.ir_params.sample_rate
        for s in train + val:
            assert metrics.t60(s.ir, sr) == pytest.approx(sim.local_t60(scene, s.pose), rel=0.1)

    def test_ir_is_seeded(self):
        scene = sim.ir_scene()
        a = sim.simulate_ir(scene, Pose(1.0, 1.0), seed=3)
        b = sim.simulate_ir(scene, Pose(1.0, 1.0), seed=3)
        np.testing.assert_array_equal(a, b)


class TestAnalyticRender:
    def test_wall_depth(self):
        scene = sim.SceneSpec(sources=[sim.Source((0.0, 0.0))])
        _, depth = sim.render_analytic(scene, Pose(0.5, 0.0, 1.25, 0.0, 0.0), 16, 16)
        np.testing.assert_allclose(depth[7:9, 7:9], 1.5, rtol=0.01)

    def test_inside_sphere(self):
        scene = sim.sphere_scene(radius=1.0, color=(0.1, 0.2, 0.3))
        rgb, _ = sim.render_analytic(scene, Pose(0.1, 0.0, 0.0, 1.0, 0.0), 8, 8)
        np.testing.assert_allclose(rgb, np.broadcast_to([0.1, 0.2, 0.3], rgb.shape))

    def test_sphere_silhouette(self):
        R, D = 1.0, 3.0
        scene = sim.sphere_scene(radius=R)
        _, depth = sim.render_analytic(scene, Pose(-D, 0.0, 0.0, 0.0, 0.0), 64, 64, 60.0)
        f = 32 / math.tan(math.radians(30))
        area = math.pi * (f * math.tan(math.asin(R / D))) ** 2
        assert np.sum(depth > 0) == pytest.approx(area, rel=0.1)

    def test_miss_is_black(self):
        scene = sim.sphere_scene()
        rgb, depth = sim.render_analytic(scene, Pose(-3.0, 0.0, 0.0, math.pi, 0.0), 8, 8)
        assert np.all(rgb == 0) and np.all(depth == 0)

    def test_needs_room(self):
        scene = sim.oracle_scene()
        scene.room = None
        with pytest.raises(sim.SceneError):
            sim.render_analytic(scene, Pose(1.0, 0.0), 4, 4)


class TestDataset:
    def test_split(self):
        train, val = sim.generate_dataset(sim.oracle_scene(), 100, seed=0, with_images=False)
        assert (len(train), len(val)) == (80, 20)
        assert not {o.id for o in train} & {o.id for o in val}

    def test_deterministic(self):
        a = sim.generate_dataset(sim.oracle_scene(), 12, seed=4, image_size=8)
        b = sim.generate_dataset(sim.oracle_scene(), 12, seed=4, image_size=8)
        for sa, sb in zip(a, b):
            for oa, ob in zip(sa, sb):
                assert oa.pose == ob.pose
                np.testing.assert_array_equal(oa.target, ob.target)
                np.testing.assert_array_equal(oa.rgb, ob.rgb)

    def test_observation_shapes(self):
        train, _ = sim.generate_dataset(sim.oracle_scene(), 10, seed=1, image_size=8)
        ob = train[0]
        assert ob.target.shape == (2, SR) and ob.target.dtype == np.float32
        assert ob.rgb.shape == (8, 8, 3) and ob.depth.shape == (8, 8)

    def test_too_few_poses(self):
        with pytest.raises(sim.SceneError):
            sim.generate_dataset(sim.oracle_scene(), 5)

    def test_quadrant_uniformity(self):
        poses = sim.sample_poses(sim.oracle_scene(), 4000, np.random.default_rng(0))
        xy = np.array([[p.x, p.y] for p in poses])
        counts = [np.sum(((xy[:, 0] >= 0) == sx) & ((xy[:, 1] >= 0) == sy))
                  for sx in (True, False) for sy in (True, False)]
        for c in counts:
            assert c == pytest.approx(1000, rel=0.1)

    def test_poses_respect_clearance(self):
        scene = sim.material_scene()
        for p in sim.sample_poses(scene, 200, np.random.default_rng(1)):
            assert math.hypot(p.x, p.y) >= scene.clearance
            c = scene.clearance
            inside = 1.85 - c <= p.x <= 2.0 + c and -1.2 - c <= p.y <= 1.2 + c
            assert not inside

    def test_unsatisfiable_region(self):
        scene = sim.oracle_scene()
        scene.clearance = 10.0
        with pytest.raises(sim.SceneError):
            sim.sample_poses(scene, 1, np.random.default_rng(0), max_tries=50)
