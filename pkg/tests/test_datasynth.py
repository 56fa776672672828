import numpy as np
import pytest

from uxsep.datasynth import (DEFAULT_BANDS, RoomSpec, SceneSpec,
                             calibrated_beta, dataset_digest,
                             direct_delay_samples, early_cutoff, generate_rir,
                             load_dataset, make_dataset, measure_t60,
                             reflection_coefficient, render_rirs, sample_scene,
                             split_rir, synthesize_mixture, synthetic_utterance)


class TestRoomSpec:
    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            RoomSpec(0.0, 5.0, 3.0, 0.3)
        with pytest.raises(ValueError):
            RoomSpec(5.0, 5.0, 3.0, -0.1)

    def test_infeasible_t60(self):
        room = RoomSpec(7.0, 6.0, 3.0, 1e-12)
        with pytest.raises(ValueError, match="absorption"):
            reflection_coefficient(room)


class TestSampleScene:
    def test_ranges_over_many_draws(self):
        for seed in range(1000):
            sc = sample_scene(seed)
            assert 5.0 <= sc.room.length <= 10.0
            assert 5.0 <= sc.room.width <= 10.0
            assert 2.0 <= sc.room.height <= 5.0
            assert 0.1 <= sc.room.t60 <= 0.5
            assert 0.05 <= sc.overlap_ratio <= 0.95
            assert 0.0 <= sc.snr_db <= 5.0
            dims = (sc.room.length, sc.room.width, sc.room.height)
            for pos in sc.source_positions:
                for c, ext in zip(pos, dims):
                    assert 0.5 <= c <= ext - 0.5

    def test_deterministic(self):
        assert sample_scene(42) == sample_scene(42)
        assert sample_scene(42) != sample_scene(43)

    def test_mic_array_geometry(self):
        sc = sample_scene(7)
        center = np.array([sc.room.length / 2, sc.room.width / 2,
                           sc.room.height / 2])
        mics = np.array(sc.mic_positions)
        assert mics.shape == (5, 3)
        radii = np.linalg.norm(mics - center, axis=1)
        assert np.max(np.abs(radii - 0.05)) < 1e-9

    def test_scene_rejects_source_near_wall(self):
        sc = sample_scene(1)
        with pytest.raises(ValueError, match="0.5 m"):
            SceneSpec(room=sc.room, source_positions=((0.1, 2.0, 1.0),),
                      mic_positions=sc.mic_positions, overlap_ratio=0.5,
                      snr_db=2.0)


class TestGenerateRir:
    ROOM = RoomSpec(7.0, 6.0, 3.0, 0.2)

    def test_anechoic_single_tap(self):
        src, mic = (2.0, 2.0, 1.5), (3.5, 3.0, 1.5)
        h = generate_rir(self.ROOM, src, mic, beta=0.0)
        d = np.linalg.norm(np.subtract(src, mic))
        tap = int(round(d / 343.0 * 8000))
        assert np.count_nonzero(h) == 1
        assert abs(h[tap] - 1.0 / (4.0 * np.pi * d)) < 1e-12

    def test_first_tap_at_direct_delay(self):
        src, mic = (2.0, 2.0, 1.5), (5.5, 4.0, 2.1)
        h = generate_rir(self.ROOM, src, mic, beta=0.6)
        assert np.argmax(h != 0.0) == direct_delay_samples(src, mic, 8000)

    def test_reciprocity(self):
        src, mic = (2.0, 2.0, 1.5), (5.5, 4.0, 2.1)
        a = generate_rir(self.ROOM, src, mic, beta=0.6)
        b = generate_rir(self.ROOM, mic, src, beta=0.6)
        assert np.argmax(a != 0.0) == np.argmax(b != 0.0)

    def test_outside_room_rejected(self):
        with pytest.raises(ValueError):
            generate_rir(self.ROOM, (8.0, 2.0, 1.5), (3.0, 3.0, 1.5), beta=0.5)

    @pytest.mark.parametrize("t60", [0.2, 0.4])
    def test_schroeder_t60_within_tolerance(self, t60):
        room = RoomSpec(7.0, 6.0, 3.0, t60)
        h = generate_rir(room, (2.0, 2.0, 1.5), (4.5, 3.5, 1.8))
        est = measure_t60(h, 8000)
        assert abs(est - t60) / t60 < 0.2

    def test_calibrated_beta_in_unit_interval(self):
        b = calibrated_beta(self.ROOM)
        assert 0.0 < b < 1.0


class TestSplitRir:
    def test_partition_exact(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=500)
        early, late = split_rir(h, 123)
        np.testing.assert_array_equal(early + late, h)
        assert not np.any(early[124:])
        assert not np.any(late[:124])

    def test_cutoff_formula(self):
        src, mic = (2.0, 2.0, 1.5), (3.5, 3.0, 1.5)
        d = np.linalg.norm(np.subtract(src, mic))
        assert early_cutoff(src, mic, 8000) == int(round(d / 343.0 * 8000)) + 400

    def test_anechoic_late_is_zero(self):
        room = RoomSpec(7.0, 6.0, 3.0, 0.2)
        src, mic = (2.0, 2.0, 1.5), (3.5, 3.0, 1.5)
        h = generate_rir(room, src, mic, beta=0.0)
        _, late = split_rir(h, early_cutoff(src, mic, 8000))
        assert not np.any(late)


def _active_sources(scene, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([
        synthetic_utterance(rng, scene.duration, scene.sample_rate,
                            DEFAULT_BANDS[i % 2])
        for i in range(scene.num_sources)])


class TestSynthesizeMixture:
    def test_single_source_anechoic_is_delayed_scaled_copy(self):
        sc = sample_scene(3, num_sources=1, num_mics=1, duration=0.5)
        rirs = render_rirs(sc, beta=0.0)
        s = _active_sources(sc)
        res = synthesize_mixture(sc, s, rirs=rirs)
        d = np.linalg.norm(np.subtract(sc.source_positions[0], sc.mic_positions[0]))
        tap = int(round(d / 343.0 * 8000))
        amp = 1.0 / (4.0 * np.pi * d)
        T = sc.num_samples
        np.testing.assert_allclose(res.mixture[0, tap:],
                                   amp * s[0, :T - tap], atol=1e-6)

    def test_linearity_in_source(self):
        sc = sample_scene(4, num_sources=1, num_mics=2, duration=0.5)
        rirs = render_rirs(sc, beta=0.0)
        s = _active_sources(sc)
        a = synthesize_mixture(sc, s, rirs=rirs)
        b = synthesize_mixture(sc, 2.5 * s, rirs=rirs)
        np.testing.assert_allclose(b.mixture, 2.5 * a.mixture, atol=1e-6)

    def test_realized_overlap_ratio(self):
        sc = sample_scene(5, duration=0.5)
        rirs = render_rirs(sc, beta=0.0)
        res = synthesize_mixture(sc, _active_sources(sc), rirs=rirs)
        both = np.all(res.activity, axis=0).mean()
        assert abs(both - sc.overlap_ratio) < 0.02

    def test_realized_snr(self):
        sc = sample_scene(6, duration=0.5)
        rirs = render_rirs(sc, beta=0.0)
        res = synthesize_mixture(sc, _active_sources(sc), rirs=rirs)
        region = res.activity[1]
        e_ref = np.sum(res.targets[0][region].astype(np.float64) ** 2)
        e_two = np.sum(res.targets[1][region].astype(np.float64) ** 2)
        snr = 10.0 * np.log10(e_ref / e_two)
        assert abs(snr - sc.snr_db) < 0.01

    def test_silent_source_rejected(self):
        sc = sample_scene(7, duration=0.5)
        s = _active_sources(sc)
        s[1] = 0.0
        with pytest.raises(ValueError, match="silent"):
            synthesize_mixture(sc, s, rirs=render_rirs(sc, beta=0.0))

    def test_dereverb_targets_use_early_rir(self):
        sc = sample_scene(8, duration=0.5)
        rirs = render_rirs(sc, beta=0.6)
        s = _active_sources(sc)
        full = synthesize_mixture(sc, s, rirs=rirs, dereverb=False)
        early = synthesize_mixture(sc, s, rirs=rirs, dereverb=True)
        np.testing.assert_array_equal(full.mixture, early.mixture)
        assert np.max(np.abs(full.targets - early.targets)) > 0


class TestMakeDataset:
    def test_deterministic_regeneration(self, tmp_path):
        kw = dict(n_train=2, n_val=1, n_test=1, seed=5, duration=0.25,
                  anechoic=True, single_channel=True)
        make_dataset(tmp_path / "a", **kw)
        make_dataset(tmp_path / "b", **kw)
        assert dataset_digest(tmp_path / "a") == dataset_digest(tmp_path / "b")

    def test_manifest_and_loading(self, tmp_path):
        manifests = make_dataset(tmp_path, n_train=2, n_val=1, n_test=1,
                                 seed=9, duration=0.25, anechoic=True)
        data = load_dataset(manifests["train"])
        assert len(data) == 2
        mix, refs = data[0]
        assert mix.shape == (5, 2000)
        assert refs.shape == (2, 2000)

    def test_single_channel_flag(self, tmp_path):
        manifests = make_dataset(tmp_path, n_train=1, n_val=1, n_test=1,
                                 seed=10, duration=0.25, anechoic=True,
                                 single_channel=True)
        mix, _ = load_dataset(manifests["train"])[0]
        assert mix.shape[0] == 1

    def test_pool_too_small(self, tmp_path):
        with pytest.raises(ValueError, match="pool"):
            make_dataset(tmp_path, n_train=1, n_val=0, n_test=0,
                         source_pool=[np.ones(100)])
