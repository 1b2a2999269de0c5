"""Acoustic frontend: log-mel framing, alignment, norm profiles, adapter contract."""

import numpy as np
import pytest

from lipsynth.corpus import SpeechTrack
from lipsynth.errors import ContractError, ValidationError
from lipsynth.speech import (
    LogMelAdapter,
    MelConfig,
    NormProfile,
    SpeechEncoderAdapter,
    SpeechFeatures,
    adapter_from_spec,
    adapter_spec,
    align_to_motion,
    compute_norm_profile,
    extract_checked,
    mel_features,
    mel_filterbank,
)


def tone(seconds=1.0, sr=16000, freq=440.0, amp=0.3):
    t = np.arange(int(seconds * sr)) / sr
    return SpeechTrack(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=sr)


class TestMelFeatures:
    def test_frame_count_one_second(self):
        feats = mel_features(tone(1.0))
        # 1 + floor((16000 - 400) / 160)
        assert feats.features.shape == (98, 80)
        assert feats.feature_rate == pytest.approx(100.0)

    def test_track_shorter_than_window_rejected(self):
        with pytest.raises(ValidationError, match="window"):
            mel_features(SpeechTrack(np.zeros(100), 16000))

    def test_silence_gives_constant_finite_frames(self):
        feats = mel_features(SpeechTrack(np.zeros(8000), 16000)).features
        assert np.isfinite(feats).all()
        np.testing.assert_array_equal(feats, np.broadcast_to(feats[0], feats.shape))

    def test_deterministic(self):
        a = mel_features(tone(0.5)).features
        b = mel_features(tone(0.5)).features
        np.testing.assert_array_equal(a, b)

    def test_energy_lands_near_tone_band(self):
        quiet = mel_features(tone(0.5, freq=440.0, amp=0.01)).features
        loud = mel_features(tone(0.5, freq=440.0, amp=0.5)).features
        assert loud.max() > quiet.max()


class TestMelFilterbank:
    def test_shape_and_support(self):
        fb = mel_filterbank(40, 512, 16000, 0.0, 8000.0)
        assert fb.shape == (40, 257)
        assert (fb >= 0).all()
        assert (fb.sum(axis=1) > 0).all()


class TestAlignToMotion:
    def test_identity_when_grids_match(self):
        feats = SpeechFeatures(np.random.default_rng(2).normal(size=(30, 5)), 25.0)
        out = align_to_motion(feats, 30, 25.0)
        np.testing.assert_allclose(out, feats.features, atol=1e-6)

    def test_two_rows_to_three_frames(self):
        feats = SpeechFeatures(np.array([[0.0], [2.0]]), 10.0)
        out = align_to_motion(feats, 3, 15.0)
        np.testing.assert_allclose(out[:, 0], [0.0, 1.0, 2.0], atol=1e-7)

    def test_single_target_frame_is_midpoint(self):
        feats = SpeechFeatures(np.array([[0.0], [2.0]]), 10.0)
        out = align_to_motion(feats, 1, 25.0)
        np.testing.assert_allclose(out[:, 0], [1.0], atol=1e-7)

    def test_endpoints_clamped(self):
        feats = SpeechFeatures(np.array([[1.0], [3.0]]), 10.0)
        out = align_to_motion(feats, 8, 80.0)
        assert out[0, 0] == pytest.approx(1.0)
        assert out[-1, 0] == pytest.approx(3.0)

    def test_convexity_preserves_channel_bounds(self, rng):
        for _ in range(50):
            t_a = int(rng.integers(1, 40))
            t = int(rng.integers(1, 40))
            feats = SpeechFeatures(rng.normal(size=(t_a, 3)), 100.0)
            out = align_to_motion(feats, t, 25.0)
            assert out.shape == (t, 3)
            lo = feats.features.min(axis=0) - 1e-6
            hi = feats.features.max(axis=0) + 1e-6
            assert (out >= lo).all() and (out <= hi).all()

    def test_bad_target_rejected(self):
        feats = SpeechFeatures(np.zeros((4, 2)), 10.0)
        with pytest.raises(ValidationError):
            align_to_motion(feats, 0, 25.0)


class TestNormProfile:
    def test_normalized_features_are_standardized(self):
        # broadband noise so every mel band carries real variance
        rng = np.random.default_rng(7)
        tracks = [
            SpeechTrack(rng.uniform(-0.5, 0.5, 8000).astype(np.float32), 16000)
            for _ in range(3)
        ]
        cfg = MelConfig(n_mels=24)
        norm = compute_norm_profile(tracks, cfg)
        pooled = np.concatenate(
            [mel_features(t, cfg, norm).features for t in tracks], axis=0
        )
        np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-3)
        np.testing.assert_allclose(pooled.std(axis=0), 1.0, atol=1e-3)

    def test_save_load_round_trip(self, tmp_path):
        norm = NormProfile(mean=np.arange(4.0), std=np.ones(4))
        norm.save(tmp_path / "norm.json")
        back = NormProfile.load(tmp_path / "norm.json")
        np.testing.assert_array_equal(back.mean, norm.mean)
        np.testing.assert_array_equal(back.std, norm.std)

    def test_band_count_mismatch_rejected(self):
        norm = NormProfile(mean=np.zeros(10), std=np.ones(10))
        with pytest.raises(ValidationError, match="bands"):
            mel_features(tone(0.5), MelConfig(n_mels=24), norm)

    def test_empty_track_list_rejected(self):
        with pytest.raises(ValidationError, match="no tracks"):
            compute_norm_profile([])


class LyingAdapter(SpeechEncoderAdapter):
    """Declares one shape, produces another. For contract tests."""

    name = "liar"
    feature_dim = 8
    feature_rate = 100.0

    def __init__(self, wrong_dim=False, wrong_rate=False):
        self.wrong_dim = wrong_dim
        self.wrong_rate = wrong_rate
        self.reentrant = True

    def extract(self, track):
        dim = self.feature_dim + (2 if self.wrong_dim else 0)
        rate = self.feature_rate + (5.0 if self.wrong_rate else 0.0)
        return SpeechFeatures(np.zeros((10, dim), dtype=np.float32), rate)


class TestAdapterContract:
    def test_honest_adapter_passes(self):
        feats = extract_checked(LogMelAdapter(config=MelConfig(n_mels=20)), tone(0.3))
        assert feats.dim == 20

    def test_dim_violation_rejected_at_boundary(self):
        with pytest.raises(ContractError, match="d_s"):
            extract_checked(LyingAdapter(wrong_dim=True), tone(0.3))

    def test_rate_violation_rejected_at_boundary(self):
        with pytest.raises(ContractError, match="feature_rate"):
            extract_checked(LyingAdapter(wrong_rate=True), tone(0.3))

    def test_non_reentrant_adapter_serialized(self):
        adapter = LogMelAdapter(config=MelConfig(n_mels=12))
        adapter.reentrant = False
        feats = extract_checked(adapter, tone(0.3))
        assert feats.dim == 12


class TestAdapterSpec:
    def test_round_trip_preserves_outputs(self):
        cfg = MelConfig(n_mels=16, hop_s=0.02)
        norm = NormProfile(mean=np.zeros(16), std=np.ones(16))
        adapter = LogMelAdapter(config=cfg, norm=norm)
        rebuilt = adapter_from_spec(adapter_spec(adapter))
        track = tone(0.4)
        np.testing.assert_array_equal(
            rebuilt.extract(track).features, adapter.extract(track).features
        )

    def test_unknown_spec_rejected(self):
        with pytest.raises(ValidationError, match="adapter spec"):
            adapter_from_spec({"kind": "martian"})

    def test_foreign_adapter_has_no_spec(self):
        with pytest.raises(ValidationError, match="serializable"):
            adapter_spec(LyingAdapter())
