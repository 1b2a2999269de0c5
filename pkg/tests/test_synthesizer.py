"""Stage-2 synthesizer: causality, style conditioning, generation, training."""

import numpy as np
import pytest
import torch

from lipsynth.errors import (
    FormatError,
    UnknownLanguageError,
    ValidationError,
)
from lipsynth.corpus import SpeechTrack
from lipsynth.speech import LogMelAdapter, MelConfig, SpeechFeatures
from lipsynth.synthesizer import (
    MotionSynthesizer,
    Stage2TrainConfig,
    SynthesizerConfig,
    generate_motion,
    generation_loss,
    load_stage2,
    save_stage2,
    synthesize_clip,
    train_stage2,
)
from lipsynth.vqvae import (
    MotionVQVAE,
    Stage1TrainConfig,
    VQVAEConfig,
    save_stage1,
    train_stage1,
)

LANGS = ["x-a", "x-b"]


def tiny_config(**kw):
    base = dict(
        speech_dim=6,
        languages=list(LANGS),
        latent_dim=4,
        width=16,
        layers=1,
        heads=2,
        ff_width=32,
        style_dim=4,
    )
    base.update(kw)
    return SynthesizerConfig(**base)


def tiny_synth(seed=0, **kw):
    torch.manual_seed(seed)
    model = MotionSynthesizer(tiny_config(**kw))
    model.eval()
    return model


def tiny_codebook_model(seed=1):
    torch.manual_seed(seed)
    model = MotionVQVAE(
        VQVAEConfig(
            n_vertices=60,
            codebook_size=16,
            latent_dim=4,
            stride=2,
            width=16,
            layers=1,
            heads=2,
            ff_width=32,
        )
    )
    model.eval()
    return model


class TestConfig:
    def test_empty_languages_rejected(self):
        with pytest.raises(ValidationError, match="non-empty"):
            tiny_config(languages=[])

    def test_duplicate_languages_rejected(self):
        with pytest.raises(ValidationError, match="duplicates"):
            tiny_config(languages=["x-a", "x-a"])

    def test_width_heads_divisibility(self):
        with pytest.raises(ValidationError, match="heads"):
            tiny_config(width=30, heads=4)


class TestStyleTable:
    def test_each_language_has_a_row(self):
        model = tiny_synth()
        assert model.style_index("x-a") == 0
        assert model.style_index("x-b") == 1

    def test_unknown_language_raises(self):
        model = tiny_synth()
        with pytest.raises(UnknownLanguageError, match="x-z"):
            model.style_index("x-z")

    def test_mean_fallback_is_opt_in(self):
        model = tiny_synth()
        with pytest.raises(UnknownLanguageError):
            model.style_embedding("x-z")
        fallback = model.style_embedding("x-z", allow_unseen=True)
        expected = model.style_table.weight.mean(dim=0)
        assert torch.allclose(fallback, expected)

    def test_style_disabled_collapses_to_shared_row(self):
        model = tiny_synth(use_style=False)
        assert model.style_table.weight.shape[0] == 1
        assert model.style_index("x-a") == model.style_index("x-b") == 0


class TestPredict:
    def test_output_shape(self):
        model = tiny_synth()
        speech = torch.randn(5, 6)
        context = torch.randn(4, 4)
        with torch.no_grad():
            out = model.predict(speech, context, "x-a", steps=5)
        assert out.shape == (5, 4)

    def test_steps_must_extend_context_by_one(self):
        model = tiny_synth()
        with pytest.raises(ValidationError, match="plus one"):
            model.predict(torch.randn(5, 6), torch.randn(4, 4), "x-a", steps=4)

    def test_speech_width_checked(self):
        model = tiny_synth()
        with pytest.raises(ValidationError, match="speech memory"):
            model.predict(torch.randn(5, 9), torch.randn(0, 4), "x-a", steps=1)

    def test_causal_mask_blocks_future_context(self):
        model = tiny_synth(seed=3)
        speech = torch.randn(6, 6)
        context = torch.randn(5, 4)
        with torch.no_grad():
            base = model.predict(speech, context, "x-a", steps=6)
            bumped = context.clone()
            bumped[3] += 10.0  # visible to outputs 4.. only
            out = model.predict(speech, bumped, "x-a", steps=6)
        assert torch.equal(out[:4], base[:4])
        assert not torch.allclose(out[4:], base[4:])

    def test_speech_memory_is_global(self):
        # cross-attention sees the whole utterance by design
        model = tiny_synth(seed=3)
        speech = torch.randn(6, 6)
        context = torch.randn(2, 4)
        with torch.no_grad():
            base = model.predict(speech, context, "x-a", steps=3)
            bumped = speech.clone()
            bumped[5] += 10.0
            out = model.predict(bumped, context, "x-a", steps=3)
        assert not torch.allclose(out, base)

    def test_style_zeroing_is_language_local(self):
        model = tiny_synth(seed=4)
        speech = torch.randn(4, 6)
        context = torch.randn(3, 4)
        with torch.no_grad():
            a0 = model.predict(speech, context, "x-a", steps=4)
            b0 = model.predict(speech, context, "x-b", steps=4)
            model.style_table.weight[model.style_index("x-a")].zero_()
            a1 = model.predict(speech, context, "x-a", steps=4)
            b1 = model.predict(speech, context, "x-b", steps=4)
        assert not torch.allclose(a0, a1)
        assert torch.equal(b0, b1)

    def test_languages_give_distinct_outputs(self):
        model = tiny_synth(seed=5)
        speech = torch.randn(4, 6)
        context = torch.randn(3, 4)
        with torch.no_grad():
            assert not torch.allclose(
                model.predict(speech, context, "x-a", steps=4),
                model.predict(speech, context, "x-b", steps=4),
            )


class TestGenerationLoss:
    def test_identity_zero(self):
        z = torch.randn(3, 4)
        v = torch.randn(6, 5, 3)
        total, parts = generation_loss(z, z.clone(), v, v.clone())
        assert total.item() == 0.0
        assert parts["latent"] == parts["vertex"] == 0.0

    def test_worked_example(self):
        predicted = torch.tensor([[0.5, 0.0]])
        snapped = torch.zeros(1, 2)
        recon = torch.full((2, 5, 3), 0.2)
        target = torch.zeros(2, 5, 3)
        total, parts = generation_loss(predicted, snapped, recon, target)
        assert parts["latent"] == pytest.approx(0.125)
        assert parts["vertex"] == pytest.approx(0.04, rel=1e-6)
        assert total.item() == pytest.approx(0.165, rel=1e-6)

    def test_vertex_term_scales_quadratically(self):
        predicted = snapped = torch.zeros(1, 2)
        target = torch.zeros(2, 5, 3)
        one = generation_loss(predicted, snapped, torch.full((2, 5, 3), 0.1), target)[1]
        two = generation_loss(predicted, snapped, torch.full((2, 5, 3), 0.2), target)[1]
        assert two["vertex"] == pytest.approx(4 * one["vertex"], rel=1e-6)
        assert two["latent"] == one["latent"] == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            generation_loss(torch.zeros(1, 2), torch.zeros(2, 2), torch.zeros(1, 1, 3), torch.zeros(1, 1, 3))


class TestGeneration:
    def test_emits_codebook_rows_with_right_frame_count(self):
        synth = tiny_synth(seed=6)
        cb = tiny_codebook_model()
        feats = SpeechFeatures(np.random.default_rng(0).normal(size=(40, 6)), 100.0)
        motion, indices = generate_motion(synth, cb, feats, "x-a", n_frames=21, fps=25.0)
        assert motion.frames == 21
        assert motion.fps == 25.0
        assert indices.shape == (11,)  # ceil(21 / 2) latent steps
        assert indices.min() >= 0 and indices.max() < 16

    def test_deterministic(self):
        synth = tiny_synth(seed=6)
        cb = tiny_codebook_model()
        feats = SpeechFeatures(np.random.default_rng(1).normal(size=(30, 6)), 100.0)
        a, idx_a = generate_motion(synth, cb, feats, "x-a", n_frames=10, fps=25.0)
        b, idx_b = generate_motion(synth, cb, feats, "x-a", n_frames=10, fps=25.0)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(idx_a, idx_b)

    def test_zero_frames_rejected(self):
        synth = tiny_synth()
        cb = tiny_codebook_model()
        feats = SpeechFeatures(np.zeros((10, 6)), 100.0)
        with pytest.raises(ValidationError, match="n_frames"):
            generate_motion(synth, cb, feats, "x-a", n_frames=0, fps=25.0)

    def test_unknown_language_refused_without_flag(self):
        synth = tiny_synth()
        cb = tiny_codebook_model()
        feats = SpeechFeatures(np.zeros((10, 6)), 100.0)
        with pytest.raises(UnknownLanguageError):
            generate_motion(synth, cb, feats, "x-q", n_frames=4, fps=25.0)
        motion, _ = generate_motion(
            synth, cb, feats, "x-q", n_frames=4, fps=25.0, allow_unseen=True
        )
        assert motion.frames == 4


class TestSynthesizeClip:
    def test_two_seconds_at_25_fps_gives_50_frames(self):
        adapter = LogMelAdapter(config=MelConfig(n_mels=6))
        synth = tiny_synth(seed=7)
        cb = tiny_codebook_model()
        track = SpeechTrack(0.1 * np.sin(np.linspace(0, 800, 32000)), 16000)
        motion = synthesize_clip(synth, cb, adapter, track, "x-a", fps=25.0)
        assert motion.frames == 50


@pytest.fixture(scope="module")
def trained_pair(tiny_corpus):
    """One tiny stage-1 + stage-2 training shared by the training tests."""
    mc1 = VQVAEConfig(
        n_vertices=60, codebook_size=16, latent_dim=8, stride=2,
        width=32, layers=1, heads=2, ff_width=64,
    )
    cb, _ = train_stage1(tiny_corpus, mc1, Stage1TrainConfig(epochs=1, seed=0))
    adapter = LogMelAdapter(config=MelConfig(n_mels=12))
    mc2 = SynthesizerConfig(
        speech_dim=12, languages=["x-a", "x-b"], latent_dim=8,
        width=16, layers=1, heads=2, ff_width=32, style_dim=4,
    )
    synth, history = train_stage2(
        tiny_corpus, cb, adapter, mc2, Stage2TrainConfig(epochs=2, seed=3)
    )
    return cb, adapter, mc2, synth, history


class TestTraining:
    def test_history_shape(self, trained_pair):
        _, _, _, _, history = trained_pair
        assert len(history) == 2
        assert set(history[0]) == {"epoch", "total", "latent", "vertex"}
        assert all(np.isfinite(r["total"]) for r in history)

    def test_stage1_parameters_frozen_bit_identical(self, tiny_corpus, trained_pair):
        cb, adapter, mc2, _, _ = trained_pair
        before = {k: v.clone() for k, v in cb.state_dict().items()}
        train_stage2(tiny_corpus, cb, adapter, mc2, Stage2TrainConfig(epochs=1, seed=5))
        for k, v in cb.state_dict().items():
            assert torch.equal(before[k], v), f"stage-1 tensor {k} changed"

    def test_same_seed_same_history(self, tiny_corpus, trained_pair):
        cb, adapter, mc2, _, _ = trained_pair
        _, h1 = train_stage2(tiny_corpus, cb, adapter, mc2, Stage2TrainConfig(epochs=1, seed=9))
        _, h2 = train_stage2(tiny_corpus, cb, adapter, mc2, Stage2TrainConfig(epochs=1, seed=9))
        assert h1 == h2

    def test_corpus_language_missing_from_config_rejected(self, tiny_corpus, trained_pair):
        cb, adapter, _, _, _ = trained_pair
        mc2 = SynthesizerConfig(
            speech_dim=12, languages=["x-a"], latent_dim=8,
            width=16, layers=1, heads=2, ff_width=32,
        )
        with pytest.raises(ValidationError, match="missing"):
            train_stage2(tiny_corpus, cb, adapter, mc2, Stage2TrainConfig(epochs=1))

    def test_style_gradients_stay_in_their_language(self):
        model = tiny_synth(seed=11, latent_dim=8, speech_dim=12)
        model.train()
        speech = torch.randn(5, 12)
        gt_context = torch.randn(5, 8)
        pred = model(speech, gt_context, "x-a")
        pred.pow(2).mean().backward()
        grad = model.style_table.weight.grad
        assert grad is not None
        assert grad[model.language_index["x-a"]].abs().sum() > 0
        assert torch.equal(grad[model.language_index["x-b"]], torch.zeros_like(grad[1]))


class TestCheckpoint:
    def test_round_trip_generates_identically(self, tmp_path, trained_pair):
        cb, adapter, _, synth, history = trained_pair
        save_stage2(synth, tmp_path / "s.pt", seed=3, history=history)
        back, blob = load_stage2(tmp_path / "s.pt")
        assert blob["seed"] == 3
        assert blob["loss_history"] == history
        feats = SpeechFeatures(np.random.default_rng(2).normal(size=(20, 12)), 100.0)
        a, _ = generate_motion(synth, cb, feats, "x-a", n_frames=8, fps=25.0)
        b, _ = generate_motion(back, cb, feats, "x-a", n_frames=8, fps=25.0)
        np.testing.assert_array_equal(a.vertices, b.vertices)

    def test_stage1_pairing_verified_by_hash(self, tmp_path, trained_pair):
        cb, _, _, synth, history = trained_pair
        save_stage1(cb, tmp_path / "cb.pt", seed=0, history=[])
        save_stage2(synth, tmp_path / "s.pt", seed=3, history=history, stage1_path=tmp_path / "cb.pt")
        load_stage2(tmp_path / "s.pt", stage1_path=tmp_path / "cb.pt")  # matches
        other = tiny_codebook_model(seed=9)
        save_stage1(other, tmp_path / "other.pt", seed=9, history=[])
        with pytest.raises(ValidationError, match="mismatch"):
            load_stage2(tmp_path / "s.pt", stage1_path=tmp_path / "other.pt")

    def test_wrong_kind_rejected(self, tmp_path, trained_pair):
        cb, _, _, _, _ = trained_pair
        save_stage1(cb, tmp_path / "cb.pt", seed=0, history=[])
        with pytest.raises(FormatError, match="motion-synthesizer"):
            load_stage2(tmp_path / "cb.pt")
