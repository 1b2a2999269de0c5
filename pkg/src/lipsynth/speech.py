"""Acoustic frontend: log-mel features, cross-modal time alignment, encoder adapters.

The built-in featurizer is a deterministic log-mel filterbank so the whole
stack runs hermetically. A pretrained multilingual encoder can be plugged in
through :class:`SpeechEncoderAdapter` without touching the rest of the code.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import SpeechTrack
from .errors import ContractError, ValidationError

LOG_FLOOR = 1e-10


@dataclass
class SpeechFeatures:
    """Frame-aligned acoustic feature matrix, T_a x d_s at ``feature_rate`` fps."""

    features: np.ndarray
    feature_rate: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(f"features: expected (T_a >= 1, d_s) matrix, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValidationError("features: non-finite value")
        if not self.feature_rate > 0:
            raise ValidationError(f"feature_rate: must be > 0, got {self.feature_rate}")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class MelConfig:
    window_s: float = 0.025
    hop_s: float = 0.010
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist


@dataclass
class NormProfile:
    """Per-corpus mel mean/variance normalization, stored next to the manifest."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValidationError("norm profile: mean/std must be matching 1-D vectors")

    def save(self, path) -> None:
        doc = {"mean": self.mean.tolist(), "std": self.std.tolist()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NormProfile":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(mean=np.array(doc["mean"]), std=np.array(doc["std"]))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters (n_mels, 1 + n_fft // 2)."""
    bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, bins)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb.astype(np.float32)


def mel_features(track: SpeechTrack, config: MelConfig = MelConfig(), norm: NormProfile | None = None) -> SpeechFeatures:
    """Log-mel features: T_a = 1 + floor((len - window) / hop) frames.

    Silence comes out as a constant finite frame thanks to the log floor.
    """
    sr = track.sample_rate
    window = int(round(config.window_s * sr))
    hop = int(round(config.hop_s * sr))
    x = track.samples.astype(np.float64)
    if x.size < window:
        raise ValidationError(
            f"track too short: {x.size} samples < one {window}-sample window"
        )
    n_frames = 1 + (x.size - window) // hop
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hanning(window)[None, :]
    n_fft = 1 << (window - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fmax = config.fmax if config.fmax is not None else sr / 2.0
    fb = mel_filterbank(config.n_mels, n_fft, sr, config.fmin, fmax)
    mel = power @ fb.T.astype(np.float64)
    feats = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    if norm is not None:
        if norm.mean.shape[0] != feats.shape[1]:
            raise ValidationError(
                f"norm profile has {norm.mean.shape[0]} bands, features have {feats.shape[1]}"
            )
        feats = (feats - norm.mean) / np.maximum(norm.std, 1e-6)
    return SpeechFeatures(features=feats, feature_rate=sr / hop)


def compute_norm_profile(tracks, config: MelConfig = MelConfig()) -> NormProfile:
    """Mean/std over the un-normalized mel frames of an iterable of tracks."""
    frames = [mel_features(t, config).features for t in tracks]
    if not frames:
        raise ValidationError("norm profile: no tracks supplied")
    stacked = np.concatenate(frames, axis=0)
    return NormProfile(mean=stacked.mean(axis=0), std=stacked.std(axis=0))


def align_to_motion(features: SpeechFeatures, target_frames: int, target_fps: float) -> np.ndarray:
    """Resample features onto a motion-frame grid by linear interpolation.

    Source rows and target frames are placed at their normalized temporal
    centers over the common clip span; endpoints are clamped. Preserves
    per-channel min/max bounds (convex combination of rows).
    """
    if target_frames < 1:
        raise ValidationError(f"target_frames: must be >= 1, got {target_frames}")
    if not target_fps > 0:
        raise ValidationError(f"target_fps: must be > 0, got {target_fps}")
    feats = features.features
    t_a = feats.shape[0]
    src = (np.arange(t_a) + 0.5) / t_a
    dst = (np.arange(target_frames) + 0.5) / target_frames
    out = np.empty((target_frames, feats.shape[1]), dtype=np.float32)
    for ch in range(feats.shape[1]):
        out[:, ch] = np.interp(dst, src, feats[:, ch].astype(np.float64))
    return out


class SpeechEncoderAdapter:
    """Interface for pluggable speech encoders.

    Subclasses declare name, feature dim, feature rate, and whether calls are
    reentrant; ``extract`` maps a SpeechTrack to SpeechFeatures.
    """

    name: str = "abstract"
    feature_dim: int = 0
    feature_rate: float = 0.0
    reentrant: bool = True

    def extract(self, track: SpeechTrack) -> SpeechFeatures:
        raise NotImplementedError


@dataclass
class LogMelAdapter(SpeechEncoderAdapter):
    """Default hermetic adapter: the deterministic log-mel featurizer."""

    config: MelConfig = field(default_factory=MelConfig)
    norm: NormProfile | None = None
    name: str = "logmel"
    reentrant: bool = True

    @property
    def feature_dim(self) -> int:
        return self.config.n_mels

    @property
    def feature_rate(self) -> float:
        return 1.0 / self.config.hop_s

    def extract(self, track: SpeechTrack) -> SpeechFeatures:
        return mel_features(track, self.config, self.norm)


_adapter_locks: dict[int, threading.Lock] = {}


def extract_checked(adapter: SpeechEncoderAdapter, track: SpeechTrack) -> SpeechFeatures:
    """Run an adapter and enforce its declared (d_s, feature_rate) contract.

    Non-reentrant adapters are serialized behind a per-adapter lock.
    """
    if adapter.reentrant:
        feats = adapter.extract(track)
    else:
        lock = _adapter_locks.setdefault(id(adapter), threading.Lock())
        with lock:
            feats = adapter.extract(track)
    if feats.dim != adapter.feature_dim:
        raise ContractError(
            f"adapter {adapter.name!r} declared d_s={adapter.feature_dim} but produced {feats.dim}"
        )
    if abs(feats.feature_rate - adapter.feature_rate) > 1e-6:
        raise ContractError(
            f"adapter {adapter.name!r} declared feature_rate={adapter.feature_rate} "
            f"but produced {feats.feature_rate}"
        )
    return feats


def adapter_spec(adapter: SpeechEncoderAdapter) -> dict:
    """Serializable description of an adapter, for embedding in checkpoints."""
    if isinstance(adapter, LogMelAdapter):
        spec = {"kind": "logmel", "mel": asdict(adapter.config)}
        if adapter.norm is not None:
            spec["norm"] = {
                "mean": adapter.norm.mean.astype(float).tolist(),
                "std": adapter.norm.std.astype(float).tolist(),
            }
        return spec
    raise ValidationError(f"adapter {adapter.name!r} has no serializable spec")


def adapter_from_spec(spec: dict) -> SpeechEncoderAdapter:
    """Rebuild the adapter a checkpoint was trained with."""
    if not isinstance(spec, dict) or spec.get("kind") != "logmel":
        raise ValidationError(f"unknown adapter spec {spec!r}")
    norm = None
    if spec.get("norm") is not None:
        norm = NormProfile(
            mean=np.asarray(spec["norm"]["mean"], dtype=np.float32),
            std=np.asarray(spec["norm"]["std"], dtype=np.float32),
        )
    return LogMelAdapter(config=MelConfig(**spec["mel"]), norm=norm)
