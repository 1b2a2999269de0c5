"""Synthetic viseme corpus: low-poly rigs, symbolic languages, tone audio, oracle recognizer.

The generator stands in for a real captured corpus so training and the
lip-readability metrics can be verified end to end on a desk. Languages are
symbol sets with per-symbol audio signatures and symbol-to-viseme maps; in
``conflicting`` mode several languages share identical audio signatures but
map them to different visemes, so audio alone cannot determine the mouth
shape and only a language-conditioned model can resolve it.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    ClipRecord,
    CorpusManifest,
    MotionSequence,
    SpeechTrack,
    save_manifest,
    write_audio,
    write_motion,
)
from .errors import ValidationError
from .metrics import Recognizer

RIG_FILE = "rig.json"
LANGUAGES_FILE = "languages.json"
MANIFEST_FILE = "corpus.json"


@dataclass
class VisemeRig:
    """Abstract face rig: base mesh plus per-viseme lip offsets.

    Deltas are zero outside the lip region and pairwise well separated on it,
    so every viseme is decodable from geometry alone.
    """

    rig_id: str
    base_mesh: np.ndarray  # (N, 3)
    lip_vertex_indices: list[int]
    viseme_deltas: np.ndarray  # (V, N, 3)
    min_separation: float = 1.0

    def __post_init__(self):
        self.base_mesh = np.asarray(self.base_mesh, dtype=np.float32)
        self.viseme_deltas = np.asarray(self.viseme_deltas, dtype=np.float32)
        n = self.base_mesh.shape[0]
        if self.base_mesh.ndim != 2 or self.base_mesh.shape[1] != 3:
            raise ValidationError(f"base_mesh: expected (N, 3), got {self.base_mesh.shape}")
        if self.viseme_deltas.ndim != 3 or self.viseme_deltas.shape[1:] != (n, 3):
            raise ValidationError(f"viseme_deltas: expected (V, {n}, 3), got {self.viseme_deltas.shape}")
        lips = np.asarray(self.lip_vertex_indices, dtype=np.int64)
        if lips.size == 0 or lips.min() < 0 or lips.max() >= n:
            raise ValidationError("lip_vertex_indices: empty or out of range")
        mask = np.ones(n, dtype=bool)
        mask[lips] = False
        if np.abs(self.viseme_deltas[:, mask, :]).max(initial=0.0) > 0:
            raise ValidationError("viseme_deltas: nonzero offset outside the lip region")
        lip_block = self.viseme_deltas[:, lips, :].reshape(self.viseme_count, -1)
        for i in range(self.viseme_count):
            for j in range(i + 1, self.viseme_count):
                d = float(np.linalg.norm(lip_block[i] - lip_block[j]))
                if d <= self.min_separation:
                    raise ValidationError(
                        f"viseme_deltas: visemes {i} and {j} too close on the lip region ({d:.3g})"
                    )

    @property
    def vertex_count(self) -> int:
        return self.base_mesh.shape[0]

    @property
    def viseme_count(self) -> int:
        return self.viseme_deltas.shape[0]


@dataclass
class ToneSpec:
    """Deterministic audio signature: a band-limited tone complex."""

    freqs: list[float]
    amps: list[float]

    def render(self, t: np.ndarray) -> np.ndarray:
        out = np.zeros_like(t)
        for f, a in zip(self.freqs, self.amps):
            out += a * np.sin(2.0 * np.pi * f * t)
        return out


@dataclass
class SyntheticLanguage:
    tag: str
    symbols: list[str]
    viseme_map: dict[str, int]
    signatures: dict[str, ToneSpec]
    symbol_duration: float = 0.24

    def __post_init__(self):
        if not self.symbols:
            raise ValidationError(f"language {self.tag}: empty symbol set")
        for s in self.symbols:
            if s not in self.viseme_map:
                raise ValidationError(f"language {self.tag}: symbol {s!r} has no viseme")
            if s not in self.signatures:
                raise ValidationError(f"language {self.tag}: symbol {s!r} has no audio signature")
        f0s = [self.signatures[s].freqs[0] for s in self.symbols]
        if len(f0s) > 1 and min(
            abs(a - b) for i, a in enumerate(f0s) for b in f0s[i + 1 :]
        ) < 5.0:
            raise ValidationError(f"language {self.tag}: audio signatures not distinguishable")

    def inverse_viseme_map(self) -> dict[int, str]:
        return {v: s for s, v in self.viseme_map.items()}


def make_rig(
    seed: int = 0,
    n_vertices: int = 60,
    n_lip: int = 20,
    n_visemes: int = 8,
    amplitude: float = 6.0,
) -> VisemeRig:
    """Seeded rig with orthogonal equal-norm viseme patterns on the lip block."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7269]))
    base = rng.normal(0.0, 30.0, size=(n_vertices, 3))
    lips = list(range(n_vertices - n_lip, n_vertices))
    raw = rng.normal(size=(n_lip * 3, n_visemes))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))[None, :]  # fix QR sign ambiguity for reproducibility
    deltas = np.zeros((n_visemes, n_vertices, 3), dtype=np.float64)
    deltas[:, lips, :] = (q.T * amplitude).reshape(n_visemes, n_lip, 3)
    return VisemeRig(
        rig_id=f"synthrig-n{n_vertices}-v{n_visemes}-s{seed}",
        base_mesh=base,
        lip_vertex_indices=lips,
        viseme_deltas=deltas,
    )


def make_languages(
    n_languages: int,
    seed: int = 0,
    n_symbols: int = 6,
    n_visemes: int = 8,
    conflicting: bool = True,
    symbol_duration: float = 0.24,
) -> list[SyntheticLanguage]:
    """Build symbolic languages.

    conflicting=True: all languages share one symbol set and one set of audio
    signatures but map each symbol to a different viseme (cyclic shift), so
    speech audio alone is ambiguous between languages. conflicting=False:
    disjoint symbol sets with disjoint signatures.
    """
    if n_symbols > n_visemes:
        raise ValidationError(f"n_symbols={n_symbols} exceeds n_visemes={n_visemes}")
    letters = "abcdefghijklmnopqrstuvwxyz"
    if not conflicting and n_languages * n_symbols > len(letters):
        raise ValidationError("too many languages for disjoint symbol sets")

    def signature(global_idx: int) -> ToneSpec:
        # linear spacing keeps the 3rd harmonic under Nyquist at 16 kHz for
        # every index reachable with 26 letters
        f0 = 240.0 + 95.0 * global_idx
        return ToneSpec(freqs=[f0, 2.0 * f0, 3.0 * f0], amps=[0.30, 0.18, 0.12])

    langs = []
    for li in range(n_languages):
        tag = f"x-{letters[li]}"
        if conflicting:
            symbols = list(letters[:n_symbols])
            sigs = {s: signature(j) for j, s in enumerate(symbols)}
            vmap = {s: (j + li) % n_visemes for j, s in enumerate(symbols)}
        else:
            symbols = list(letters[li * n_symbols : (li + 1) * n_symbols])
            sigs = {s: signature(li * n_symbols + j) for j, s in enumerate(symbols)}
            vmap = {s: j for j, s in enumerate(symbols)}
        langs.append(
            SyntheticLanguage(
                tag=tag,
                symbols=symbols,
                viseme_map=vmap,
                signatures=sigs,
                symbol_duration=symbol_duration,
            )
        )
    return langs


def _clip_rng(master_seed: int, clip_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, zlib.crc32(clip_id.encode())]))


def synth_clip(
    symbols,
    language: SyntheticLanguage,
    rig: VisemeRig,
    fps: float = 25.0,
    sample_rate: int = 16000,
    seed: int = 0,
    fade_s: float = 0.08,
    noise_std: float = 0.004,
) -> tuple[MotionSequence, SpeechTrack, list[str]]:
    """Render one clip: viseme motion with cosine cross-fades plus tone audio.

    Frame k sits at time k / fps. Inside a symbol the full viseme delta is
    applied; within ``fade_s`` of a symbol boundary the neighboring deltas are
    cosine cross-faded (weight 0.5 each exactly at the boundary).
    """
    tokens = list(symbols)
    if not tokens:
        raise ValidationError("synth_clip: empty symbol string")
    for s in tokens:
        if s not in language.viseme_map:
            raise ValidationError(f"synth_clip: unknown symbol {s!r} for language {language.tag}")
    d = language.symbol_duration
    if fade_s > d:
        raise ValidationError(f"fade_s={fade_s} exceeds symbol_duration={d}")
    n_sym = len(tokens)
    duration = n_sym * d
    n_frames = int(round(duration * fps))
    visemes = [language.viseme_map[s] for s in tokens]

    verts = np.empty((n_frames, rig.vertex_count, 3), dtype=np.float64)
    for k in range(n_frames):
        tau = k / fps
        i = min(int(tau / d), n_sym - 1)
        delta = rig.viseme_deltas[visemes[i]].astype(np.float64)
        left = i * d
        right = (i + 1) * d
        if i > 0 and tau < left + fade_s / 2.0:
            w_prev = 0.5 * (1.0 + np.cos(np.pi * (tau - left + fade_s / 2.0) / fade_s))
            delta = w_prev * rig.viseme_deltas[visemes[i - 1]] + (1.0 - w_prev) * delta
        elif i < n_sym - 1 and tau > right - fade_s / 2.0:
            w_cur = 0.5 * (1.0 + np.cos(np.pi * (tau - (right - fade_s / 2.0)) / fade_s))
            delta = w_cur * delta + (1.0 - w_cur) * rig.viseme_deltas[visemes[i + 1]]
        verts[k] = rig.base_mesh + delta
    motion = MotionSequence(vertices=verts, fps=fps)

    n_samples = int(round(duration * sample_rate))
    t = np.arange(n_samples) / sample_rate
    audio = np.zeros(n_samples)
    ramp = int(round(0.010 * sample_rate))
    per_sym = int(round(d * sample_rate))
    for i, s in enumerate(tokens):
        a, b = i * per_sym, min((i + 1) * per_sym, n_samples)
        seg = language.signatures[s].render(t[a:b])
        env = np.ones(b - a)
        env[:ramp] = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[-ramp:] *= 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp, 0, -1) / ramp))
        audio[a:b] = seg * env
    rng = _clip_rng(seed, "".join(tokens) + language.tag)
    audio = audio + rng.normal(0.0, noise_std, n_samples)
    track = SpeechTrack(samples=np.clip(audio, -1.0, 1.0), sample_rate=sample_rate)
    return motion, track, tokens


def oracle_recognize(motion: MotionSequence, rig: VisemeRig, language: SyntheticLanguage) -> list[str]:
    """Decode symbols from lip geometry: nearest viseme per frame, runs collapsed.

    Neutral (zero-offset) frames and visemes outside the language's map yield
    no token. Because run collapsing cannot see a boundary between identical
    neighbors, corpora meant for round-trips should avoid adjacent repeats
    (the built-in sampler does).
    """
    if motion.vertex_count != rig.vertex_count:
        raise ValidationError(
            f"rig mismatch: motion N={motion.vertex_count}, rig N={rig.vertex_count}"
        )
    lips = np.asarray(rig.lip_vertex_indices, dtype=np.int64)
    offs = motion.vertices[:, lips, :].astype(np.float64) - rig.base_mesh[lips]
    flat = offs.reshape(motion.frames, -1)
    # candidate 0 is neutral so exact ties at cross-fade midpoints drop out
    cands = np.concatenate(
        [np.zeros((1, flat.shape[1])), rig.viseme_deltas[:, lips, :].reshape(rig.viseme_count, -1)]
    )
    d2 = ((flat[:, None, :] - cands[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    inverse = language.inverse_viseme_map()
    tokens = []
    prev = -1
    for idx in nearest:
        if idx != prev and idx != 0:
            sym = inverse.get(int(idx) - 1)
            if sym is not None:
                tokens.append(sym)
        prev = idx
    return tokens


class OracleRecognizer(Recognizer):
    """Hermetic audio-visual recognizer: reads visemes, accepts (and ignores) audio."""

    modality = "audio-visual"

    def __init__(self, rig: VisemeRig, language: SyntheticLanguage):
        self.name = f"oracle-{language.tag}"
        self.rig = rig
        self.language = language

    def transcribe(self, motion: MotionSequence, audio: SpeechTrack | None) -> list[str]:
        return oracle_recognize(motion, self.rig, self.language)


def oracle_bank(rig: VisemeRig, languages: list[SyntheticLanguage]):
    """language tag -> OracleRecognizer factory, for multi-language evaluation."""
    by_tag = {l.tag: OracleRecognizer(rig, l) for l in languages}

    def lookup(tag: str) -> OracleRecognizer:
        if tag not in by_tag:
            raise ValidationError(f"no oracle for language {tag!r}")
        return by_tag[tag]

    return lookup


# ---------------------------------------------------------------------------
# corpus building


@dataclass
class SynthCorpusConfig:
    out_dir: Path
    n_languages: int = 2
    clips_per_language: int = 150
    min_symbols: int = 3
    max_symbols: int = 6
    seed: int = 11
    fps: float = 25.0
    sample_rate: int = 16000
    conflicting: bool = True
    n_symbols: int = 6
    n_visemes: int = 8
    n_vertices: int = 60
    n_lip: int = 20
    symbol_duration: float = 0.24
    train_fraction: float = 0.8


def sample_symbols(rng: np.random.Generator, symbols: list[str], length: int) -> list[str]:
    """Uniform symbol string without adjacent repeats (keeps run-collapse decodable)."""
    out = [symbols[rng.integers(len(symbols))]]
    while len(out) < length:
        choices = [s for s in symbols if s != out[-1]]
        out.append(choices[rng.integers(len(choices))])
    return out


def _split_hash(clip_id: str) -> str:
    return hashlib.sha256(clip_id.encode()).hexdigest()


def build_synthetic_corpus(cfg: SynthCorpusConfig) -> CorpusManifest:
    """Generate a reproducible corpus directory; same seed, byte-identical files."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = make_rig(
        seed=cfg.seed, n_vertices=cfg.n_vertices, n_lip=cfg.n_lip, n_visemes=cfg.n_visemes
    )
    languages = make_languages(
        cfg.n_languages,
        seed=cfg.seed,
        n_symbols=cfg.n_symbols,
        n_visemes=cfg.n_visemes,
        conflicting=cfg.conflicting,
        symbol_duration=cfg.symbol_duration,
    )
    save_rig(rig, out / RIG_FILE)
    save_languages(languages, out / LANGUAGES_FILE)

    clips: list[ClipRecord] = []
    train_ids: list[str] = []
    test_ids: list[str] = []
    for lang in languages:
        lang_ids = []
        for i in range(cfg.clips_per_language):
            clip_id = f"{lang.tag}-{i:04d}"
            rng = _clip_rng(cfg.seed, clip_id)
            length = int(rng.integers(cfg.min_symbols, cfg.max_symbols + 1))
            tokens = sample_symbols(rng, lang.symbols, length)
            motion, track, transcript = synth_clip(
                tokens,
                lang,
                rig,
                fps=cfg.fps,
                sample_rate=cfg.sample_rate,
                seed=cfg.seed,
            )
            motion_rel = f"motion/{clip_id}.mtlk"
            audio_rel = f"audio/{clip_id}.wav"
            write_motion(motion, out / motion_rel)
            write_audio(track, out / audio_rel)
            clips.append(
                ClipRecord(
                    clip_id=clip_id,
                    language=lang.tag,
                    motion_path=motion_rel,
                    audio_path=audio_rel,
                    transcript=transcript,
                    fps=cfg.fps,
                )
            )
            lang_ids.append(clip_id)
        ranked = sorted(lang_ids, key=_split_hash)
        n_train = int(len(ranked) * cfg.train_fraction)
        train_ids.extend(sorted(ranked[:n_train]))
        test_ids.extend(sorted(ranked[n_train:]))

    manifest = CorpusManifest(
        rig_id=rig.rig_id,
        vertex_count=rig.vertex_count,
        lip_vertex_indices=list(rig.lip_vertex_indices),
        languages=[l.tag for l in languages],
        clips=clips,
        splits={"train": train_ids, "test": test_ids},
        fps=cfg.fps,
        sample_rate=cfg.sample_rate,
    )
    save_manifest(manifest, out / MANIFEST_FILE)
    return manifest


# ---------------------------------------------------------------------------
# sidecar serialization


def save_rig(rig: VisemeRig, path) -> None:
    doc = {
        "rig_id": rig.rig_id,
        "base_mesh": rig.base_mesh.astype(float).tolist(),
        "lip_vertex_indices": [int(i) for i in rig.lip_vertex_indices],
        "viseme_deltas": rig.viseme_deltas.astype(float).tolist(),
        "min_separation": rig.min_separation,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_rig(path) -> VisemeRig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return VisemeRig(
        rig_id=doc["rig_id"],
        base_mesh=np.array(doc["base_mesh"]),
        lip_vertex_indices=[int(i) for i in doc["lip_vertex_indices"]],
        viseme_deltas=np.array(doc["viseme_deltas"]),
        min_separation=float(doc["min_separation"]),
    )


def save_languages(languages: list[SyntheticLanguage], path) -> None:
    doc = [
        {
            "tag": l.tag,
            "symbols": l.symbols,
            "viseme_map": l.viseme_map,
            "signatures": {
                s: {"freqs": spec.freqs, "amps": spec.amps} for s, spec in l.signatures.items()
            },
            "symbol_duration": l.symbol_duration,
        }
        for l in languages
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_languages(path) -> list[SyntheticLanguage]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [
        SyntheticLanguage(
            tag=entry["tag"],
            symbols=list(entry["symbols"]),
            viseme_map={k: int(v) for k, v in entry["viseme_map"].items()},
            signatures={
                s: ToneSpec(freqs=[float(f) for f in spec["freqs"]], amps=[float(a) for a in spec["amps"]])
                for s, spec in entry["signatures"].items()
            },
            symbol_duration=float(entry["symbol_duration"]),
        )
        for entry in doc
    ]
