"""Corpus data model and I/O: motion clips, audio tracks, manifests.

File formats:
  - motion: binary ``.mtlk`` -- magic "MTLK", u32 version, u32 T, u32 N,
    f32 fps, then T*N*3 little-endian f32.
  - audio: mono PCM16 WAV (16 kHz default).
  - manifest: one ``corpus.json`` per corpus directory, clip paths relative
    to the manifest file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import FormatError, ValidationError

MOTION_MAGIC = b"MTLK"
MOTION_VERSION = 1
MANIFEST_VERSION = 1
DEFAULT_FPS = 25.0
DEFAULT_SAMPLE_RATE = 16000


@dataclass
class MotionSequence:
    """T x N x 3 vertex animation at a fixed frame rate (rig-local units)."""

    vertices: np.ndarray
    fps: float

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float32)
        if self.vertices.ndim != 3 or self.vertices.shape[2] != 3:
            raise ValidationError(
                f"vertices: expected (T, N, 3) array, got shape {self.vertices.shape}"
            )
        if self.frames < 1:
            raise ValidationError("vertices: need at least one frame (T >= 1)")
        if self.vertex_count < 4:
            raise ValidationError("vertices: need at least 4 vertices (N >= 4)")
        if not float(self.fps) > 0:
            raise ValidationError(f"fps: must be > 0, got {self.fps}")
        self.fps = float(self.fps)
        if not np.isfinite(self.vertices).all():
            t, n, _ = np.argwhere(~np.isfinite(self.vertices))[0]
            raise ValidationError(f"vertices: non-finite value at frame {t}, vertex {n}")

    @property
    def frames(self) -> int:
        return self.vertices.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.vertices.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.frames / self.fps


@dataclass
class SpeechTrack:
    """Mono audio samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValidationError(f"samples: expected mono 1-D array, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise ValidationError("samples: empty track")
        if not np.isfinite(self.samples).all():
            raise ValidationError("samples: non-finite value")
        peak = float(np.abs(self.samples).max())
        if peak > 1.0 + 1e-5:
            raise ValidationError(f"samples: values outside [-1, 1] (peak {peak:.4g})")
        np.clip(self.samples, -1.0, 1.0, out=self.samples)
        self.sample_rate = int(self.sample_rate)
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate: must be positive, got {self.sample_rate}")

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ClipRecord:
    clip_id: str
    language: str
    motion_path: str
    audio_path: str
    transcript: list[str]
    fps: float

    def __post_init__(self):
        if not self.clip_id:
            raise ValidationError("clip.id: empty")
        if not self.language:
            raise ValidationError(f"clip {self.clip_id}: language empty")
        if not isinstance(self.transcript, list) or not all(isinstance(t, str) for t in self.transcript):
            raise ValidationError(f"clip {self.clip_id}: transcript must be a list of string tokens")
        self.fps = float(self.fps)
        if self.fps <= 0:
            raise ValidationError(f"clip {self.clip_id}: fps must be > 0")


@dataclass
class CorpusManifest:
    """Declarative index of a corpus directory.

    ``root`` is the directory the clip paths are relative to; it is set on
    load and by :func:`save_manifest`.
    """

    rig_id: str
    vertex_count: int
    lip_vertex_indices: list[int]
    languages: list[str]
    clips: list[ClipRecord]
    splits: dict[str, list[str]]
    fps: float = DEFAULT_FPS
    sample_rate: int = DEFAULT_SAMPLE_RATE
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.vertex_count < 4:
            raise ValidationError(f"vertex_count: must be >= 4, got {self.vertex_count}")
        lips = self.lip_vertex_indices
        if not lips:
            raise ValidationError("lip_vertex_indices: empty")
        if any(int(b) <= int(a) for a, b in zip(lips, lips[1:])):
            raise ValidationError("lip_vertex_indices: not strictly increasing")
        if lips[0] < 0 or lips[-1] >= self.vertex_count:
            raise ValidationError(
                f"lip_vertex_indices: index {lips[-1] if lips[-1] >= self.vertex_count else lips[0]} "
                f"out of range for N={self.vertex_count}"
            )
        if not self.languages and self.clips:
            raise ValidationError("languages: empty registry")
        seen = set()
        for clip in self.clips:
            if clip.clip_id in seen:
                raise ValidationError(f"clips: duplicate id {clip.clip_id!r}")
            seen.add(clip.clip_id)
            if clip.language not in self.languages:
                raise ValidationError(
                    f"clips[{clip.clip_id}].language: {clip.language!r} not in language registry"
                )
        for name, ids in self.splits.items():
            for cid in ids:
                if cid not in seen:
                    raise ValidationError(f"splits.{name}: unknown clip id {cid!r}")
        train = set(self.splits.get("train", []))
        test = set(self.splits.get("test", []))
        overlap = train & test
        if overlap:
            raise ValidationError(f"splits: train/test overlap on {sorted(overlap)[:3]}")

    def clip(self, clip_id: str) -> ClipRecord:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)

    def split_clips(self, split: str) -> list[ClipRecord]:
        ids = self.splits.get(split, [])
        by_id = {c.clip_id: c for c in self.clips}
        return [by_id[i] for i in ids]

    def resolve(self, rel_path: str) -> Path:
        if self.root is None:
            raise ValidationError("manifest has no root directory; save or load it first")
        return Path(self.root) / rel_path

    def load_motion(self, clip: ClipRecord) -> MotionSequence:
        seq = read_motion(self.resolve(clip.motion_path))
        if seq.vertex_count != self.vertex_count:
            raise ValidationError(
                f"clip {clip.clip_id}: motion has N={seq.vertex_count}, manifest declares {self.vertex_count}"
            )
        return seq

    def load_audio(self, clip: ClipRecord) -> SpeechTrack:
        return read_audio(self.resolve(clip.audio_path))


# ---------------------------------------------------------------------------
# motion file format


def write_motion(seq: MotionSequence, path) -> None:
    path = Path(path)
    payload = np.ascontiguousarray(seq.vertices, dtype="<f4")
    header = MOTION_MAGIC + struct.pack(
        "<IIIf", MOTION_VERSION, seq.frames, seq.vertex_count, seq.fps
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_motion(path) -> MotionSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != MOTION_MAGIC:
        raise FormatError(f"{path}: not a motion file (bad magic)")
    version, frames, n_vertices, fps = struct.unpack("<IIIf", raw[4:20])
    if version != MOTION_VERSION:
        raise FormatError(f"{path}: unsupported motion format version {version}")
    expected = frames * n_vertices * 3 * 4
    body = raw[20:]
    if len(body) != expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes for T={frames} N={n_vertices}, "
            f"got {len(body)}"
        )
    verts = np.frombuffer(body, dtype="<f4").reshape(frames, n_vertices, 3)
    if not np.isfinite(verts).all():
        t, n, _ = np.argwhere(~np.isfinite(verts))[0]
        raise FormatError(f"{path}: non-finite value at frame {t}, vertex {n}")
    return MotionSequence(vertices=verts.copy(), fps=fps)


# ---------------------------------------------------------------------------
# audio


def write_audio(track: SpeechTrack, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.rint(track.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, track.sample_rate, pcm)


def read_audio(path) -> SpeechTrack:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: expected mono audio, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32767.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float32)
    else:
        raise FormatError(f"{path}: unsupported sample dtype {data.dtype}")
    return SpeechTrack(samples=np.clip(samples, -1.0, 1.0), sample_rate=int(rate))


# ---------------------------------------------------------------------------
# manifest


def save_manifest(manifest: CorpusManifest, path) -> None:
    """Write the manifest as deterministic JSON and set its root directory."""
    path = Path(path)
    manifest.validate()
    doc = {
        "format_version": MANIFEST_VERSION,
        "rig_id": manifest.rig_id,
        "vertex_count": manifest.vertex_count,
        "fps": manifest.fps,
        "sample_rate": manifest.sample_rate,
        "lip_vertex_indices": [int(i) for i in manifest.lip_vertex_indices],
        "languages": list(manifest.languages),
        "clips": [
            {
                "id": c.clip_id,
                "language": c.language,
                "motion_path": c.motion_path,
                "audio_path": c.audio_path,
                "transcript": c.transcript,
                "fps": c.fps,
            }
            for c in manifest.clips
        ],
        "splits": {k: list(v) for k, v in manifest.splits.items()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.root = path.parent


def load_manifest(path) -> CorpusManifest:
    """Load and validate a corpus manifest. Raises with the offending field named."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest root must be a JSON object")
    version = doc.get("format_version")
    if version != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest format_version {version!r}")
    try:
        clips = [
            ClipRecord(
                clip_id=str(c["id"]),
                language=str(c["language"]),
                motion_path=str(c["motion_path"]),
                audio_path=str(c["audio_path"]),
                transcript=list(c["transcript"]),
                fps=float(c["fps"]),
            )
            for c in doc["clips"]
        ]
        manifest = CorpusManifest(
            rig_id=str(doc["rig_id"]),
            vertex_count=int(doc["vertex_count"]),
            lip_vertex_indices=[int(i) for i in doc["lip_vertex_indices"]],
            languages=[str(x) for x in doc["languages"]],
            clips=clips,
            splits={str(k): [str(i) for i in v] for k, v in doc["splits"].items()},
            fps=float(doc.get("fps", DEFAULT_FPS)),
            sample_rate=int(doc.get("sample_rate", DEFAULT_SAMPLE_RATE)),
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing or ill-typed manifest field ({exc})") from exc
    return manifest


# ---------------------------------------------------------------------------
# statistics


@dataclass
class CorpusStats:
    clip_count: int
    total_hours: float
    avg_duration_s: float
    per_language_share: dict[str, float]
    empty: bool

    def as_dict(self) -> dict:
        return {
            "clip_count": self.clip_count,
            "total_hours": self.total_hours,
            "avg_duration_s": self.avg_duration_s,
            "per_language_share": dict(self.per_language_share),
            "empty": self.empty,
        }


def corpus_stats(manifest: CorpusManifest) -> CorpusStats:
    """Clip count, total hours, average clip duration, per-language duration share."""
    if not manifest.clips:
        return CorpusStats(0, 0.0, 0.0, {}, empty=True)
    per_lang_seconds: dict[str, float] = {}
    total = 0.0
    for clip in manifest.clips:
        audio_path = manifest.resolve(clip.audio_path)
        if not audio_path.exists():
            raise ValidationError(f"clip {clip.clip_id}: missing audio file {audio_path}")
        dur = read_audio(audio_path).duration_seconds
        total += dur
        per_lang_seconds[clip.language] = per_lang_seconds.get(clip.language, 0.0) + dur
    share = {lang: sec / total for lang, sec in sorted(per_lang_seconds.items())}
    return CorpusStats(
        clip_count=len(manifest.clips),
        total_hours=total / 3600.0,
        avg_duration_s=total / len(manifest.clips),
        per_language_share=share,
        empty=False,
    )
