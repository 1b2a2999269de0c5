"""Corpus construction: filter stages with pluggable detectors and mocks.

Raw items flow through segment, active-speaker, frontal, transcribe, and lift
stages; each stage emits a report whose accepted plus rejected counts equal
its input count, so every dropped item is traceable to one stage and reason.
The heavy detectors (speaker scoring, head angles, transcription, 2D-to-3D
lifting) are adapter interfaces; in-repo implementations are deterministic
mocks that echo planted fields, plus a line-delimited JSON client for hooking
up external tools.
"""

from __future__ import annotations

import json
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    ClipRecord,
    CorpusManifest,
    MotionSequence,
    SpeechTrack,
    read_motion,
    save_manifest,
    write_audio,
    write_motion,
)
from .errors import ContractError, ValidationError

REASON_INACTIVE = "inactive-speaker-frames"
REASON_SIDE_FACE = "side-face"
REASON_ABRUPT = "abrupt-motion"
REASON_ADAPTER = "adapter-error"
REASON_NO_UTTERANCE = "no-utterance"
REASON_EMPTY_TRANSCRIPT = "empty-transcript"


@dataclass
class FrameTrack:
    """Per-frame detector outputs on a shared timeline."""

    t: np.ndarray
    speaking_score: np.ndarray
    yaw: np.ndarray
    pitch: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.speaking_score = np.asarray(self.speaking_score, dtype=np.float64)
        self.yaw = np.asarray(self.yaw, dtype=np.float64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        n = self.t.shape[0]
        if n == 0:
            raise ValidationError("FrameTrack: empty track")
        for name in ("speaking_score", "yaw", "pitch"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValidationError(f"FrameTrack.{name}: shape {arr.shape} != ({n},)")
            if not np.isfinite(arr).all():
                raise ValidationError(f"FrameTrack.{name}: non-finite value")
        if n > 1 and not (np.diff(self.t) > 0).all():
            raise ValidationError("FrameTrack.t: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.t.shape[0]

    def slice(self, start: int, stop: int) -> "FrameTrack":
        return FrameTrack(
            t=self.t[start:stop],
            speaking_score=self.speaking_score[start:stop],
            yaw=self.yaw[start:stop],
            pitch=self.pitch[start:stop],
        )

    def frame_duration(self) -> float:
        if len(self) == 1:
            return 0.0
        return float(np.median(np.diff(self.t)))


@dataclass
class Verdict:
    accepted: bool
    reason: str | None = None


@dataclass
class StageReport:
    """Bookkeeping for one stage: accepted ids and per-id rejection reasons.

    The segment stage can fan one item out into several utterance units, so
    downstream reports count units, not raw items; with single-utterance
    inputs the global ledger (sum of rejections plus final accepts equals raw
    inputs) holds exactly.
    """

    stage: str
    input_count: int = 0
    accepted: list[str] = field(default_factory=list)
    rejected: dict[str, str] = field(default_factory=dict)

    def check(self) -> None:
        if len(self.accepted) + len(self.rejected) != self.input_count:
            raise ValidationError(
                f"stage {self.stage}: accepted {len(self.accepted)} + rejected "
                f"{len(self.rejected)} != input {self.input_count}"
            )

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "input_count": self.input_count,
            "accepted": sorted(self.accepted),
            "rejected": {k: self.rejected[k] for k in sorted(self.rejected)},
        }


def write_reports(reports: list[StageReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.as_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# filter stages


def segment_utterances(
    track: FrameTrack,
    score_threshold: float = 0.5,
    min_gap_s: float = 0.5,
    min_len_s: float = 0.5,
) -> list[tuple[float, float]]:
    """Maximal speaking runs as [start, end) times.

    Frames with score >= threshold form runs; adjacent runs merge when the
    silent gap between them is shorter than min_gap_s; runs shorter than
    min_len_s are dropped. Each frame covers one frame duration, so a run's
    end is its last frame time plus the frame step.
    """
    active = track.speaking_score >= score_threshold
    dt = track.frame_duration()
    runs: list[list[int]] = []
    for i, on in enumerate(active):
        if not on:
            continue
        if runs and i == runs[-1][1] + 1:
            runs[-1][1] = i
        else:
            runs.append([i, i])
    if not runs:
        return []
    merged = [runs[0]]
    for a, b in runs[1:]:
        gap = track.t[a] - (track.t[merged[-1][1]] + dt)
        if gap < min_gap_s:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    out = []
    for a, b in merged:
        start, end = float(track.t[a]), float(track.t[b] + dt)
        if end - start >= min_len_s:
            out.append((start, end))
    return out


def verify_active_speaker(
    scores, threshold: float = 0.5, min_fraction: float = 0.95
) -> Verdict:
    """Accept iff at least min_fraction of frames score as speaking."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("verify_active_speaker: empty segment")
    fraction = float((arr >= threshold).mean())
    if fraction >= min_fraction:
        return Verdict(True)
    return Verdict(False, REASON_INACTIVE)


def filter_frontal(
    track: FrameTrack,
    yaw_limit_deg: float = 30.0,
    pitch_limit_deg: float = 20.0,
    max_delta_deg_per_frame: float = 15.0,
) -> Verdict:
    """Reject side faces (angle beyond limits) and abrupt per-frame turns."""
    if np.abs(track.yaw).max() > yaw_limit_deg or np.abs(track.pitch).max() > pitch_limit_deg:
        return Verdict(False, REASON_SIDE_FACE)
    if len(track) > 1:
        dyaw = np.abs(np.diff(track.yaw)).max()
        dpitch = np.abs(np.diff(track.pitch)).max()
        if max(dyaw, dpitch) > max_delta_deg_per_frame:
            return Verdict(False, REASON_ABRUPT)
    return Verdict(True)


# ---------------------------------------------------------------------------
# adapters


@dataclass
class RawItem:
    """One candidate recording entering the pipeline.

    video_ref is an opaque handle for external detectors. meta carries
    whatever the attached adapters need; the mock adapters read planted
    per-frame arrays and ground-truth fields from it.
    """

    item_id: str
    language: str
    video_ref: str
    audio: SpeechTrack
    fps: float
    meta: dict = field(default_factory=dict)


class SpeakerScorer:
    """Per-frame probability that the visible face is the one speaking."""

    name = "abstract-speaker-scorer"

    def score(self, item: RawItem) -> np.ndarray:
        raise NotImplementedError


class AngleEstimator:
    """Per-frame head yaw and pitch in degrees."""

    name = "abstract-angle-estimator"

    def angles(self, item: RawItem) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class Transcriber:
    """Pseudo-transcript tokens for one utterance."""

    name = "abstract-transcriber"

    def transcribe(self, item: RawItem, start_frame: int, end_frame: int) -> list[str]:
        raise NotImplementedError


class MeshLifter:
    """Lift an utterance's face video to a 3D vertex track.

    Lifting fixes the output topology, so the lifter declares the rig that
    every produced motion sequence lives on.
    """

    name = "abstract-mesh-lifter"
    rig_id = "abstract"
    vertex_count = 0
    lip_vertex_indices: list[int] = []

    def lift(self, item: RawItem, start_frame: int, end_frame: int) -> MotionSequence:
        raise NotImplementedError


class MockSpeakerScorer(SpeakerScorer):
    name = "mock-speaker-scorer"

    def score(self, item: RawItem) -> np.ndarray:
        return np.asarray(item.meta["speaking_scores"], dtype=np.float64)


class MockAngleEstimator(AngleEstimator):
    name = "mock-angle-estimator"

    def angles(self, item: RawItem) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.asarray(item.meta["yaw"], dtype=np.float64),
            np.asarray(item.meta["pitch"], dtype=np.float64),
        )


class MockTranscriber(Transcriber):
    name = "mock-transcriber"

    def transcribe(self, item: RawItem, start_frame: int, end_frame: int) -> list[str]:
        return list(item.meta["transcript"])


class MockMeshLifter(MeshLifter):
    name = "mock-mesh-lifter"

    def __init__(self, rig_id: str, vertex_count: int, lip_vertex_indices: list[int]):
        self.rig_id = rig_id
        self.vertex_count = vertex_count
        self.lip_vertex_indices = list(lip_vertex_indices)

    def lift(self, item: RawItem, start_frame: int, end_frame: int) -> MotionSequence:
        motion: MotionSequence = item.meta["motion"]
        return MotionSequence(vertices=motion.vertices[start_frame:end_frame], fps=motion.fps)


class ProcessAdapter(SpeakerScorer, AngleEstimator, Transcriber, MeshLifter):
    """All four detector roles backed by one external tool.

    Protocol: one JSON object per line on stdin with {"op", "item_id",
    "video_ref", "fps", "start_frame", "end_frame"}; one JSON object per line
    on stdout. Expected response fields by op: score -> {"scores": [...]},
    angles -> {"yaw": [...], "pitch": [...]}, transcribe -> {"tokens": [...]},
    lift -> {"motion_path": "..."} pointing at a motion file the tool wrote.
    """

    def __init__(self, command: list[str], rig_id: str = "external", vertex_count: int = 0,
                 lip_vertex_indices: list[int] | None = None):
        self.name = f"process:{command[0]}"
        self.rig_id = rig_id
        self.vertex_count = vertex_count
        self.lip_vertex_indices = list(lip_vertex_indices or [])
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._lock = threading.Lock()

    def _call(self, payload: dict) -> dict:
        with self._lock:
            if self._proc.poll() is not None:
                raise ContractError(f"{self.name}: process exited with {self._proc.returncode}")
            self._proc.stdin.write(json.dumps(payload, sort_keys=True) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise ContractError(f"{self.name}: no response for op {payload['op']}")
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ContractError(f"{self.name}: malformed response: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("ok") is not True:
            raise ContractError(f"{self.name}: tool reported failure: {doc}")
        return doc

    def _payload(self, op: str, item: RawItem, start: int = 0, end: int = -1) -> dict:
        return {
            "op": op,
            "item_id": item.item_id,
            "video_ref": item.video_ref,
            "fps": item.fps,
            "start_frame": start,
            "end_frame": end,
        }

    def score(self, item: RawItem) -> np.ndarray:
        return np.asarray(self._call(self._payload("score", item))["scores"], dtype=np.float64)

    def angles(self, item: RawItem) -> tuple[np.ndarray, np.ndarray]:
        doc = self._call(self._payload("angles", item))
        return np.asarray(doc["yaw"], dtype=np.float64), np.asarray(doc["pitch"], dtype=np.float64)

    def transcribe(self, item: RawItem, start_frame: int, end_frame: int) -> list[str]:
        doc = self._call(self._payload("transcribe", item, start_frame, end_frame))
        return [str(t) for t in doc["tokens"]]

    def lift(self, item: RawItem, start_frame: int, end_frame: int) -> MotionSequence:
        doc = self._call(self._payload("lift", item, start_frame, end_frame))
        return read_motion(doc["motion_path"])

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class PipelineAdapters:
    speaker_scorer: SpeakerScorer
    angle_estimator: AngleEstimator
    transcriber: Transcriber
    mesh_lifter: MeshLifter


@dataclass
class PipelineConfig:
    out_dir: Path
    score_threshold: float = 0.5
    min_gap_s: float = 0.5
    min_len_s: float = 0.5
    min_fraction: float = 0.95
    yaw_limit_deg: float = 30.0
    pitch_limit_deg: float = 20.0
    max_delta_deg_per_frame: float = 15.0
    sample_rate: int = 16000


# ---------------------------------------------------------------------------
# pipeline driver


@dataclass
class _Unit:
    """One utterance flowing between stages."""

    unit_id: str
    item: RawItem
    track: FrameTrack
    start_frame: int
    end_frame: int
    transcript: list[str] | None = None


def run_pipeline(
    inputs: list[RawItem],
    adapters: PipelineAdapters,
    config: PipelineConfig,
    log=None,
) -> tuple[CorpusManifest, list[StageReport]]:
    """Filter raw items into a corpus directory plus per-stage reports.

    Items are independent; any adapter exception quarantines only the item at
    the stage where it fired. Reports are merged by sorted id so the output
    is stable however items are scheduled.
    """
    out = Path(config.out_dir)
    (out / "motion").mkdir(parents=True, exist_ok=True)
    (out / "audio").mkdir(parents=True, exist_ok=True)

    seg_report = StageReport("segment", input_count=len(inputs))
    units: list[_Unit] = []
    for item in sorted(inputs, key=lambda it: it.item_id):
        try:
            scores = adapters.speaker_scorer.score(item)
            yaw, pitch = adapters.angle_estimator.angles(item)
            t = np.arange(len(scores)) / item.fps
            track = FrameTrack(t=t, speaking_score=scores, yaw=yaw, pitch=pitch)
            segments = segment_utterances(
                track, config.score_threshold, config.min_gap_s, config.min_len_s
            )
        except Exception:
            seg_report.rejected[item.item_id] = REASON_ADAPTER
            continue
        if not segments:
            seg_report.rejected[item.item_id] = REASON_NO_UTTERANCE
            continue
        seg_report.accepted.append(item.item_id)
        dt = track.frame_duration()
        for k, (start, end) in enumerate(segments):
            unit_id = item.item_id if len(segments) == 1 else f"{item.item_id}#{k}"
            a = int(np.searchsorted(track.t, start - 0.5 * dt))
            b = int(np.searchsorted(track.t, end - 0.5 * dt))
            units.append(_Unit(unit_id, item, track.slice(a, b), a, b))

    speaker_report = StageReport("active-speaker", input_count=len(units))
    survivors = []
    for u in units:
        verdict = verify_active_speaker(
            u.track.speaking_score, config.score_threshold, config.min_fraction
        )
        if verdict.accepted:
            speaker_report.accepted.append(u.unit_id)
            survivors.append(u)
        else:
            speaker_report.rejected[u.unit_id] = verdict.reason
    units = survivors

    frontal_report = StageReport("frontal", input_count=len(units))
    survivors = []
    for u in units:
        verdict = filter_frontal(
            u.track, config.yaw_limit_deg, config.pitch_limit_deg, config.max_delta_deg_per_frame
        )
        if verdict.accepted:
            frontal_report.accepted.append(u.unit_id)
            survivors.append(u)
        else:
            frontal_report.rejected[u.unit_id] = verdict.reason
    units = survivors

    transcribe_report = StageReport("transcribe", input_count=len(units))
    survivors = []
    for u in units:
        try:
            u.transcript = adapters.transcriber.transcribe(u.item, u.start_frame, u.end_frame)
        except Exception:
            transcribe_report.rejected[u.unit_id] = REASON_ADAPTER
            continue
        if not u.transcript:
            transcribe_report.rejected[u.unit_id] = REASON_EMPTY_TRANSCRIPT
            continue
        transcribe_report.accepted.append(u.unit_id)
        survivors.append(u)
    units = survivors

    lift_report = StageReport("lift", input_count=len(units))
    lifter = adapters.mesh_lifter
    clips: list[ClipRecord] = []
    languages: list[str] = []
    for u in units:
        try:
            motion = lifter.lift(u.item, u.start_frame, u.end_frame)
            if motion.vertex_count != lifter.vertex_count:
                raise ContractError(
                    f"lifter produced {motion.vertex_count} vertices, declared {lifter.vertex_count}"
                )
            sr = u.item.audio.sample_rate
            a = int(round(u.start_frame / u.item.fps * sr))
            b = int(round(u.end_frame / u.item.fps * sr))
            audio = SpeechTrack(samples=u.item.audio.samples[a:b], sample_rate=sr)
            motion_rel = f"motion/{u.unit_id}.mtlk"
            audio_rel = f"audio/{u.unit_id}.wav"
            write_motion(motion, out / motion_rel)
            write_audio(audio, out / audio_rel)
        except Exception:
            lift_report.rejected[u.unit_id] = REASON_ADAPTER
            continue
        lift_report.accepted.append(u.unit_id)
        clips.append(
            ClipRecord(
                clip_id=u.unit_id,
                language=u.item.language,
                motion_path=motion_rel,
                audio_path=audio_rel,
                transcript=list(u.transcript),
                fps=u.item.fps,
            )
        )
        if u.item.language not in languages:
            languages.append(u.item.language)

    reports = [seg_report, speaker_report, frontal_report, transcribe_report, lift_report]
    for r in reports:
        r.check()
        if log is not None:
            log(
                f"stage {r.stage}: {r.input_count} in, {len(r.accepted)} accepted, "
                f"{len(r.rejected)} rejected"
            )

    fps = inputs[0].fps if inputs else 25.0
    sample_rate = inputs[0].audio.sample_rate if inputs else config.sample_rate
    manifest = CorpusManifest(
        rig_id=lifter.rig_id,
        vertex_count=lifter.vertex_count,
        lip_vertex_indices=list(lifter.lip_vertex_indices),
        languages=sorted(languages),
        clips=sorted(clips, key=lambda c: c.clip_id),
        splits={},
        fps=fps,
        sample_rate=sample_rate,
    )
    save_manifest(manifest, out / "corpus.json")
    write_reports(reports, out / "reports.json")
    return manifest, reports


# ---------------------------------------------------------------------------
# planted-fault fixture


def make_planted_fixture(
    n_items: int = 20,
    n_violations: int = 5,
    seed: int = 7,
    fps: float = 25.0,
    sample_rate: int = 16000,
) -> tuple[list[RawItem], PipelineAdapters, dict[str, str]]:
    """Raw items with known violations, plus matching mock adapters.

    Violations cycle through side-face, abrupt-motion, and inactive-speaker
    and are planted on every fourth item, so any (n_items, n_violations) spread
    stays deterministic. Returns (items, adapters, expected rejection reasons
    by item id). Clean items carry genuine synthetic motion and audio, so the
    accepted corpus is usable downstream.
    """
    from . import synthkit

    if n_violations * 4 > n_items + 3:
        raise ValidationError(f"cannot plant {n_violations} violations in {n_items} items")
    rig = synthkit.make_rig(seed=seed)
    languages = synthkit.make_languages(2, seed=seed)
    violation_kinds = [REASON_SIDE_FACE, REASON_ABRUPT, REASON_INACTIVE]
    planted = {4 * k: violation_kinds[k % 3] for k in range(n_violations)}

    items: list[RawItem] = []
    expected: dict[str, str] = {}
    for i in range(n_items):
        item_id = f"item-{i:03d}"
        lang = languages[i % len(languages)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1, i]))
        n_sym = int(rng.integers(3, 7))
        symbols = synthkit.sample_symbols(rng, lang.symbols, n_sym)
        motion, audio, transcript = synthkit.synth_clip(
            symbols, lang, rig, fps=fps, sample_rate=sample_rate, seed=seed
        )
        n = motion.frames
        k = np.arange(n)
        scores = np.full(n, 0.9)
        yaw = 6.0 * np.sin(2.0 * np.pi * k / max(n, 2))
        pitch = 3.0 * np.cos(2.0 * np.pi * k / max(n, 2))
        kind = planted.get(i)
        if kind == REASON_SIDE_FACE:
            yaw = yaw.copy()
            yaw[n // 2] = 40.0
            expected[item_id] = kind
        elif kind == REASON_ABRUPT:
            yaw = yaw.copy()
            # one-frame 18 degree jump, still inside the 30 degree side limit
            yaw[n // 2 :] = yaw[n // 2 :] * 0.2 + 18.0
            yaw = np.clip(yaw, -28.0, 28.0)
            expected[item_id] = kind
        elif kind == REASON_INACTIVE:
            # scatter single inactive frames; sub-gap silences merge back into
            # one segment, so the active-speaker stage sees them
            low = k[2:-2:10]
            need = int(np.ceil(0.06 * n)) + 1
            scores = scores.copy()
            scores[low[:max(need, 2)]] = 0.1
            expected[item_id] = kind
        items.append(
            RawItem(
                item_id=item_id,
                language=lang.tag,
                video_ref=f"mem://{item_id}",
                audio=audio,
                fps=fps,
                meta={
                    "speaking_scores": scores,
                    "yaw": yaw,
                    "pitch": pitch,
                    "transcript": transcript,
                    "motion": motion,
                },
            )
        )
    adapters = PipelineAdapters(
        speaker_scorer=MockSpeakerScorer(),
        angle_estimator=MockAngleEstimator(),
        transcriber=MockTranscriber(),
        mesh_lifter=MockMeshLifter(rig.rig_id, rig.vertex_count, rig.lip_vertex_indices),
    )
    return items, adapters, expected
