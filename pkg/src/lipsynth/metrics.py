"""Lip-sync evaluation: LVE, WER, SNR-controlled noise mixing, AVLR, rank correlation.

LVE follows the max-over-lip-vertices / mean-over-frames convention. AVLR is
the word error rate of an audio-visual recognizer fed the motion plus audio
deliberately degraded to a fixed SNR; the recognizer slot is pluggable (the
hermetic oracle lives in :mod:`lipsynth.synthkit`, real AVSR attaches through
:class:`ExternalRecognizer`).
"""

from __future__ import annotations

import csv
import json
import subprocess
import tempfile
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .corpus import CorpusManifest, MotionSequence, SpeechTrack, read_motion, write_audio, write_motion
from .errors import ContractError, MetricUndefined, ValidationError


def lve(pred: MotionSequence, gt: MotionSequence, lip_indices) -> float:
    """Mean over frames of the maximum lip-vertex Euclidean error (rig units)."""
    if pred.frames != gt.frames or pred.vertex_count != gt.vertex_count:
        raise ValidationError(
            f"shape mismatch: pred {pred.frames}x{pred.vertex_count}, gt {gt.frames}x{gt.vertex_count}"
        )
    if abs(pred.fps - gt.fps) > 1e-9:
        raise ValidationError(f"fps mismatch: pred {pred.fps}, gt {gt.fps}")
    lip_indices = np.asarray(lip_indices, dtype=np.int64)
    if lip_indices.size == 0:
        raise ValidationError("lip_indices: empty lip set")
    if lip_indices.min() < 0 or lip_indices.max() >= pred.vertex_count:
        raise ValidationError("lip_indices: index out of range")
    diff = pred.vertices[:, lip_indices, :].astype(np.float64) - gt.vertices[:, lip_indices, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    return float(dist.max(axis=1).mean())


def edit_distance(ref: list[str], hyp: list[str]) -> int:
    """Minimum substitutions + deletions + insertions, two-row Levenshtein."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(ref_tokens: list[str], hyp_tokens: list[str]) -> float:
    """(S + D + I) / len(ref); can exceed 1.0 on insertion-heavy hypotheses."""
    ref = list(ref_tokens)
    if not ref:
        raise ValidationError("wer: empty reference")
    return edit_distance(ref, list(hyp_tokens)) / len(ref)


@dataclass
class NoiseMix:
    track: SpeechTrack
    scale: float
    clipping_rate: float
    snr_db: float


def mix_noise(
    track: SpeechTrack,
    snr_db: float,
    seed: int = 0,
    noise: SpeechTrack | None = None,
) -> NoiseMix:
    """Add noise scaled so 10*log10(P_signal / P_noise) equals ``snr_db``.

    With no explicit noise track, seeded white Gaussian noise is generated.
    The mix is clipped to [-1, 1]; the clipping rate is reported so callers
    can tell when the power ratio no longer holds exactly.
    """
    x = track.samples.astype(np.float64)
    p_signal = float(np.mean(x**2))
    if p_signal == 0.0:
        raise ValidationError("mix_noise: silent signal (P_signal = 0)")
    if noise is None:
        rng = np.random.default_rng(seed)
        n = rng.standard_normal(x.size)
    else:
        if noise.samples.size < x.size:
            raise ValidationError(
                f"mix_noise: noise shorter than signal ({noise.samples.size} < {x.size})"
            )
        n = noise.samples[: x.size].astype(np.float64)
    p_noise = float(np.mean(n**2))
    if p_noise == 0.0:
        raise ValidationError("mix_noise: noise has zero power")
    scale = float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))
    mixed = x + scale * n
    clipping_rate = float(np.mean(np.abs(mixed) > 1.0))
    mixed = np.clip(mixed, -1.0, 1.0)
    return NoiseMix(
        track=SpeechTrack(samples=mixed.astype(np.float32), sample_rate=track.sample_rate),
        scale=scale,
        clipping_rate=clipping_rate,
        snr_db=snr_db,
    )


def spearman_rho(scores_a, scores_b) -> float:
    """Rank correlation with average ranks for ties, in [-1, 1]."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ValidationError(f"spearman_rho: length mismatch ({a.size} vs {b.size})")
    if a.size < 2:
        raise ValidationError("spearman_rho: need at least 2 scores")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise MetricUndefined("spearman_rho: undefined for a constant score list")
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# recognizers


class Recognizer:
    """Transcription slot for AVLR. Implementations must be deterministic."""

    name: str = "abstract"
    modality: str = "audio-visual"  # or "visual-only"

    def transcribe(self, motion: MotionSequence, audio: SpeechTrack | None) -> list[str]:
        raise NotImplementedError


class ExternalRecognizer(Recognizer):
    """Adapter that talks to an external recognizer process.

    Protocol: one JSON request line per clip on stdin --
    ``{"clip_id", "motion_path", "wav_path"}`` where ``wav_path`` is the
    SNR-mixed audio -- answered by one line of whitespace-separated tokens
    on stdout. Calls are serialized per process.
    """

    def __init__(self, command: list[str], name: str = "external", modality: str = "audio-visual"):
        self.name = name
        self.modality = modality
        self._command = list(command)
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure_proc(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def transcribe(self, motion: MotionSequence, audio: SpeechTrack | None, clip_id: str = "") -> list[str]:
        with self._lock, tempfile.TemporaryDirectory(prefix="lipsynth-rec-") as tmp:
            motion_path = Path(tmp) / "motion.mtlk"
            write_motion(motion, motion_path)
            request = {"clip_id": clip_id, "motion_path": str(motion_path)}
            if audio is not None:
                wav_path = Path(tmp) / "audio.wav"
                write_audio(audio, wav_path)
                request["wav_path"] = str(wav_path)
            proc = self._ensure_proc()
            try:
                proc.stdin.write(json.dumps(request, sort_keys=True) + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise ContractError(f"recognizer process {self.name!r} died: {exc}") from exc
            if line == "":
                raise ContractError(f"recognizer process {self.name!r} closed its output")
            return line.split()

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# AVLR


@dataclass
class AvlrResult:
    wer: float
    hyp_tokens: list[str]


def avlr(
    motion: MotionSequence,
    clean_audio: SpeechTrack,
    ref_tokens: list[str],
    recognizer: Recognizer,
    snr_db: float,
    seed: int = 0,
    noise: SpeechTrack | None = None,
) -> AvlrResult:
    """WER of ``recognizer`` on the motion plus SNR-degraded audio."""
    if recognizer.modality != "audio-visual":
        raise ContractError(
            f"avlr needs an audio-visual recognizer, got modality {recognizer.modality!r}"
        )
    if abs(motion.duration_seconds - clean_audio.duration_seconds) >= 1.0 / motion.fps:
        raise ValidationError(
            f"motion/audio duration mismatch: {motion.duration_seconds:.4f}s vs "
            f"{clean_audio.duration_seconds:.4f}s exceeds one frame"
        )
    noisy = mix_noise(clean_audio, snr_db=snr_db, seed=seed, noise=noise)
    try:
        hyp = recognizer.transcribe(motion, noisy.track)
    except Exception as exc:
        raise ContractError(f"recognizer {recognizer.name!r} failed: {exc}") from exc
    return AvlrResult(wer=wer(ref_tokens, hyp), hyp_tokens=hyp)


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class EvalRow:
    clip_id: str
    language: str
    lve: float | None = None
    avlr_wer: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        """Per-language means recomputed from the rows (plus an overall entry)."""
        groups: dict[str, list[EvalRow]] = {}
        for row in self.rows:
            groups.setdefault(row.language, []).append(row)
        out = {}
        for lang in sorted(groups):
            rows = groups[lang]
            out[lang] = self._aggregate(rows)
        out["overall"] = self._aggregate(self.rows)
        return out

    @staticmethod
    def _aggregate(rows: list[EvalRow]) -> dict:
        lves = [r.lve for r in rows if r.lve is not None]
        wers = [r.avlr_wer for r in rows if r.avlr_wer is not None]
        return {
            "clip_count": len(rows),
            "lve_mean": float(np.mean(lves)) if lves else None,
            "avlr_wer_mean": float(np.mean(wers)) if wers else None,
        }

    def as_dict(self) -> dict:
        return {
            "config": dict(self.config),
            "rows": [
                {"clip_id": r.clip_id, "language": r.language, "lve": r.lve, "avlr_wer": r.avlr_wer}
                for r in self.rows
            ],
            "aggregates": self.aggregates(),
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["clip_id", "language", "lve", "avlr_wer"])
            for r in self.rows:
                writer.writerow(
                    [
                        r.clip_id,
                        r.language,
                        "" if r.lve is None else repr(r.lve),
                        "" if r.avlr_wer is None else repr(r.avlr_wer),
                    ]
                )

    def spearman_lve_vs_wer(self) -> float | None:
        """Rank agreement between the two metrics over clips; None if undefined."""
        pairs = [(r.lve, r.avlr_wer) for r in self.rows if r.lve is not None and r.avlr_wer is not None]
        if len(pairs) < 2:
            return None
        try:
            return spearman_rho([p[0] for p in pairs], [p[1] for p in pairs])
        except MetricUndefined:
            return None


def _clip_noise_seed(seed: int, clip_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(clip_id.encode())]).generate_state(1)[0])


def evaluate_predictions(
    manifest: CorpusManifest,
    pred_dir,
    recognizers=None,
    split: str = "test",
    snr_db: float = -7.5,
    seed: int = 0,
    noise: SpeechTrack | None = None,
    compute_lve: bool = True,
) -> EvalReport:
    """Score predicted motion files against a corpus split.

    ``pred_dir`` holds one ``<clip_id>.mtlk`` per clip. ``recognizers`` is a
    Recognizer, a callable mapping a language tag to one, or None to skip
    AVLR. Noise seeds derive from (seed, clip id) so every clip gets its own
    reproducible noise.
    """
    clips = manifest.split_clips(split) if split else list(manifest.clips)
    if not clips:
        raise ValidationError(f"no clips to evaluate in split {split!r}")
    pred_dir = Path(pred_dir)
    rows = []
    for clip in clips:
        pred_path = pred_dir / f"{clip.clip_id}.mtlk"
        if not pred_path.exists():
            raise ValidationError(f"missing prediction for clip {clip.clip_id}: {pred_path}")
        pred = read_motion(pred_path)
        row = EvalRow(clip_id=clip.clip_id, language=clip.language)
        if compute_lve:
            gt = manifest.load_motion(clip)
            row.lve = lve(pred, gt, manifest.lip_vertex_indices)
        if recognizers is not None:
            rec = recognizers(clip.language) if callable(recognizers) else recognizers
            try:
                result = avlr(
                    pred,
                    manifest.load_audio(clip),
                    clip.transcript,
                    rec,
                    snr_db=snr_db,
                    seed=_clip_noise_seed(seed, clip.clip_id),
                    noise=noise,
                )
            except ContractError as exc:
                raise ContractError(f"clip {clip.clip_id}: {exc}") from exc
            row.avlr_wer = result.wer
        rows.append(row)
    config = {
        "split": split,
        "snr_db": snr_db,
        "noise": "white" if noise is None else "file",
        "seed": seed,
        "pred_dir": str(pred_dir),
    }
    return EvalReport(rows=rows, config=config)
