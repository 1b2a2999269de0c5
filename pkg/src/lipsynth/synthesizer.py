"""Speech-to-motion synthesis over a frozen motion codebook.

A transformer decoder attends causally over already-emitted motion latents and
cross-attends over speech features resampled to the latent timeline. A learned
per-language style vector is projected into model width and prepended to the
speech memory as its first token, which is how one model speaks multiple
languages whose audio is ambiguous. Generation is greedy: each predicted
latent is snapped to the codebook, the decoded motion prefix is re-encoded,
and the result conditions the next step.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import CorpusManifest, MotionSequence, SpeechTrack
from .errors import DivergenceError, FormatError, UnknownLanguageError, ValidationError
from .speech import SpeechEncoderAdapter, SpeechFeatures, align_to_motion, extract_checked
from .vqvae import CHECKPOINT_VERSION, MotionVQVAE, quantize, sinusoid_table

STAGE2_KIND = "motion-synthesizer"


@dataclass
class SynthesizerConfig:
    speech_dim: int
    languages: list[str]
    latent_dim: int = 64
    width: int = 128
    layers: int = 3
    heads: int = 4
    ff_width: int = 512
    dropout: float = 0.0
    style_dim: int = 16
    use_style: bool = True
    max_frames: int = 2048

    def __post_init__(self):
        if not self.languages:
            raise ValidationError("languages must be non-empty")
        if len(set(self.languages)) != len(self.languages):
            raise ValidationError("languages contains duplicates")
        if self.width % self.heads != 0:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")


def generation_loss(
    predicted: torch.Tensor,
    snapped: torch.Tensor,
    recon: torch.Tensor,
    target: torch.Tensor,
) -> tuple[torch.Tensor, dict]:
    """Latent term + vertex term, each an element mean of squared error.

    The latent term pulls continuous predictions onto their (stopped) nearest
    codebook entries; the vertex term scores the decoded motion against ground
    truth.
    """
    if predicted.shape != snapped.shape:
        raise ValidationError("predicted and snapped latents must share a shape")
    if recon.shape != target.shape:
        raise ValidationError(f"recon shape {tuple(recon.shape)} != target {tuple(target.shape)}")
    latent = ((predicted - snapped.detach()) ** 2).mean()
    vertex = ((recon - target) ** 2).mean()
    total = latent + vertex
    parts = {
        "latent": float(latent.detach()),
        "vertex": float(vertex.detach()),
        "total": float(total.detach()),
    }
    return total, parts


class MotionSynthesizer(nn.Module):
    """Stage-2 model. Single unbatched sequences, like the codebook model."""

    def __init__(self, config: SynthesizerConfig):
        super().__init__()
        self.config = config
        c = config
        self.language_index = {tag: i for i, tag in enumerate(c.languages)}
        n_styles = len(c.languages) if c.use_style else 1
        self.style_table = nn.Embedding(n_styles, c.style_dim)
        self.style_proj = nn.Linear(c.style_dim, c.width)
        self.speech_proj = nn.Linear(c.speech_dim, c.width)
        self.context_proj = nn.Linear(c.latent_dim, c.width)
        self.start_token = nn.Parameter(torch.randn(c.width) * 0.02)
        layer = nn.TransformerDecoderLayer(
            d_model=c.width,
            nhead=c.heads,
            dim_feedforward=c.ff_width,
            dropout=c.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(layer, num_layers=c.layers)
        self.latent_out = nn.Linear(c.width, c.latent_dim)
        self.register_buffer("pos_table", sinusoid_table(c.max_frames, c.width), persistent=False)

    def style_index(self, language: str) -> int:
        if language not in self.language_index:
            raise UnknownLanguageError(
                f"language {language!r} not in model languages {self.config.languages}"
            )
        return self.language_index[language] if self.config.use_style else 0

    def style_embedding(self, language: str, allow_unseen: bool = False) -> torch.Tensor:
        if language in self.language_index or not allow_unseen:
            return self.style_table(torch.tensor(self.style_index(language)))
        # opt-in escape hatch for tags absent at training time: average the
        # learned styles instead of silently picking one of them
        return self.style_table.weight.mean(dim=0)

    def _memory(
        self, speech: torch.Tensor, language: str, allow_unseen: bool = False
    ) -> torch.Tensor:
        c = self.config
        if speech.ndim != 2 or speech.shape[1] != c.speech_dim:
            raise ValidationError(
                f"speech memory expects (T', {c.speech_dim}), got {tuple(speech.shape)}"
            )
        if speech.shape[0] > c.max_frames:
            raise ValidationError("speech memory longer than positional table")
        mem = self.speech_proj(speech) + self.pos_table[: speech.shape[0]]
        style = self.style_proj(self.style_embedding(language, allow_unseen))
        # style is a global tag, not a timeline event, so it carries no position
        return torch.cat([style[None, :], mem], dim=0)

    def predict(
        self,
        speech: torch.Tensor,
        context: torch.Tensor,
        language: str,
        steps: int,
        allow_unseen: bool = False,
    ) -> torch.Tensor:
        """Predict ``steps`` latents given previously emitted context latents.

        context holds encoder latents of the motion produced so far; position
        t of the output attends to context rows < t plus the full memory.
        Teacher forcing passes the ground-truth context with steps equal to
        its length; generation passes the re-encoded prefix one step at a time.
        """
        c = self.config
        if context.ndim != 2 or context.shape[1] != c.latent_dim:
            raise ValidationError(
                f"context expects (t, {c.latent_dim}), got {tuple(context.shape)}"
            )
        if steps != context.shape[0] + 1:
            raise ValidationError(
                f"steps={steps} must be context length {context.shape[0]} plus one"
            )
        tgt = torch.cat([self.start_token[None, :], self.context_proj(context)], dim=0)
        tgt = tgt + self.pos_table[:steps]
        mask = torch.triu(torch.full((steps, steps), float("-inf")), diagonal=1)
        memory = self._memory(speech, language, allow_unseen)
        h = self.decoder(tgt[None], memory[None], tgt_mask=mask)[0]
        return self.latent_out(h)

    def forward(
        self, speech: torch.Tensor, gt_context: torch.Tensor, language: str
    ) -> torch.Tensor:
        """Teacher-forced prediction of every latent in the clip."""
        return self.predict(speech, gt_context[:-1], language, gt_context.shape[0])


def align_features(features: SpeechFeatures, n_latents: int, latent_fps: float) -> torch.Tensor:
    aligned = align_to_motion(features, n_latents, latent_fps)
    return torch.from_numpy(aligned)


@torch.no_grad()
def generate_motion(
    synthesizer: MotionSynthesizer,
    codebook_model: MotionVQVAE,
    features: SpeechFeatures,
    language: str,
    n_frames: int,
    fps: float,
    allow_unseen: bool = False,
) -> tuple[MotionSequence, np.ndarray]:
    """Autoregressive greedy decoding of a full clip.

    Each step re-encodes the decoded motion prefix so conditioning at test
    time matches what the decoder actually produced, not what it should have.
    Returns the motion and the emitted codebook indices.
    """
    if n_frames < 1:
        raise ValidationError(f"n_frames must be >= 1, got {n_frames}")
    synthesizer.eval()
    codebook_model.eval()
    stride = codebook_model.config.stride
    n_latents = -(-n_frames // stride)
    speech = align_features(features, n_latents, fps / stride)
    indices = []
    snapped_rows: list[torch.Tensor] = []
    context = torch.zeros(0, synthesizer.config.latent_dim)
    for t in range(n_latents):
        pred = synthesizer.predict(speech, context, language, t + 1, allow_unseen)[-1:]
        row, idx = quantize(pred, codebook_model.codebook)
        snapped_rows.append(row)
        indices.append(int(idx[0]))
        prefix = codebook_model.decode_latents(torch.cat(snapped_rows, dim=0), (t + 1) * stride)
        context = codebook_model.encode(prefix)
    verts = codebook_model.decode_latents(torch.cat(snapped_rows, dim=0), n_frames)
    motion = MotionSequence(vertices=verts.numpy(), fps=fps)
    return motion, np.asarray(indices, dtype=np.int64)


def synthesize_clip(
    synthesizer: MotionSynthesizer,
    codebook_model: MotionVQVAE,
    adapter: SpeechEncoderAdapter,
    track: SpeechTrack,
    language: str,
    fps: float,
    n_frames: int | None = None,
    allow_unseen: bool = False,
) -> MotionSequence:
    """Speech track in, motion out; frame count defaults to the audio duration."""
    if n_frames is None:
        n_frames = int(round(track.duration_seconds * fps))
    features = extract_checked(adapter, track)
    motion, _ = generate_motion(
        synthesizer, codebook_model, features, language, n_frames, fps, allow_unseen
    )
    return motion


@dataclass
class Stage2TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 10


def train_stage2(
    manifest: CorpusManifest,
    codebook_model: MotionVQVAE,
    adapter: SpeechEncoderAdapter,
    model_config: SynthesizerConfig | None = None,
    train_config: Stage2TrainConfig | None = None,
    log=None,
) -> tuple[MotionSynthesizer, list[dict]]:
    """Fit the synthesizer on the train split with the codebook model frozen.

    Teacher forcing: the self-attention context is the encoder's latents for
    the ground-truth motion. Predictions are snapped to the codebook and
    decoded through the frozen decoder; gradients reach the synthesizer
    through a straight-through pass around the snap.
    """
    tc = train_config or Stage2TrainConfig()
    mc = model_config or SynthesizerConfig(
        speech_dim=adapter.feature_dim, languages=list(manifest.languages)
    )
    if mc.speech_dim != adapter.feature_dim:
        raise ValidationError(
            f"config speech_dim {mc.speech_dim} != adapter feature_dim {adapter.feature_dim}"
        )
    if mc.latent_dim != codebook_model.config.latent_dim:
        raise ValidationError("latent_dim mismatch between synthesizer and codebook model")
    missing = [l for l in manifest.languages if l not in mc.languages]
    if missing and mc.use_style:
        raise ValidationError(f"corpus languages missing from config: {missing}")

    torch.manual_seed(tc.seed)
    model = MotionSynthesizer(mc)
    codebook_model.eval()
    for p in codebook_model.parameters():
        p.requires_grad_(False)

    clips = manifest.split_clips("train")
    if not clips:
        raise ValidationError("train split is empty")
    stride = codebook_model.config.stride
    prepared = []
    with torch.no_grad():
        for clip in clips:
            motion = manifest.load_motion(clip)
            verts = torch.from_numpy(motion.vertices.copy())
            gt_latents = codebook_model.encode(verts)
            feats = extract_checked(adapter, manifest.load_audio(clip))
            speech = align_features(feats, gt_latents.shape[0], motion.fps / stride)
            prepared.append((speech, gt_latents, verts, clip.language, motion.fps))

    opt = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tc.betas, eps=tc.eps)
    order_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x52]))
    history: list[dict] = []
    model.train()
    for epoch in range(tc.epochs):
        order = order_rng.permutation(len(prepared))
        sums = {"total": 0.0, "latent": 0.0, "vertex": 0.0}
        for i in order:
            speech, gt_latents, verts, language, _fps = prepared[i]
            pred = model(speech, gt_latents, language)
            snapped, _ = quantize(pred, codebook_model.codebook)
            passed = pred + (snapped - pred).detach()
            recon = codebook_model.decode_latents(passed, verts.shape[0])
            loss, parts = generation_loss(pred, snapped, recon, verts)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch + 1}", last_good=history
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k in sums:
                sums[k] += parts[k]
        row = {k: v / len(prepared) for k, v in sums.items()}
        row["epoch"] = epoch + 1
        history.append(row)
        if log is not None and ((epoch + 1) % tc.log_every == 0 or epoch == 0):
            log(
                f"stage2 epoch {epoch + 1}/{tc.epochs} "
                f"loss {row['total']:.4f} latent {row['latent']:.4f} vertex {row['vertex']:.4f}"
            )
    model.eval()
    return model, history


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_stage2(
    model: MotionSynthesizer,
    path,
    seed: int,
    history: list[dict],
    stage1_path=None,
    adapter_spec: dict | None = None,
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": STAGE2_KIND,
            "config": asdict(model.config),
            "seed": seed,
            "state_dict": model.state_dict(),
            "loss_history": history,
            "stage1_sha256": file_sha256(stage1_path) if stage1_path else None,
            "adapter_spec": adapter_spec,
        },
        path,
    )


def load_stage2(path, stage1_path=None) -> tuple[MotionSynthesizer, dict]:
    """Load a synthesizer; if stage1_path is given, verify it is the exact
    codebook checkpoint this model was trained against."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("kind") != STAGE2_KIND:
        raise FormatError(f"{path}: not a {STAGE2_KIND} checkpoint")
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    if stage1_path is not None and blob.get("stage1_sha256") is not None:
        actual = file_sha256(stage1_path)
        if actual != blob["stage1_sha256"]:
            raise ValidationError(
                f"codebook checkpoint mismatch: expected sha256 {blob['stage1_sha256']}, "
                f"got {actual}"
            )
    model = MotionSynthesizer(SynthesizerConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
