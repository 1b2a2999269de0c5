"""Discrete motion codebook: transformer VQ-VAE over 3D facial vertex tracks.

Motion is modeled as per-frame vertex offsets from a corpus template face.
The encoder stacks frames by the temporal stride, maps them through a
transformer into continuous latents, and each latent is snapped to its
nearest codebook entry (squared L2, lowest index on ties). The decoder mirrors
the encoder and emits offsets that are added back onto the template.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import CorpusManifest, MotionSequence
from .errors import DivergenceError, FormatError, ValidationError

CHECKPOINT_VERSION = 1
STAGE1_KIND = "motion-vqvae"


@dataclass
class VQVAEConfig:
    n_vertices: int
    codebook_size: int = 256
    latent_dim: int = 64
    stride: int = 2
    width: int = 128
    layers: int = 4
    heads: int = 4
    ff_width: int = 512
    dropout: float = 0.0
    commitment_weight: float = 0.25
    max_frames: int = 2048

    def __post_init__(self):
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")
        if self.codebook_size < 1 or self.latent_dim < 1:
            raise ValidationError("codebook_size and latent_dim must be positive")
        if self.width % self.heads != 0:
            raise ValidationError(f"width {self.width} not divisible by heads {self.heads}")


def quantize(latents: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Snap each latent row to the nearest codebook row.

    Distance is squared Euclidean; ties resolve to the lowest codebook index.
    Returns (quantized, indices) with quantized detached from the codebook
    graph only through indexing (callers pick their own gradient routing).
    """
    if latents.ndim != 2 or codebook.ndim != 2:
        raise ValidationError(
            f"quantize expects 2D tensors, got {tuple(latents.shape)} and {tuple(codebook.shape)}"
        )
    if latents.shape[1] != codebook.shape[1]:
        raise ValidationError(
            f"latent dim {latents.shape[1]} != codebook dim {codebook.shape[1]}"
        )
    # direct differences, not the |z|^2 - 2zc + |c|^2 expansion: cancellation
    # there can flip near-ties, and argmin must honor the lowest-index rule
    d2 = ((latents[:, None, :] - codebook[None, :, :]) ** 2).sum(dim=2)
    idx = d2.argmin(dim=1)
    return codebook[idx], idx


def code_perplexity(indices, codebook_size: int) -> float:
    """exp(entropy) of the empirical code histogram; K means all codes equally used."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValidationError("code_perplexity: empty index array")
    if idx.min() < 0 or idx.max() >= codebook_size:
        raise ValidationError("code_perplexity: index out of range")
    counts = np.bincount(idx, minlength=codebook_size).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def codebook_report(index_sequences, codebook_size: int) -> dict:
    """Usage histogram, perplexity, and dead-code count over index sequences.

    Accepts one index array or a list of them (one per clip). Dead codes are
    never re-seeded during training, so this is the place to notice them.
    """
    seqs = index_sequences if isinstance(index_sequences, (list, tuple)) else [index_sequences]
    if len(seqs) == 0:
        raise ValidationError("codebook_report: no index sequences")
    flat = np.concatenate([np.asarray(s, dtype=np.int64).ravel() for s in seqs])
    perplexity = code_perplexity(flat, codebook_size)
    usage = np.bincount(flat, minlength=codebook_size)
    return {
        "usage": usage.tolist(),
        "perplexity": perplexity,
        "dead_codes": int((usage == 0).sum()),
    }


def vq_loss(
    recon: torch.Tensor,
    target: torch.Tensor,
    encoded: torch.Tensor,
    quantized: torch.Tensor,
    commitment_weight: float = 0.25,
) -> tuple[torch.Tensor, dict]:
    """Reconstruction + codebook + commitment terms, each an element mean.

    Reconstruction is mean absolute vertex error. The codebook term moves
    entries toward (stopped) encoder outputs; the commitment term holds the
    encoder near its assigned entries.
    """
    if recon.shape != target.shape:
        raise ValidationError(f"recon shape {tuple(recon.shape)} != target {tuple(target.shape)}")
    if encoded.shape != quantized.shape:
        raise ValidationError("encoded and quantized latents must share a shape")
    reconstruction = (recon - target).abs().mean()
    codebook_term = ((encoded.detach() - quantized) ** 2).mean()
    commitment = ((encoded - quantized.detach()) ** 2).mean()
    total = reconstruction + codebook_term + commitment_weight * commitment
    parts = {
        "reconstruction": float(reconstruction.detach()),
        "codebook": float(codebook_term.detach()),
        "commitment": float(commitment.detach()),
        "total": float(total.detach()),
    }
    return total, parts


def sinusoid_table(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float32) * (-math.log(10000.0) / width))
    table = torch.zeros(length, width)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class MotionVQVAE(nn.Module):
    """Stage-1 model. Operates on single unbatched sequences (T, N, 3)."""

    def __init__(self, config: VQVAEConfig):
        super().__init__()
        self.config = config
        c = config
        frame_dim = c.stride * c.n_vertices * 3
        self.input_proj = nn.Linear(frame_dim, c.width)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=c.width,
            nhead=c.heads,
            dim_feedforward=c.ff_width,
            dropout=c.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(enc_layer, num_layers=c.layers, enable_nested_tensor=False)
        self.to_latent = nn.Linear(c.width, c.latent_dim)
        self.codebook = nn.Parameter(
            torch.randn(c.codebook_size, c.latent_dim) / math.sqrt(c.latent_dim)
        )
        self.from_latent = nn.Linear(c.latent_dim, c.width)
        dec_layer = nn.TransformerEncoderLayer(
            d_model=c.width,
            nhead=c.heads,
            dim_feedforward=c.ff_width,
            dropout=c.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.decoder = nn.TransformerEncoder(dec_layer, num_layers=c.layers, enable_nested_tensor=False)
        self.output_proj = nn.Linear(c.width, frame_dim)
        self.register_buffer("template", torch.zeros(c.n_vertices, 3))
        self.register_buffer("pos_table", sinusoid_table(c.max_frames, c.width), persistent=False)

    def set_template(self, template: np.ndarray | torch.Tensor) -> None:
        t = torch.as_tensor(np.asarray(template), dtype=torch.float32)
        if t.shape != (self.config.n_vertices, 3):
            raise ValidationError(f"template shape {tuple(t.shape)} != ({self.config.n_vertices}, 3)")
        with torch.no_grad():
            self.template.copy_(t)

    def _stack_frames(self, flat: torch.Tensor) -> torch.Tensor:
        q = self.config.stride
        t = flat.shape[0]
        t_pad = -(-t // q) * q
        if t_pad != t:
            flat = torch.cat([flat, flat[-1:].expand(t_pad - t, -1)], dim=0)
        return flat.reshape(t_pad // q, q * flat.shape[1])

    @staticmethod
    def _run_stack(stack: nn.TransformerEncoder, h: torch.Tensor, tag: str) -> torch.Tensor:
        # unrolled instead of stack(h) so a blown-up layer is named in the error
        for i, layer in enumerate(stack.layers):
            h = layer(h)
            if not torch.isfinite(h).all():
                raise DivergenceError(f"{tag} layer {i}: non-finite activation")
        return h

    def encode(self, vertices: torch.Tensor) -> torch.Tensor:
        """(T, N, 3) absolute vertices -> (T', latent_dim) continuous latents."""
        c = self.config
        if vertices.ndim != 3 or vertices.shape[1:] != (c.n_vertices, 3):
            raise ValidationError(f"encode expects (T, {c.n_vertices}, 3), got {tuple(vertices.shape)}")
        offsets = (vertices - self.template).reshape(vertices.shape[0], -1)
        stacked = self._stack_frames(offsets)
        if stacked.shape[0] > c.max_frames:
            raise ValidationError(f"sequence too long for positional table ({stacked.shape[0]} latents)")
        h = self.input_proj(stacked) + self.pos_table[: stacked.shape[0]]
        h = self._run_stack(self.encoder, h[None], "encoder")[0]
        return self.to_latent(h)

    def quantize_latents(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return quantize(latents, self.codebook)

    def straight_through(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (pass_through, quantized, indices); pass_through carries
        encoder gradients across the snap."""
        quantized, indices = quantize(latents, self.codebook)
        return latents + (quantized - latents).detach(), quantized, indices

    def decode_latents(self, latents: torch.Tensor, n_frames: int) -> torch.Tensor:
        """(T', latent_dim) -> (n_frames, N, 3) absolute vertices."""
        c = self.config
        if latents.ndim != 2 or latents.shape[1] != c.latent_dim:
            raise ValidationError(f"decode expects (T', {c.latent_dim}), got {tuple(latents.shape)}")
        if n_frames > latents.shape[0] * c.stride:
            raise ValidationError(
                f"n_frames={n_frames} exceeds {latents.shape[0]} latents * stride {c.stride}"
            )
        h = self.from_latent(latents) + self.pos_table[: latents.shape[0]]
        h = self._run_stack(self.decoder, h[None], "decoder")[0]
        frames = self.output_proj(h).reshape(latents.shape[0] * c.stride, c.n_vertices, 3)
        return frames[:n_frames] + self.template

    def forward(self, vertices: torch.Tensor) -> dict:
        encoded = self.encode(vertices)
        passed, quantized, indices = self.straight_through(encoded)
        recon = self.decode_latents(passed, vertices.shape[0])
        return {
            "reconstruction": recon,
            "encoded": encoded,
            "quantized": quantized,
            "indices": indices,
        }

    # convenience wrappers over MotionSequence, inference only

    @torch.no_grad()
    def encode_motion(self, motion: MotionSequence) -> np.ndarray:
        self.eval()
        z = self.encode(torch.from_numpy(motion.vertices.copy()))
        _, idx = self.quantize_latents(z)
        return idx.numpy()

    @torch.no_grad()
    def decode_indices(self, indices, n_frames: int, fps: float) -> MotionSequence:
        self.eval()
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        if idx.ndim != 1:
            raise ValidationError(f"indices must be 1D, got shape {tuple(idx.shape)}")
        if idx.numel() == 0 or idx.min() < 0 or idx.max() >= self.config.codebook_size:
            raise ValidationError("indices empty or out of codebook range")
        verts = self.decode_latents(self.codebook[idx], n_frames)
        return MotionSequence(vertices=verts.numpy(), fps=fps)

    @torch.no_grad()
    def reconstruct(self, motion: MotionSequence) -> tuple[MotionSequence, np.ndarray]:
        self.eval()
        out = self.forward(torch.from_numpy(motion.vertices.copy()))
        return (
            MotionSequence(vertices=out["reconstruction"].numpy(), fps=motion.fps),
            out["indices"].numpy(),
        )


def compute_template(manifest: CorpusManifest, split: str = "train") -> np.ndarray:
    """Template face: mean of the first frame of every clip in the split."""
    clips = manifest.split_clips(split)
    if not clips:
        raise ValidationError(f"split {split!r} is empty")
    acc = np.zeros((manifest.vertex_count, 3), dtype=np.float64)
    for clip in clips:
        acc += manifest.load_motion(clip).vertices[0].astype(np.float64)
    return (acc / len(clips)).astype(np.float32)


@dataclass
class Stage1TrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 10


def train_stage1(
    manifest: CorpusManifest,
    model_config: VQVAEConfig | None = None,
    train_config: Stage1TrainConfig | None = None,
    log=None,
) -> tuple[MotionVQVAE, list[dict]]:
    """Fit the motion codebook on the manifest's train split, one clip per step."""
    tc = train_config or Stage1TrainConfig()
    mc = model_config or VQVAEConfig(n_vertices=manifest.vertex_count)
    if mc.n_vertices != manifest.vertex_count:
        raise ValidationError(
            f"model n_vertices {mc.n_vertices} != corpus vertex count {manifest.vertex_count}"
        )
    torch.manual_seed(tc.seed)
    model = MotionVQVAE(mc)
    model.set_template(compute_template(manifest))
    clips = manifest.split_clips("train")
    if not clips:
        raise ValidationError("train split is empty")
    tracks = [torch.from_numpy(manifest.load_motion(c).vertices.copy()) for c in clips]
    opt = torch.optim.AdamW(
        model.parameters(), lr=tc.lr, betas=tc.betas, eps=tc.eps, weight_decay=tc.weight_decay
    )
    order_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0x51]))
    history: list[dict] = []
    model.train()
    for epoch in range(tc.epochs):
        order = order_rng.permutation(len(tracks))
        sums = {"total": 0.0, "reconstruction": 0.0, "codebook": 0.0, "commitment": 0.0}
        epoch_indices = []
        for i in order:
            verts = tracks[i]
            out = model(verts)
            loss, parts = vq_loss(
                out["reconstruction"], verts, out["encoded"], out["quantized"], mc.commitment_weight
            )
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch + 1}", last_good=history
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k in sums:
                sums[k] += parts[k]
            epoch_indices.append(out["indices"].numpy())
        row = {k: v / len(tracks) for k, v in sums.items()}
        row["epoch"] = epoch + 1
        row["perplexity"] = code_perplexity(np.concatenate(epoch_indices), mc.codebook_size)
        history.append(row)
        if log is not None and ((epoch + 1) % tc.log_every == 0 or epoch == 0):
            log(
                f"stage1 epoch {epoch + 1}/{tc.epochs} "
                f"loss {row['total']:.4f} recon {row['reconstruction']:.4f} "
                f"perplexity {row['perplexity']:.1f}"
            )
    model.eval()
    return model, history


def save_stage1(model: MotionVQVAE, path, seed: int, history: list[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": STAGE1_KIND,
            "config": asdict(model.config),
            "seed": seed,
            "state_dict": model.state_dict(),
            "loss_history": history,
        },
        path,
    )


def load_stage1(path) -> tuple[MotionVQVAE, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("kind") != STAGE1_KIND:
        raise FormatError(f"{path}: not a {STAGE1_KIND} checkpoint")
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    model = MotionVQVAE(VQVAEConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob
