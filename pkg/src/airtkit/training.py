"""Training on a pixel subset, plus whole-sequence encoding/reconstruction.

Training never touches pixels outside its randomly drawn subset: the PCA
distillation teacher is fit on the subset alone, and each step corrupts a
batch, reconstructs, and compares against the uncorrupted originals.
Inference (encode/reconstruct) runs over every pixel of a sequence in
fixed-size chunks; the model is immutable there.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelState, corrupt, forward, loss, pca_targets
from .sequence import PixelMatrix, ThermogramSequence, ValidationError, center, reshape_raster, to_sequence

INFERENCE_CHUNK = 2048


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; carries the last epoch-end snapshot."""

    def __init__(self, message: str, last_good: ModelState | None, history: list):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    total: float
    rec: float
    kd: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: ModelState
    history: list[EpochStats]
    subset_indices: np.ndarray


def _subset_matrix(pm: PixelMatrix, idx: np.ndarray) -> PixelMatrix:
    # 1-row-per-pixel container; the raster shape is irrelevant for PCA
    return PixelMatrix(
        rows=pm.rows[idx],
        n_y=1,
        n_x=len(idx),
        centered=True,
        mean_frame=pm.mean_frame[idx],
    )


def train(pm: PixelMatrix, cfg: ModelConfig) -> TrainResult:
    """Masked-corruption training loop; deterministic given cfg.seed."""
    from .seeds import substream

    if not pm.centered:
        raise ValidationError("training expects a centered pixel matrix")
    if not 1 <= cfg.subset_size <= pm.n_pixels:
        raise ValidationError(
            f"subset_size {cfg.subset_size} out of range [1, {pm.n_pixels}]"
        )
    if cfg.n_t != pm.n_t:
        raise ValidationError(f"config n_t {cfg.n_t} != matrix n_t {pm.n_t}")

    rng_subset = substream(cfg.seed, "train-subset")
    rng_corrupt = substream(cfg.seed, "train-corrupt")
    rng_shuffle = substream(cfg.seed, "train-shuffle")

    subset = np.sort(rng_subset.choice(pm.n_pixels, size=cfg.subset_size, replace=False))
    samples = pm.rows[subset]
    teacher = pca_targets(_subset_matrix(pm, subset), cfg.latent_dim)

    model = ModelState.initialize(cfg)
    opt = ad.AdamState.for_params(model.param_list(), lr=cfg.lr)
    history: list[EpochStats] = []
    last_good: ModelState | None = None

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng_shuffle.permutation(cfg.subset_size)
        sums = np.zeros(3)
        for lo in range(0, cfg.subset_size, cfg.batch_size):
            batch_idx = order[lo : lo + cfg.batch_size]
            clean = samples[batch_idx]
            corrupted = corrupt(clean, cfg, rng_corrupt)
            try:
                z, recon = forward(model, corrupted.values)
                values = loss(z, recon, clean, teacher[batch_idx], cfg.kd_weight)
                model.zero_grad()
                values.total.backward()
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                         for p in model.param_list()]
                ad.adam_step(model.param_list(), grads, opt)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"training diverged at epoch {epoch + 1}: {exc}", last_good, history
                ) from exc
            n = len(batch_idx)
            sums += n * np.array(
                [values.total.item(), values.rec.item(), values.kd.item()]
            )
        wall = time.perf_counter() - start
        mean_total, mean_rec, mean_kd = sums / cfg.subset_size
        history.append(
            EpochStats(
                epoch=epoch + 1,
                total=mean_total,
                rec=mean_rec,
                kd=mean_kd,
                wall_seconds=wall,
            )
        )
        last_good = model.copy()

    return TrainResult(model=model, history=history, subset_indices=subset)


@dataclass(frozen=True)
class LatentImageStack:
    """One image per latent coordinate, reassembled over the pixel raster."""

    images: np.ndarray  # (latent_dim, n_y, n_x)
    mins: np.ndarray  # per-image min, for normalization bookkeeping
    maxs: np.ndarray
    provenance: dict

    def __post_init__(self):
        if not np.all(np.isfinite(self.images)):
            raise ValidationError("latent images contain non-finite values")

    @property
    def n_images(self) -> int:
        return self.images.shape[0]


def _encode_rows(model: ModelState, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward all rows in chunks; returns (latents, reconstructions)."""
    zs, recons = [], []
    with ad.no_grad():
        for lo in range(0, rows.shape[0], INFERENCE_CHUNK):
            z, recon = forward(model, rows[lo : lo + INFERENCE_CHUNK])
            zs.append(z.data)
            recons.append(recon.data)
    return np.concatenate(zs, axis=0), np.concatenate(recons, axis=0)


def _dataset_id(seq: ThermogramSequence) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(seq.frames, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def encode_sequence(seq: ThermogramSequence, model: ModelState) -> LatentImageStack:
    """Latent image stack for every pixel of a sequence.

    All pixels are encoded regardless of the training subset; the stack
    carries config, checkpoint hash, and a dataset id for auditability.
    """
    if seq.n_t != model.config.n_t:
        raise ValidationError(
            f"sequence has n_t={seq.n_t} but model expects {model.config.n_t}"
        )
    pm = center(reshape_raster(seq))
    z, _ = _encode_rows(model, pm.rows)
    images = z.T.reshape(model.config.latent_dim, seq.n_y, seq.n_x)
    return LatentImageStack(
        images=images,
        mins=images.min(axis=(1, 2)),
        maxs=images.max(axis=(1, 2)),
        provenance={
            "config": model.config.to_dict(),
            "checkpoint_hash": model.content_hash(),
            "dataset_id": _dataset_id(seq),
        },
    )


def reconstruct_sequence(seq: ThermogramSequence, model: ModelState) -> ThermogramSequence:
    """Denoised copy of a sequence: per-pixel reconstruction, means restored."""
    if seq.n_t != model.config.n_t:
        raise ValidationError(
            f"sequence has n_t={seq.n_t} but model expects {model.config.n_t}"
        )
    pm = center(reshape_raster(seq))
    _, recon = _encode_rows(model, pm.rows)
    restored = PixelMatrix(
        rows=recon + pm.mean_frame[:, None], n_y=seq.n_y, n_x=seq.n_x, centered=False
    )
    return to_sequence(restored, seq.dt)
