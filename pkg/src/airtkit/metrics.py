"""Defect-visibility metrics: contrast, SNR, IoU, and stack-level reports.

Contrast is the separation of defect and sound region means normalized by
their sum; SNR is the same separation normalized by the sound-region
standard deviation, reported both linear and in dB (20*log10, amplitude
convention). Latent / principal-component images are signed, so stack-level
scoring min-max normalizes each image to [0, 1] first; SNR is unaffected by
that (it is invariant under positive affine rescaling) and contrast becomes
well defined.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import read_pgm, write_pgm


class MetricError(ValueError):
    """Raised when a metric is undefined for the given regions."""


@dataclass(frozen=True)
class RegionMask:
    """Integer label image: 0 = sound, class ids >= 1 = defect discs.

    ``depths`` maps a class id to its defect depth in mm when known.
    """

    labels: np.ndarray
    depths: dict[int, float]

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 2:
            raise MetricError(f"labels must be 2-D, got shape {labels.shape}")
        if labels.min() < 0:
            raise MetricError("labels must be nonnegative")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def n_y(self) -> int:
        return self.labels.shape[0]

    @property
    def n_x(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels) if c > 0)

    def depth_of(self, class_id: int) -> float | None:
        return self.depths.get(class_id)

    def to_pgm(self, path: str | Path) -> None:
        """Binary mask file: 0 = sound, 255 = defect (class ids collapse)."""
        write_pgm(np.where(self.labels > 0, 255, 0), path, maxval=255)

    @classmethod
    def from_pgm(cls, path: str | Path) -> "RegionMask":
        img = read_pgm(path)
        return cls(labels=(img > 0).astype(np.int64), depths={})


def _regions(img: np.ndarray, mask: RegionMask, class_id: int | None):
    img = np.asarray(img, dtype=np.float64)
    if img.shape != mask.labels.shape:
        raise MetricError(
            f"image shape {img.shape} does not match mask {mask.labels.shape}"
        )
    defect_sel = mask.labels > 0 if class_id is None else mask.labels == class_id
    sound_sel = mask.labels == 0
    if not defect_sel.any():
        raise MetricError(f"empty defect region (class {class_id})")
    if not sound_sel.any():
        raise MetricError("empty sound region")
    return img[defect_sel], img[sound_sel]


def contrast(img: np.ndarray, mask: RegionMask, class_id: int | None = None) -> float:
    """|mean_defect - mean_sound| / (mean_defect + mean_sound).

    Assumes a nonnegative image (normalize signed images first); in [0, 1].
    """
    defect, sound = _regions(img, mask, class_id)
    mu_d, mu_s = defect.mean(), sound.mean()
    denom = mu_d + mu_s
    if denom == 0.0:
        raise MetricError("contrast undefined: region means sum to zero")
    return float(abs(mu_d - mu_s) / denom)


def snr(
    img: np.ndarray, mask: RegionMask, class_id: int | None = None
) -> tuple[float, float]:
    """|mean_defect - mean_sound| / std_sound, as (linear, dB).

    dB uses the amplitude convention 20*log10; a zero separation yields
    -inf dB as the sentinel.
    """
    defect, sound = _regions(img, mask, class_id)
    sigma_s = sound.std()
    if sigma_s == 0.0:
        raise MetricError("SNR undefined: sound region has zero variance")
    linear = float(abs(defect.mean() - sound.mean()) / sigma_s)
    db = 20.0 * math.log10(linear) if linear > 0 else float("-inf")
    return linear, db


def iou(pred: RegionMask, gt: RegionMask) -> float:
    """Intersection over union of defect pixels; 1.0 when both are empty."""
    if pred.labels.shape != gt.labels.shape:
        raise MetricError(
            f"mask shapes differ: {pred.labels.shape} vs {gt.labels.shape}"
        )
    p = pred.labels > 0
    g = gt.labels > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def normalize_unit(img: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant image maps to all zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


@dataclass(frozen=True)
class ClassMetrics:
    class_label: str  # depth in mm, or "all" for the aggregate row
    contrast: float
    snr_linear: float
    snr_db: float
    n_defect_px: int
    n_sound_px: int
    image_index: int  # winning image in the stack; -1 for the aggregate row


@dataclass(frozen=True)
class MetricsReport:
    method: str
    image_id: str
    rows: tuple[ClassMetrics, ...]
    iou: float | None = None

    @property
    def aggregate(self) -> ClassMetrics:
        return next(r for r in self.rows if r.class_label == "all")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["method", "class_mm", "contrast", "snr_db", "image_index"]
            )
            for r in self.rows:
                writer.writerow(
                    [self.method, r.class_label, r.contrast, r.snr_db, r.image_index]
                )

    def to_json(self, path: str | Path) -> None:
        def enc(x: float) -> float | str:
            return x if math.isfinite(x) else str(x)

        payload = {
            "method": self.method,
            "image_id": self.image_id,
            "iou": self.iou,
            "classes": [
                {
                    "class_mm": r.class_label,
                    "contrast": enc(r.contrast),
                    "snr_linear": enc(r.snr_linear),
                    "snr_db": enc(r.snr_db),
                    "n_defect_px": r.n_defect_px,
                    "n_sound_px": r.n_sound_px,
                    "image_index": r.image_index,
                }
                for r in self.rows
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)


def _class_label(mask: RegionMask, class_id: int) -> str:
    depth = mask.depth_of(class_id)
    return f"{depth:g}" if depth is not None else f"class{class_id}"


def best_of_stack(
    stack: np.ndarray, mask: RegionMask, method: str = "", image_id: str = ""
) -> MetricsReport:
    """Score an image stack: per defect class, the best contrast over images.

    Each image is min-max normalized before scoring. The winning image index
    is recorded per class so reports stay auditable; the aggregate row is the
    mean of the per-class values.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise MetricError(f"stack must be a nonempty 3-D array, got {stack.shape}")
    normalized = [normalize_unit(img) for img in stack]
    sound_count = int((mask.labels == 0).sum())

    rows = []
    for cid in mask.classes:
        best = None
        for idx, img in enumerate(normalized):
            try:
                c = contrast(img, mask, cid)
                lin, db = snr(img, mask, cid)
            except MetricError:
                continue  # degenerate image (e.g. constant); cannot win
            if best is None or c > best[0]:
                best = (c, lin, db, idx)
        # a stack with no scorable image shows nothing: zero visibility
        c, lin, db, idx = best if best is not None else (0.0, 0.0, float("-inf"), -1)
        rows.append(
            ClassMetrics(
                class_label=_class_label(mask, cid),
                contrast=c,
                snr_linear=lin,
                snr_db=db,
                n_defect_px=int((mask.labels == cid).sum()),
                n_sound_px=sound_count,
                image_index=idx,
            )
        )
    rows.append(
        ClassMetrics(
            class_label="all",
            contrast=float(np.mean([r.contrast for r in rows])),
            snr_linear=float(np.mean([r.snr_linear for r in rows])),
            snr_db=float(np.mean([r.snr_db for r in rows])),
            n_defect_px=int((mask.labels > 0).sum()),
            n_sound_px=sound_count,
            image_index=-1,
        )
    )
    return MetricsReport(method=method, image_id=image_id, rows=tuple(rows))


@dataclass(frozen=True)
class PcCurvePoint:
    pc_index: int  # 1-based
    contrast: float
    snr_db: float


def pc_visibility_curves(
    seq_frames_matrix, mask: RegionMask, k: int = 20
) -> list[PcCurvePoint]:
    """Contrast/SNR of the first k principal-component score images.

    Takes a centered :class:`~airtkit.sequence.PixelMatrix`; defect classes
    are pooled into one region (the curves are per-PC, not per-class).
    """
    from .baselines import pca  # local import keeps module deps one-way

    pm = seq_frames_matrix
    result = pca(pm, k)
    points = []
    for j in range(k):
        img = normalize_unit(result.scores[:, j].reshape(pm.n_y, pm.n_x))
        c = contrast(img, mask, None)
        _, db = snr(img, mask, None)
        points.append(PcCurvePoint(pc_index=j + 1, contrast=c, snr_db=db))
    return points


def denoise_then_pca_eval(seq, model, mask: RegionMask, k: int = 20):
    """Reconstruct a sequence through the autoencoder, then score its PCs.

    Cleaner reconstructions concentrate defect structure in the leading
    principal components, so these curves sit above the raw-sequence ones
    when denoising works.
    """
    from .sequence import center, reshape_raster
    from .training import reconstruct_sequence

    recon = reconstruct_sequence(seq, model)
    pm = center(reshape_raster(recon))
    return pc_visibility_curves(pm, mask, k=k)


def write_pc_curves(points: list[PcCurvePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pc_index", "contrast", "snr_db"])
        for p in points:
            writer.writerow([p.pc_index, p.contrast, p.snr_db])
