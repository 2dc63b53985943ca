"""Thermogram sequence containers, raster reshaping, and temporal centering.

A recorded inspection is a stack of IR frames over time. For per-pixel
analysis the stack is flattened to a matrix with one row per pixel (its
thermal response over time), optionally centered by removing each pixel's
temporal mean. Values are treated as unitless (camera counts or kelvin work
identically); callers decide what they mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ValidationError(ValueError):
    """Raised when a container would violate its invariants."""


@dataclass(frozen=True)
class ThermogramSequence:
    """3-D stack of thermograms: ``frames[k, y, x]`` at time ``(k + 1) * dt``.

    Immutable after construction; safe to share across workers.
    """

    frames: np.ndarray  # (n_t, n_y, n_x) float64
    dt: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3:
            raise ValidationError(f"frames must be 3-D, got shape {frames.shape}")
        n_t, n_y, n_x = frames.shape
        if n_t < 2:
            raise ValidationError(f"need at least 2 frames, got {n_t}")
        if n_y < 1 or n_x < 1:
            raise ValidationError(f"frame size must be >= 1x1, got {n_y}x{n_x}")
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_t(self) -> int:
        return self.frames.shape[0]

    @property
    def n_y(self) -> int:
        return self.frames.shape[1]

    @property
    def n_x(self) -> int:
        return self.frames.shape[2]

    @property
    def times(self) -> np.ndarray:
        """Sample times, starting at dt (the first frame after the pulse)."""
        return self.dt * np.arange(1, self.n_t + 1)


@dataclass(frozen=True)
class PixelMatrix:
    """Per-pixel thermal responses: ``rows[p]`` is the time series of pixel p.

    Row p maps to pixel (y, x) via p = y * n_x + x (row-major raster).
    When centered, ``mean_frame[p]`` holds the temporal mean that was
    subtracted from row p.
    """

    rows: np.ndarray  # (P, n_t) float64
    n_y: int
    n_x: int
    centered: bool = False
    mean_frame: np.ndarray | None = field(default=None)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValidationError(f"rows must be 2-D, got shape {rows.shape}")
        if rows.shape[0] != self.n_y * self.n_x:
            raise ValidationError(
                f"{rows.shape[0]} rows inconsistent with {self.n_y}x{self.n_x} raster"
            )
        if not np.all(np.isfinite(rows)):
            raise ValidationError("rows contain non-finite values")
        if self.centered:
            if self.mean_frame is None:
                raise ValidationError("centered matrix must retain mean_frame")
            mf = np.asarray(self.mean_frame, dtype=np.float64)
            if mf.shape != (rows.shape[0],):
                raise ValidationError("mean_frame length must equal pixel count")
            tol = 1e-6 * rows.shape[1] * max(np.abs(rows).max(), 1e-300)
            if np.abs(rows.sum(axis=1)).max() > tol:
                raise ValidationError("centered rows do not sum to zero")
            mf.setflags(write=False)
            object.__setattr__(self, "mean_frame", mf)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def n_pixels(self) -> int:
        return self.rows.shape[0]

    @property
    def n_t(self) -> int:
        return self.rows.shape[1]

    def pixel_index(self, y: int, x: int) -> int:
        return y * self.n_x + x

    def pixel_coords(self, p: int) -> tuple[int, int]:
        return divmod(p, self.n_x)


def reshape_raster(seq: ThermogramSequence) -> PixelMatrix:
    """Flatten a sequence to one row per pixel in row-major raster order."""
    n_t = seq.n_t
    rows = seq.frames.reshape(n_t, seq.n_y * seq.n_x).T.copy()
    return PixelMatrix(rows=rows, n_y=seq.n_y, n_x=seq.n_x, centered=False)


def to_sequence(pm: PixelMatrix, dt: float) -> ThermogramSequence:
    """Inverse raster: reassemble a pixel matrix into frames."""
    frames = pm.rows.T.reshape(pm.n_t, pm.n_y, pm.n_x).copy()
    return ThermogramSequence(frames=frames, dt=dt)


def center(pm: PixelMatrix) -> PixelMatrix:
    """Subtract each pixel's temporal mean, retaining the means.

    Double-centering almost always signals a pipeline bug, so an
    already-centered input is rejected.
    """
    if pm.centered:
        raise ValidationError("matrix is already centered")
    means = pm.rows.mean(axis=1)
    rows = pm.rows - means[:, None]
    return PixelMatrix(
        rows=rows, n_y=pm.n_y, n_x=pm.n_x, centered=True, mean_frame=means
    )


def uncenter(pm: PixelMatrix) -> PixelMatrix:
    """Add the retained temporal means back, undoing :func:`center`."""
    if not pm.centered:
        raise ValidationError("matrix is not centered")
    rows = pm.rows + pm.mean_frame[:, None]
    return PixelMatrix(rows=rows, n_y=pm.n_y, n_x=pm.n_x, centered=False)
