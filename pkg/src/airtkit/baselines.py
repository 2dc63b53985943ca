"""Classical dimensionality-reduction references: PCA, TSR, and PPT.

All three operate per pixel on the flattened response matrix and are pure
functions of their inputs, so results do not depend on any parallel
execution strategy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sequence import PixelMatrix, ValidationError


@dataclass(frozen=True)
class PCAResult:
    """Top-k temporal modes of the pixel matrix.

    ``components`` are orthonormal right singular vectors (k, n_t);
    ``scores`` (P, k) are the projections of each pixel response;
    ``explained_variance`` is the per-component mean squared score,
    descending. ``rank`` is the numerical rank of the input.
    """

    components: np.ndarray
    scores: np.ndarray
    explained_variance: np.ndarray
    rank: int

    def score_images(self, n_y: int, n_x: int) -> np.ndarray:
        """Reassemble score columns into a (k, n_y, n_x) image stack."""
        k = self.scores.shape[1]
        return self.scores.T.reshape(k, n_y, n_x)


def pca(pm: PixelMatrix, k: int) -> PCAResult:
    """SVD-based principal component analysis of a centered pixel matrix.

    The rank-k reconstruction ``scores @ components`` is the best rank-k
    approximation in the Frobenius norm. Component signs are fixed so each
    component's largest-magnitude entry is positive, making output
    deterministic across SVD implementations.
    """
    if not pm.centered:
        raise ValidationError("pca requires a centered matrix")
    n_pixels, n_t = pm.rows.shape
    if not 1 <= k <= min(n_pixels, n_t):
        raise ValidationError(f"k={k} out of range [1, {min(n_pixels, n_t)}]")
    u, s, vt = np.linalg.svd(pm.rows, full_matrices=False)
    tol = s[0] * max(n_pixels, n_t) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    components = vt[:k].copy()
    # deterministic sign: largest-magnitude entry of each component positive
    flips = np.sign(components[np.arange(k), np.argmax(np.abs(components), axis=1)])
    flips[flips == 0] = 1.0
    components *= flips[:, None]
    scores = pm.rows @ components.T
    explained = (s[:k] ** 2) / n_pixels
    return PCAResult(
        components=components,
        scores=scores,
        explained_variance=explained,
        rank=rank,
    )


@dataclass(frozen=True)
class TSRResult:
    """Per-pixel log-log polynomial fit of the thermal decay.

    ``coeffs[p, j]`` is the coefficient of (ln t)^j for pixel p. Pixels with
    non-positive samples cannot be fit in log space; they are flagged False
    in ``valid`` and their outputs are NaN. The log-log derivatives are
    evaluated analytically at the mid-sequence time.
    """

    coeffs: np.ndarray  # (P, degree + 1), ascending powers
    first_deriv: np.ndarray  # (P,)
    second_deriv: np.ndarray  # (P,)
    valid: np.ndarray  # (P,) bool
    degree: int

    def image_stack(self, n_y: int, n_x: int, fill: float = 0.0) -> np.ndarray:
        """Coefficient and derivative images, (degree + 3, n_y, n_x)."""
        planes = np.concatenate(
            [self.coeffs, self.first_deriv[:, None], self.second_deriv[:, None]],
            axis=1,
        ).T.copy()
        planes[:, ~self.valid] = fill
        return planes.reshape(-1, n_y, n_x)


def tsr(pm: PixelMatrix, degree: int = 5, times: np.ndarray | None = None) -> TSRResult:
    """Least-squares polynomial fit of ln(T) against ln(t), per pixel.

    Expects raw (uncentered) positive responses. ``times`` defaults to the
    frame index 1..n_t; a uniform time rescale only shifts the log abscissa,
    which leaves power-law slopes intact.
    """
    if pm.centered:
        raise ValidationError("tsr operates on raw (uncentered) responses")
    if degree < 1:
        raise ValidationError(f"degree must be >= 1, got {degree}")
    n_pixels, n_t = pm.rows.shape
    if n_t <= degree:
        raise ValidationError(f"need more than degree={degree} samples, got {n_t}")
    if times is None:
        times = np.arange(1, n_t + 1, dtype=np.float64)
    else:
        times = np.asarray(times, dtype=np.float64)
        if times.shape != (n_t,) or not np.all(times > 0):
            raise ValidationError("times must be n_t positive values")

    valid = np.all(pm.rows > 0, axis=1)
    log_t = np.log(times)
    design = np.vander(log_t, degree + 1, increasing=True)

    coeffs = np.full((n_pixels, degree + 1), np.nan)
    if valid.any():
        log_T = np.log(pm.rows[valid])
        sol, *_ = np.linalg.lstsq(design, log_T.T, rcond=None)
        coeffs[valid] = sol.T

    x_mid = log_t[n_t // 2]
    d1 = np.polynomial.polynomial.polyder(coeffs.T, m=1)
    d2 = np.polynomial.polynomial.polyder(coeffs.T, m=2)
    first = np.polynomial.polynomial.polyval(x_mid, d1)
    second = (
        np.polynomial.polynomial.polyval(x_mid, d2)
        if degree >= 2
        else np.zeros(n_pixels)
    )
    first = np.where(valid, first, np.nan)
    second = np.where(valid, second, np.nan)
    return TSRResult(
        coeffs=coeffs, first_deriv=first, second_deriv=second, valid=valid, degree=degree
    )


@dataclass(frozen=True)
class PPTResult:
    """Per-pixel phase (and magnitude) of the temporal Fourier transform.

    Bins run 0..floor(n_t / 2); phase is atan2(Im, Re).
    """

    phases: np.ndarray  # (n_bins, P)
    magnitudes: np.ndarray  # (n_bins, P)

    def phase_images(self, n_y: int, n_x: int) -> np.ndarray:
        return self.phases.reshape(-1, n_y, n_x)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def temporal_spectrum(rows: np.ndarray) -> np.ndarray:
    """Full complex DFT over time for each pixel row.

    Power-of-two lengths take the O(n log n) transform; other lengths use
    the O(n^2) definition. Both paths agree to well below 1e-9.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n_t = rows.shape[1]
    if _is_pow2(n_t):
        return np.fft.fft(rows, axis=1)
    grid = np.arange(n_t)
    dft = np.exp(-2j * np.pi * np.outer(grid, grid) / n_t)
    return rows @ dft


def ppt(pm: PixelMatrix) -> PPTResult:
    """Pulsed phase thermography: phase images per frequency bin."""
    spectrum = temporal_spectrum(pm.rows)
    n_bins = pm.n_t // 2 + 1
    half = spectrum[:, :n_bins].T
    return PPTResult(phases=np.angle(half), magnitudes=np.abs(half))
