"""Classical matched-filter baseline with iterative background re-estimation.

Statistics are estimated per detector column (pushbroom convention): mean
spectrum mu, regularized sample covariance Sigma and target vector
t = mu * s. The per-pixel enhancement is

    alpha_hat(x) = (mu - x)^T Sigma^-1 t / (t^T Sigma^-1 t)

clamped below at zero. The (mu - x) orientation makes absorption (radiance
below background) map to positive concentration, consistent with the
Beer-Lambert forward model; a pixel one target-unit below the mean scores
exactly 1. The iterative variant re-estimates mu/Sigma from pixels currently
scored <= 0, excluding detected plume pixels from the background model.

Thresholding at 500 ppm*m and a 3x3 morphological opening ("cross" or
"ones" kernel, outside-image treated as 0) turn the enhancement map into the
baseline detection mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datacube import HyperCube
from .errors import DataError, NumericError
from .simulate import ConcentrationMap

DEFAULT_LAMBDA = 1e-4
DEFAULT_THRESHOLD = 500.0
# Each extra pass re-estimates the background from pixels currently scored
# <= 0, which roughly halves the sample; keep iteration counts small or the
# background degenerates (which raises NumericError by contract).
DEFAULT_ITERATIONS = 2


@dataclass(frozen=True)
class ColumnStats:
    """Per-column background statistics; fallback marks columns that
    reverted to whole-cube statistics for lack of valid pixels."""

    mu: np.ndarray        # (W, B)
    cov: np.ndarray       # (W, B, B), regularized
    target: np.ndarray    # (W, B)
    fallback: np.ndarray  # (W,) bool


def _weighted_stats(data: np.ndarray, w: np.ndarray, lam: float):
    """Column-wise weighted mean and regularized sample covariance.

    Columns with < 2 contributing pixels get NaN stats (caller must replace).
    """
    n = w.sum(axis=0)                                  # (W,)
    denom = np.where(n > 0, n, np.nan)
    mu = np.einsum("hw,hwb->wb", w, data) / denom[:, None]
    centered = (data - mu[None, :, :]) * w[:, :, None]
    ddof = np.where(n > 1, n - 1, np.nan)
    cov = np.einsum("hwb,hwd->wbd", centered, centered) / ddof[:, None, None]
    diag = np.einsum("wbb->wb", cov)
    reg = cov.copy()
    idx = np.arange(cov.shape[1])
    reg[:, idx, idx] = diag * (1.0 + lam)
    return mu, reg, n


def column_stats(cube: HyperCube, s: np.ndarray, lam: float = DEFAULT_LAMBDA,
                 background: np.ndarray | None = None) -> ColumnStats:
    """Estimate per-column background stats over valid (optionally masked) pixels.

    Columns with fewer than bands+1 valid pixels fall back to whole-cube
    statistics; if the whole cube has fewer than 2 usable pixels this is a
    degenerate background and raises.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (cube.bands,):
        raise DataError(f"absorption vector length {s.shape} != {cube.bands} bands")
    if lam < 0:
        raise DataError("regularizer lambda must be >= 0")
    data = cube.data.astype(np.float64)
    valid = cube.valid_mask()
    if background is not None:
        valid = valid & background
    w = valid.astype(np.float64)

    mu, cov, n = _weighted_stats(data, w, lam)
    need_fallback = n < cube.bands + 1
    if need_fallback.any():
        flat = data.reshape(-1, cube.bands)
        wf = w.reshape(-1)
        n_tot = wf.sum()
        if n_tot < 2:
            raise NumericError(
                f"only {int(n_tot)} valid pixels in cube: no global fallback possible")
        mu_g = (wf[:, None] * flat).sum(axis=0) / n_tot
        cf = (flat - mu_g) * wf[:, None]
        cov_g = cf.T @ cf / (n_tot - 1)
        reg_g = cov_g + lam * np.diag(np.diag(cov_g))
        mu[need_fallback] = mu_g
        cov[need_fallback] = reg_g
    target = mu * s[None, :]
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
        raise NumericError("non-finite column statistics")
    return ColumnStats(mu=mu, cov=cov, target=target, fallback=need_fallback)


def matched_filter(cube: HyperCube, stats: ColumnStats) -> ConcentrationMap:
    """Per-pixel enhancement against the supplied column statistics, clamped at 0."""
    if stats.mu.shape != (cube.width, cube.bands):
        raise DataError("column statistics do not match cube geometry")
    alpha = _solve_alpha(cube, stats)
    alpha = np.maximum(alpha, 0.0)
    alpha[cube.nodata_mask] = 0.0
    return ConcentrationMap(alpha=alpha.astype(np.float32))


def _solve_alpha(cube: HyperCube, stats: ColumnStats) -> np.ndarray:
    """Unclamped enhancement map in float64."""
    try:
        y = np.linalg.solve(stats.cov, stats.target[:, :, None])[:, :, 0]  # (W, B)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular background covariance: {exc}") from exc
    denom = np.einsum("wb,wb->w", stats.target, y)
    if not np.all(np.isfinite(y)) or not np.all(denom > 0):
        raise NumericError("matched filter solve produced a non-positive normalizer")
    diff = stats.mu[None, :, :] - cube.data.astype(np.float64)  # (H, W, B)
    num = np.einsum("hwb,wb->hw", diff, y)
    return num / denom[None, :]


def iterate_mf(cube: HyperCube, s: np.ndarray, iterations: int = DEFAULT_ITERATIONS,
               lam: float = DEFAULT_LAMBDA) -> ConcentrationMap:
    """Iterative matched filter; iterations=1 is exactly the plain filter.

    Each subsequent pass re-estimates the background from pixels whose current
    score is <= 0 and re-solves over the full cube.
    """
    if iterations < 1:
        raise DataError("iterations must be >= 1")
    result = matched_filter(cube, column_stats(cube, s, lam))
    for _ in range(iterations - 1):
        background = result.alpha <= 0
        if not (background & cube.valid_mask()).any():
            raise NumericError("all pixels classified as plume: degenerate background")
        result = matched_filter(cube, column_stats(cube, s, lam, background=background))
    return result


def threshold_map(alpha: ConcentrationMap, tau: float) -> np.ndarray:
    """Binary mask of pixels with enhancement >= tau (ppm*m)."""
    return (alpha.alpha >= tau).astype(np.uint8)


@dataclass(frozen=True)
class MorphKernel:
    """3x3 binary structuring element: 'cross3' (middle row+column) or 'ones3'."""

    shape: str
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.uint8)
        if values.shape != (3, 3):
            raise DataError("morphology kernel must be 3x3")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def morph_kernel(name: str) -> MorphKernel:
    if name == "cross3":
        values = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    elif name == "ones3":
        values = np.ones((3, 3), dtype=np.uint8)
    else:
        raise DataError(f"unknown kernel {name!r} (expected cross3 or ones3)")
    return MorphKernel(shape=name, values=values)


def _offset_views(mask: np.ndarray, offsets) -> list[np.ndarray]:
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = mask
    return [padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w] for di, dj in offsets]


def _kernel_offsets(kernel: MorphKernel, mirrored: bool = False):
    sign = -1 if mirrored else 1
    return [(sign * (i - 1), sign * (j - 1))
            for i in range(3) for j in range(3) if kernel.values[i, j]]


def erode(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    """Pixel survives iff every kernel-covered neighbour is 1 (outside = 0)."""
    mask = np.asarray(mask).astype(np.uint8)
    views = _offset_views(mask, _kernel_offsets(kernel))
    out = views[0].copy()
    for v in views[1:]:
        out &= v
    return out


def dilate(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    """Pixel lights up iff any (mirrored-)kernel-covered neighbour is 1."""
    mask = np.asarray(mask).astype(np.uint8)
    views = _offset_views(mask, _kernel_offsets(kernel, mirrored=True))
    out = views[0].copy()
    for v in views[1:]:
        out |= v
    return out


def opening(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    return dilate(erode(mask, kernel), kernel)


def mf_baseline(cube: HyperCube, s: np.ndarray, iterations: int = DEFAULT_ITERATIONS,
                tau: float = DEFAULT_THRESHOLD,
                kernel: MorphKernel | None = None) -> np.ndarray:
    """Full baseline: iterative MF, threshold at tau, morphological opening."""
    if kernel is None:
        kernel = morph_kernel("cross3")
    return opening(threshold_map(iterate_mf(cube, s, iterations), tau), kernel)
