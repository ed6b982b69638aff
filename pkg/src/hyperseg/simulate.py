"""Synthetic methane-event generation.

The injection model is multiplicative Beer-Lambert attenuation: a clean
radiance cube L, a per-pixel column concentration alpha (ppm*m) and a
per-band unit absorption spectrum s (per ppm*m) combine as

    L_sim[p, b] = L[p, b] * exp(-alpha[p] * s[b])

Concentration patches come from a plume library of real-event footprints;
placement composes by per-pixel maximum so overlapping plumes never subtract.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datacube import HyperCube, LabelMask
from .errors import DataError


@dataclass(frozen=True)
class SpectralSignature:
    """Per-wavelength unit absorption of a target gas.

    ``wavelengths`` in nm, strictly increasing; ``absorption`` >= 0 in
    (ppm*m)^-1, same length.
    """

    wavelengths: np.ndarray
    absorption: np.ndarray

    def __post_init__(self) -> None:
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        ab = np.asarray(self.absorption, dtype=np.float64)
        if wl.ndim != 1 or ab.shape != wl.shape:
            raise DataError("signature wavelengths/absorption must be 1-D, same length")
        if wl.size == 0:
            raise DataError("signature is empty")
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise DataError("signature wavelengths must be strictly increasing")
        if not np.all(ab >= 0):
            raise DataError("signature absorption must be non-negative")
        wl.setflags(write=False)
        ab.setflags(write=False)
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "absorption", ab)


def load_signature(path: str | Path) -> SpectralSignature:
    """Read a two-column whitespace-separated text file (nm, absorption); '#' comments."""
    try:
        raw = np.loadtxt(path, comments="#", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read signature file {path}: {exc}") from exc
    if raw.shape[1] != 2:
        raise DataError(f"signature file must have two columns, got {raw.shape[1]}")
    return SpectralSignature(wavelengths=raw[:, 0], absorption=raw[:, 1])


def save_signature(sig: SpectralSignature, path: str | Path) -> None:
    header = "wavelength_nm  absorption_per_ppmm"
    np.savetxt(path, np.column_stack([sig.wavelengths, sig.absorption]),
               header=header, fmt="%.10g")


@dataclass(frozen=True)
class ConcentrationMap:
    """Per-pixel gas column concentration in ppm*m, finite and non-negative."""

    alpha: np.ndarray

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float32)
        if alpha.ndim != 2:
            raise DataError("concentration map must be 2-D")
        if not np.all(np.isfinite(alpha)):
            raise DataError("concentration map contains non-finite values")
        if alpha.size and alpha.min() < 0:
            raise DataError("concentration must be non-negative")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    def positive_pixels(self) -> int:
        return int((self.alpha > 0).sum())


@dataclass(frozen=True)
class PlumeLibrary:
    """Collection of concentration patches harvested from real leak events."""

    plumes: tuple[ConcentrationMap, ...]

    def __post_init__(self) -> None:
        plumes = tuple(self.plumes)
        if not plumes:
            raise DataError("plume library is empty")
        for i, p in enumerate(plumes):
            if p.positive_pixels() < 1:
                raise DataError(f"plume {i} has no positive pixels")
        object.__setattr__(self, "plumes", plumes)

    def sizes(self) -> np.ndarray:
        return np.asarray([p.positive_pixels() for p in self.plumes])

    def size_strata(self) -> list[list[int]]:
        """Quartile strata over positive-pixel counts; empty strata dropped."""
        sizes = self.sizes()
        qs = np.quantile(sizes, [0.25, 0.5, 0.75])
        strata: list[list[int]] = [[], [], [], []]
        for i, n in enumerate(sizes):
            k = int(np.searchsorted(qs, n, side="left"))
            strata[k].append(i)
        return [s for s in strata if s]


def resample_signature(sig: SpectralSignature, band_centers: Sequence[float]) -> np.ndarray:
    """Linear interpolation of the signature at each band center (clamped to edges)."""
    centers = np.asarray(band_centers, dtype=np.float64)
    return np.interp(centers, sig.wavelengths, sig.absorption)


def inject_plume(clean: HyperCube, alpha: ConcentrationMap, s: np.ndarray) -> HyperCube:
    """Apply Beer-Lambert attenuation of ``clean`` by concentration ``alpha``.

    Nodata pixels are left untouched (data and mask). Computation runs in
    float64 and is rounded to the cube's float32 storage.
    """
    if (alpha.height, alpha.width) != (clean.height, clean.width):
        raise DataError(
            f"alpha extent {(alpha.height, alpha.width)} != cube extent "
            f"{(clean.height, clean.width)}"
        )
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (clean.bands,):
        raise DataError(f"absorption vector length {s.shape} != {clean.bands} bands")
    att = np.exp(-alpha.alpha.astype(np.float64)[:, :, None] * s[None, None, :])
    out = (clean.data.astype(np.float64) * att).astype(np.float32)
    out[clean.nodata_mask] = clean.data[clean.nodata_mask]
    return HyperCube(band_centers=clean.band_centers, data=out,
                     nodata_mask=clean.nodata_mask)


def place_plume(scene_alpha: ConcentrationMap, patch: ConcentrationMap,
                origin: tuple[int, int], scale: float = 1.0) -> ConcentrationMap:
    """Composite a patch into the scene at ``origin`` by per-pixel maximum."""
    if scale < 0:
        raise DataError("plume scale must be >= 0")
    r0, c0 = origin
    r1, c1 = r0 + patch.height, c0 + patch.width
    if r0 < 0 or c0 < 0 or r1 > scene_alpha.height or c1 > scene_alpha.width:
        raise DataError(
            f"patch {patch.height}x{patch.width} at {origin} exceeds scene "
            f"{scene_alpha.height}x{scene_alpha.width}"
        )
    out = scene_alpha.alpha.copy()
    out[r0:r1, c0:c1] = np.maximum(out[r0:r1, c0:c1], scale * patch.alpha)
    return ConcentrationMap(alpha=out)


def build_synthetic_dataset(
    clean_tiles: Sequence[HyperCube],
    library: PlumeLibrary,
    sig: SpectralSignature,
    seed: int,
    event_fraction: float = 0.5,
    scale: float = 1.0,
) -> list[tuple[HyperCube, LabelMask, ConcentrationMap]]:
    """Inject plumes into a fraction of the tiles; the rest stay event free.

    Exactly round(event_fraction * N) tiles receive one plume each. Plumes are
    sampled uniformly across size strata (quartiles of positive-pixel count)
    and placed uniformly at random where the patch fits. Deterministic under
    ``seed``: every tile draws from its own generator keyed by (seed, index),
    so results do not depend on evaluation order.
    """
    if not clean_tiles:
        raise DataError("no clean tiles supplied")
    if not 0.0 <= event_fraction <= 1.0:
        raise DataError("event_fraction must lie in [0, 1]")
    n = len(clean_tiles)
    n_events = round(event_fraction * n)
    root = np.random.default_rng([int(seed), 0xD5])
    event_idx = set(root.choice(n, size=n_events, replace=False).tolist()) if n_events else set()
    strata = library.size_strata()

    out: list[tuple[HyperCube, LabelMask, ConcentrationMap]] = []
    for i, tile in enumerate(clean_tiles):
        alpha = ConcentrationMap(alpha=np.zeros((tile.height, tile.width), dtype=np.float32))
        if i in event_idx:
            rng = np.random.default_rng([int(seed), 1, i])
            fitting = [
                st for st in (
                    [p for p in stratum
                     if library.plumes[p].height <= tile.height
                     and library.plumes[p].width <= tile.width]
                    for stratum in strata
                ) if st
            ]
            if not fitting:
                raise DataError(f"no library plume fits tile {i} "
                                f"({tile.height}x{tile.width})")
            stratum = fitting[rng.integers(len(fitting))]
            patch = library.plumes[stratum[rng.integers(len(stratum))]]
            r0 = int(rng.integers(tile.height - patch.height + 1))
            c0 = int(rng.integers(tile.width - patch.width + 1))
            alpha = place_plume(alpha, patch, (r0, c0), scale=scale)
            cube = inject_plume(tile, alpha, resample_signature(sig, tile.band_centers))
        else:
            cube = tile
        label = LabelMask(values=(alpha.alpha > 0).astype(np.uint8)[:, :, None],
                          multi_hot=False)
        out.append((cube, label, alpha))
    return out
