"""Desk-scale synthetic scenes for experiments and acceptance checks.

Clean tiles are a smooth background spectrum modulated by a low-frequency
albedo field and per-pixel noise, plus rectangular "confounder" patches:
surface materials whose absorption partially overlaps the gas signature in
the upper bands but diverges in a band the gas barely touches. A matched
filter keyed to the gas signature responds to these patches; a model that
sees all bands can tell them apart.
"""

from __future__ import annotations

import numpy as np

from .datacube import HyperCube, LabelMask
from .simulate import (ConcentrationMap, PlumeLibrary, SpectralSignature,
                       build_synthetic_dataset)

TOY_BANDS = 8
TOY_BAND_CENTERS = np.linspace(2100.0, 2450.0, TOY_BANDS)

# unit absorption per ppm*m; peak 1e-5 keeps alpha*s <= 0.03 for toy plumes
_GAS_PROFILE = np.array([0.0, 0.0, 0.05, 0.10, 0.40, 0.85, 1.00, 0.60]) * 1e-5
# confounder absorption: strong response where the gas is quiet (band 2)
_CONF_PROFILE = np.array([0.0, 0.0, 0.80, 0.10, 0.50, 0.90, 0.70, 0.0]) * 1e-5


def toy_signature(dense: bool = True) -> SpectralSignature:
    """Gas absorption template; dense version is a smooth 1 nm-grid curve."""
    if not dense:
        return SpectralSignature(wavelengths=TOY_BAND_CENTERS, absorption=_GAS_PROFILE)
    grid = np.arange(2050.0, 2501.0, 1.0)
    absorption = np.interp(grid, TOY_BAND_CENTERS, _GAS_PROFILE)
    return SpectralSignature(wavelengths=grid, absorption=absorption)


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 8,
                  lo: float = 0.85, hi: float = 1.15) -> np.ndarray:
    """Low-frequency multiplicative gain field via bilinear upsampling."""
    coarse = rng.uniform(lo, hi, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    ty = (ys - y0)[:, None]
    tx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (c00 * (1 - ty) * (1 - tx) + c01 * (1 - ty) * tx
            + c10 * ty * (1 - tx) + c11 * ty * tx)


def make_clean_tile(seed: int, index: int, height: int = 64, width: int = 64,
                    noise: float = 0.005, confounders: bool = True) -> HyperCube:
    rng = np.random.default_rng([int(seed), 2, int(index)])
    base = 1.8 + 0.6 * np.sin(np.linspace(0.3, 2.4, TOY_BANDS))
    albedo = _smooth_field(rng, height, width)
    data = base[None, None, :] * albedo[:, :, None]
    data = data * (1.0 + noise * rng.standard_normal(data.shape))
    if confounders:
        for _ in range(int(rng.integers(3, 7))):
            ph = int(rng.integers(3, 10))
            pw = int(rng.integers(3, 10))
            r0 = int(rng.integers(0, height - ph + 1))
            c0 = int(rng.integers(0, width - pw + 1))
            strength = float(rng.uniform(800.0, 3500.0))
            data[r0:r0 + ph, c0:c0 + pw, :] *= np.exp(-strength * _CONF_PROFILE)[None, None, :]
    return HyperCube(band_centers=TOY_BAND_CENTERS, data=data.astype(np.float32),
                     nodata_mask=np.zeros((height, width), dtype=bool))


def make_plume_library(seed: int, n_plumes: int = 24,
                       floor: float = 800.0) -> PlumeLibrary:
    """Gaussian-blob concentration patches spanning a range of footprints.

    Concentrations below ``floor`` are cut so every labeled pixel carries a
    spectral dip comfortably above the scene noise.
    """
    rng = np.random.default_rng([int(seed), 3])
    sigmas = [2.0, 3.0, 4.5, 6.5]
    plumes = []
    for i in range(n_plumes):
        sigma = sigmas[i % len(sigmas)]
        peak = float(rng.uniform(3000.0, 8000.0))
        half = int(np.ceil(3 * sigma))
        ys, xs = np.mgrid[-half : half + 1, -half : half + 1]
        blob = peak * np.exp(-(ys ** 2 + xs ** 2) / (2 * sigma ** 2))
        blob[blob < floor] = 0.0
        plumes.append(ConcentrationMap(alpha=blob.astype(np.float32)))
    return PlumeLibrary(plumes=tuple(plumes))


def make_toy_split(n_tiles: int, seed: int, height: int = 64, width: int = 64,
                   event_fraction: float = 0.5,
                   confounders: bool = True) -> list[tuple[HyperCube, LabelMask, ConcentrationMap]]:
    clean = [make_clean_tile(seed, i, height, width, confounders=confounders)
             for i in range(n_tiles)]
    library = make_plume_library(seed)
    return build_synthetic_dataset(clean, library, toy_signature(), seed=seed,
                                   event_fraction=event_fraction)


def toy_absorption_vector() -> np.ndarray:
    """Gas absorption resampled on the toy band axis."""
    return _GAS_PROFILE.copy()


def make_granule(height: int = 1280, width: int = 1242, bands: int = 86,
                 seed: int = 0) -> HyperCube:
    """Synthetic full-granule workload for the timing harness."""
    rng = np.random.default_rng([int(seed), 4])
    centers = np.linspace(1600.0, 2450.0, bands)
    base = 1.5 + 0.8 * np.abs(np.sin(np.linspace(0.0, 3.0, bands)))
    albedo = _smooth_field(rng, height, width, cells=16)
    noise = 1.0 + 0.01 * rng.standard_normal((height, width, bands)).astype(np.float32)
    data = (base[None, None, :] * albedo[:, :, None]).astype(np.float32) * noise
    return HyperCube(band_centers=centers, data=data,
                     nodata_mask=np.zeros((height, width), dtype=bool))


def granule_absorption_vector(bands: int = 86) -> np.ndarray:
    """Smooth absorption template on the synthetic granule's band axis."""
    x = np.linspace(0.0, 1.0, bands)
    profile = np.exp(-0.5 * ((x - 0.75) / 0.12) ** 2) + 0.4 * np.exp(
        -0.5 * ((x - 0.45) / 0.08) ** 2)
    return (1e-5 * profile / profile.max())
