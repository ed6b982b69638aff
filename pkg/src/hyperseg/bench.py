"""Granule-scale timing harness.

Protocol: a full granule (default 1280x1242) is tiled into non-overlapping
128x128 tiles with padding (100 tiles at the default shape). Per repetition,
the IO phase (loading the cube from disk and cutting tiles) is timed
separately from compute (the per-tile pipeline) and from any cross-tile
post phase (stitching). The first repetition is a warm-up and is discarded;
the report carries the median plus min/median/max dispersion over the
remaining repetitions. compute_seconds is, by construction, the sum of the
individual per-tile times of the median repetition.
"""

from __future__ import annotations

import json
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datacube import HyperCube, TileGrid, extract_tiles, load_cube, save_cube, stitch, tile_grid
from .errors import DataError
from .matchedfilter import MorphKernel, mf_baseline
from .nn import tensor as T
from .nn.model import HyperspectralViT
from .nn.tensor import Tensor, no_grad

DEFAULT_GRANULE = (1280, 1242)
BENCH_TILE = 128


@dataclass
class BenchReport:
    pipeline: str
    granule_shape: tuple[int, int]
    tiles: int
    io_seconds: float
    compute_seconds: float
    post_seconds: float
    seconds_per_tile: float
    params_millions: float | None
    repetitions: int
    threads: int
    dispersion: tuple[float, float, float]  # min / median / max of compute

    @property
    def total_seconds(self) -> float:
        return self.io_seconds + self.compute_seconds + self.post_seconds

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "granule_shape": list(self.granule_shape),
            "tiles": self.tiles,
            "io_seconds": self.io_seconds,
            "compute_seconds": self.compute_seconds,
            "post_seconds": self.post_seconds,
            "seconds_per_tile": self.seconds_per_tile,
            "params_millions": self.params_millions,
            "repetitions": self.repetitions,
            "threads": self.threads,
            "dispersion": list(self.dispersion),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def param_count(model) -> int:
    """Exact trainable-parameter tally."""
    return model.param_count()


def time_pipeline(pipeline: Callable[[HyperCube], object], workload: HyperCube | str | Path,
                  reps: int = 3, tile_size: int = BENCH_TILE, name: str = "pipeline",
                  params: int | None = None, threads: int = 1,
                  post: Callable[[list, TileGrid], object] | None = None) -> BenchReport:
    """Time one detection pipeline over a tiled granule workload.

    ``pipeline`` consumes one tile cube; ``post`` (optional) consumes all
    per-tile results plus the grid. ``reps`` timed repetitions follow one
    discarded warm-up pass. A pipeline failure aborts with the tile index.
    """
    if reps < 1:
        raise DataError("reps must be >= 1")
    tmp = None
    if isinstance(workload, HyperCube):
        tmp = tempfile.TemporaryDirectory(prefix="hyperseg-bench-")
        path = Path(tmp.name) / "granule"
        save_cube(workload, path)
    else:
        path = Path(workload)

    try:
        io_times: list[float] = []
        compute_times: list[float] = []
        post_times: list[float] = []
        per_tile_counts = None
        for rep in range(reps + 1):
            t0 = time.perf_counter()
            cube = load_cube(path)
            grid = tile_grid(cube.height, cube.width, tile_size, 0, pad=True)
            tiles = extract_tiles(cube, grid, pad_value=0.0)
            io_elapsed = time.perf_counter() - t0

            per_tile = []
            results = []
            for i, tile in enumerate(tiles):
                t1 = time.perf_counter()
                try:
                    results.append(pipeline(tile))
                except Exception as exc:
                    raise DataError(f"pipeline {name!r} failed on tile {i}: {exc}") from exc
                per_tile.append(time.perf_counter() - t1)

            post_elapsed = 0.0
            if post is not None:
                t2 = time.perf_counter()
                post(results, grid)
                post_elapsed = time.perf_counter() - t2

            if rep == 0:
                per_tile_counts = len(tiles)
                continue  # warm-up excluded
            io_times.append(io_elapsed)
            compute_times.append(sum(per_tile))
            post_times.append(post_elapsed)

        compute_sorted = sorted(compute_times)
        median_compute = float(np.median(compute_times))
        return BenchReport(
            pipeline=name,
            granule_shape=(cube.height, cube.width),
            tiles=per_tile_counts,
            io_seconds=float(np.median(io_times)),
            compute_seconds=median_compute,
            post_seconds=float(np.median(post_times)),
            seconds_per_tile=median_compute / per_tile_counts,
            params_millions=None if params is None else params / 1e6,
            repetitions=reps,
            threads=threads,
            dispersion=(compute_sorted[0], median_compute, compute_sorted[-1]),
        )
    finally:
        if tmp is not None:
            tmp.cleanup()


def daily_projection(report: BenchReport, granules_per_day: int) -> float:
    """Hours per day to process the given granule rate at this report's speed."""
    if granules_per_day < 0:
        raise DataError("granules_per_day must be >= 0")
    return granules_per_day * (report.io_seconds + report.compute_seconds) / 3600.0


def mf_pipeline(s: np.ndarray, iterations: int, tau: float,
                kernel: MorphKernel) -> Callable[[HyperCube], np.ndarray]:
    """Per-tile baseline: iterative matched filter + threshold + opening."""
    def run(tile: HyperCube) -> np.ndarray:
        return mf_baseline(tile, s, iterations=iterations, tau=tau, kernel=kernel)
    return run


def model_pipeline(model: HyperspectralViT) -> Callable[[HyperCube], np.ndarray]:
    """Per-tile forward pass producing full-resolution logits."""
    model.eval()

    def run(tile: HyperCube) -> np.ndarray:
        x = np.ascontiguousarray(tile.data.transpose(2, 0, 1))[None]
        with no_grad():
            return model.full_logits(Tensor(x)).data[0]
    return run


def model_post(results: list, grid: TileGrid) -> np.ndarray:
    """Cross-tile phase for the model pipeline: stitch logits, then sigmoid."""
    return T._sigmoid_np(stitch(results, grid).astype(np.float32))


def format_table(reports: Sequence[BenchReport]) -> str:
    headers = ["pipeline", "params (M)", "io (s)", "compute (s)", "post (s)",
               "s/tile", "total (s)"]
    rows = []
    for r in reports:
        rows.append([
            r.pipeline,
            "N/A" if r.params_millions is None else f"{r.params_millions:.3f}",
            f"{r.io_seconds:.3f}", f"{r.compute_seconds:.3f}", f"{r.post_seconds:.3f}",
            f"{r.seconds_per_tile:.4f}", f"{r.total_seconds:.3f}",
        ])
    widths = [max(len(h), *(len(row[j]) for row in rows)) for j, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)
