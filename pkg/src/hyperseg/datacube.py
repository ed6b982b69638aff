"""Hyperspectral datacube container, portable on-disk format, tiling and labels.

A cube is stored in memory as a float32 ``(height, width, bands)`` array with
an ascending band-center axis in nanometers and a boolean per-pixel nodata
mask. On disk a cube is a pair of files: ``<name>.hdr.json`` (UTF-8 JSON
header) and ``<name>.dat`` (raw little-endian payload, band-sequential:
band-major, then row-major). Label masks and 2-D score maps reuse the same
scheme with ``u8`` and ``f32le`` payloads respectively.

Cubes and tile grids are immutable after construction and safe to share
across worker threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

DEFAULT_NODATA = -9999.0

_HEADER_SUFFIX = ".hdr.json"
_PAYLOAD_SUFFIX = ".dat"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HyperCube:
    """An (height, width, bands) radiance cube with a spectral axis.

    ``band_centers`` must be strictly increasing and match the spectral
    dimension of ``data``. ``nodata_mask`` flags invalid pixels (True =
    nodata); data must be finite wherever the mask is False.
    """

    band_centers: np.ndarray
    data: np.ndarray
    nodata_mask: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DataError(f"cube data must be 3-D (H, W, B), got shape {data.shape}")
        centers = np.asarray(self.band_centers, dtype=np.float64)
        if centers.ndim != 1 or centers.shape[0] != data.shape[2]:
            raise DataError(
                f"band_centers length {centers.shape} does not match {data.shape[2]} bands"
            )
        if data.shape[0] < 1 or data.shape[1] < 1 or data.shape[2] < 1:
            raise DataError("cube dimensions must all be >= 1")
        if centers.shape[0] > 1 and not np.all(np.diff(centers) > 0):
            raise DataError("band_centers must be strictly increasing")
        mask = np.asarray(self.nodata_mask, dtype=bool)
        if mask.shape != data.shape[:2]:
            raise DataError(
                f"nodata_mask shape {mask.shape} does not match spatial extent {data.shape[:2]}"
            )
        if not np.all(np.isfinite(data[~mask])):
            raise DataError("cube data contains non-finite values at valid pixels")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "band_centers", _freeze(centers))
        object.__setattr__(self, "nodata_mask", _freeze(mask))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def valid_mask(self) -> np.ndarray:
        return ~self.nodata_mask


def cube_from_array(data: np.ndarray, band_centers: Sequence[float] | None = None,
                    nodata_mask: np.ndarray | None = None) -> HyperCube:
    """Convenience constructor: default axis 0..B-1 nm-like, all pixels valid."""
    data = np.asarray(data, dtype=np.float32)
    if band_centers is None:
        band_centers = np.arange(data.shape[2], dtype=np.float64)
    if nodata_mask is None:
        nodata_mask = np.zeros(data.shape[:2], dtype=bool)
    return HyperCube(band_centers=np.asarray(band_centers), data=data, nodata_mask=nodata_mask)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel {0,1} labels, one channel per class.

    ``values`` has shape (height, width, classes). For the binary plume task
    ``multi_hot`` is False and classes == 1; the mineral task uses multi-hot
    labels where several classes may be active in one pixel.
    """

    values: np.ndarray
    multi_hot: bool = False

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise DataError(f"label values must be (H, W, C), got shape {values.shape}")
        if values.shape[2] < 1:
            raise DataError("label mask needs at least one class")
        if not self.multi_hot and values.shape[2] != 1:
            raise DataError("single-hot label mask must have exactly one class channel")
        values = values.astype(np.uint8)
        if not np.all((values == 0) | (values == 1)):
            raise DataError("label values must be 0 or 1")
        object.__setattr__(self, "values", _freeze(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class TileGrid:
    """Regular tiling of a (rows, cols) extent with a fixed tile size/overlap.

    ``row_origins``/``col_origins`` are the per-axis top-left offsets; the
    full origin list is their row-major product. ``padded_extent`` >= extent
    when padding was requested and the stride did not land on the edge.
    """

    tile_size: int
    overlap: int
    extent: tuple[int, int]
    padded_extent: tuple[int, int]
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    @property
    def num_tiles(self) -> int:
        return len(self.row_origins) * len(self.col_origins)


def _axis_origins(extent: int, tile_size: int, stride: int, pad: bool) -> tuple[list[int], int]:
    if pad:
        origins = list(range(0, max(extent - tile_size, 0) + 1, stride))
        if not origins:
            origins = [0]
        if origins[-1] + tile_size < extent:
            origins.append(origins[-1] + stride)
        return origins, max(origins[-1] + tile_size, extent)
    if tile_size > extent:
        raise DataError(f"tile_size {tile_size} exceeds extent {extent} and pad is off")
    origins = list(range(0, extent - tile_size + 1, stride))
    if origins[-1] + tile_size < extent:
        origins.append(extent - tile_size)  # clamped final tile, ends exactly at the edge
    return origins, extent


def tile_grid(height: int, width: int, tile_size: int, overlap: int, pad: bool) -> TileGrid:
    """Build the tile grid covering (height, width).

    Origins advance at stride ``tile_size - overlap``. With ``pad=True`` one
    extra origin per axis is appended when needed so the last tile reaches or
    passes the edge, growing ``padded_extent``; with ``pad=False`` the final
    origin is clamped to end exactly at the edge.
    """
    if tile_size < 1:
        raise DataError("tile_size must be >= 1")
    if not 0 <= overlap < tile_size:
        raise DataError(f"overlap must satisfy 0 <= overlap < tile_size, got {overlap}")
    stride = tile_size - overlap
    rows, padded_rows = _axis_origins(height, tile_size, stride, pad)
    cols, padded_cols = _axis_origins(width, tile_size, stride, pad)
    return TileGrid(
        tile_size=tile_size,
        overlap=overlap,
        extent=(height, width),
        padded_extent=(padded_rows, padded_cols),
        row_origins=tuple(rows),
        col_origins=tuple(cols),
    )


def extract_tiles(cube: HyperCube, grid: TileGrid, pad_value: float = 0.0) -> list[HyperCube]:
    """Cut the cube into grid tiles; padded area gets pad_value and nodata=True."""
    if grid.extent != (cube.height, cube.width):
        raise DataError(
            f"grid extent {grid.extent} does not match cube extent {(cube.height, cube.width)}"
        )
    t = grid.tile_size
    tiles = []
    for r0, c0 in grid.origins:
        r1, c1 = min(r0 + t, cube.height), min(c0 + t, cube.width)
        data = np.full((t, t, cube.bands), pad_value, dtype=np.float32)
        mask = np.ones((t, t), dtype=bool)
        data[: r1 - r0, : c1 - c0] = cube.data[r0:r1, c0:c1]
        mask[: r1 - r0, : c1 - c0] = cube.nodata_mask[r0:r1, c0:c1]
        tiles.append(HyperCube(band_centers=cube.band_centers, data=data, nodata_mask=mask))
    return tiles


def stitch(predictions: Sequence[np.ndarray], grid: TileGrid) -> np.ndarray:
    """Reassemble per-tile score maps into a full-extent map.

    Overlapping pixels are resolved by the arithmetic mean of all contributing
    tiles; area beyond the original extent (padding) is cropped. Tiles may be
    (T, T) or (C, T, T); the output matches, cropped to ``grid.extent``.
    """
    if len(predictions) != grid.num_tiles:
        raise DataError(f"expected {grid.num_tiles} predictions, got {len(predictions)}")
    t = grid.tile_size
    pr, pc = grid.padded_extent
    first = np.asarray(predictions[0])
    lead = first.shape[:-2]
    acc = np.zeros(lead + (pr, pc), dtype=np.float64)
    cnt = np.zeros((pr, pc), dtype=np.float64)
    for tile, (r0, c0) in zip(predictions, grid.origins):
        tile = np.asarray(tile)
        if tile.shape != lead + (t, t):
            raise DataError(f"tile shape {tile.shape} does not match {lead + (t, t)}")
        acc[..., r0 : r0 + t, c0 : c0 + t] += tile
        cnt[r0 : r0 + t, c0 : c0 + t] += 1.0
    out = acc / cnt
    h, w = grid.extent
    return out[..., :h, :w].astype(first.dtype, copy=False)


@dataclass(frozen=True)
class ComponentMap:
    """Assignment of spectral-library components to aggregated mineral classes.

    ``assignments`` maps component id -> class name (or None for unassigned).
    Each component belongs to at most one class by construction.
    """

    assignments: Mapping[str, str | None]

    @property
    def component_ids(self) -> list[str]:
        return list(self.assignments.keys())

    def classes(self) -> set[str]:
        return {c for c in self.assignments.values() if c is not None}

    def components_of(self, class_name: str) -> list[str]:
        if class_name not in self.classes():
            raise DataError(f"class {class_name!r} not present in component map")
        return [cid for cid, cls in self.assignments.items() if cls == class_name]


def load_component_map(path: str | Path) -> ComponentMap:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise DataError("component map must be a JSON object {component_id: class_name}")
    return ComponentMap(assignments={str(k): v for k, v in raw.items()})


def aggregate_minerals(component_masks: np.ndarray | Sequence[np.ndarray],
                       component_ids: Sequence[str],
                       cmap: ComponentMap,
                       class_name: str) -> np.ndarray:
    """Union (per-pixel OR) of all component masks assigned to ``class_name``."""
    masks = np.asarray(component_masks)
    if masks.ndim != 3:
        raise DataError("component_masks must be a (N, H, W) stack")
    if masks.shape[0] != len(component_ids):
        raise DataError("one component id required per mask")
    wanted = set(cmap.components_of(class_name))
    out = np.zeros(masks.shape[1:], dtype=np.uint8)
    for cid, m in zip(component_ids, masks):
        if cid in wanted:
            out |= m.astype(np.uint8)
    return out


def filter_tiles_by_valid_fraction(tiles: Sequence[HyperCube],
                                   min_valid_fraction: float = 0.0) -> list[int]:
    """Indices of tiles whose valid-pixel fraction is >= the threshold.

    Training-set builders use this to drop tiles dominated by nodata borders.
    """
    keep = []
    for i, tile in enumerate(tiles):
        frac = 1.0 - tile.nodata_mask.mean()
        if frac >= min_valid_fraction:
            keep.append(i)
    return keep


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    if name.endswith(_HEADER_SUFFIX):
        base = p.with_name(name[: -len(_HEADER_SUFFIX)])
    elif name.endswith(_PAYLOAD_SUFFIX):
        base = p.with_name(name[: -len(_PAYLOAD_SUFFIX)])
    else:
        base = p
    return (base.with_name(base.name + _HEADER_SUFFIX),
            base.with_name(base.name + _PAYLOAD_SUFFIX))


def _write_pair(path: str | Path, header: dict, payload: np.ndarray) -> None:
    hdr_path, dat_path = _paths(path)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    with open(hdr_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1)
        fh.write("\n")
    with open(dat_path, "wb") as fh:
        fh.write(payload.tobytes())


def _read_pair(path: str | Path) -> tuple[dict, bytes]:
    hdr_path, dat_path = _paths(path)
    if not hdr_path.exists():
        raise DataError(f"missing header file {hdr_path}")
    if not dat_path.exists():
        raise DataError(f"missing payload file {dat_path}")
    with open(hdr_path, encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed header {hdr_path}: {exc}") from exc
    return header, dat_path.read_bytes()


def save_cube(cube: HyperCube, path: str | Path,
              nodata_value: float = DEFAULT_NODATA) -> None:
    """Write header + band-sequential f32le payload; nodata pixels carry the sentinel."""
    header = {
        "height": cube.height,
        "width": cube.width,
        "bands": cube.bands,
        "band_centers": [float(c) for c in cube.band_centers],
        "dtype": "f32le",
        "layout": "band-sequential",
        "nodata_value": nodata_value,
    }
    data = cube.data.copy()
    data[cube.nodata_mask] = nodata_value
    _write_pair(path, header, np.transpose(data, (2, 0, 1)).astype("<f4"))


def load_cube(path: str | Path) -> HyperCube:
    """Read a cube pair written by :func:`save_cube`."""
    header, raw = _read_pair(path)
    try:
        h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
        centers = np.asarray(header["band_centers"], dtype=np.float64)
        dtype = header["dtype"]
        nodata_value = float(header.get("nodata_value", DEFAULT_NODATA))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"incomplete cube header: {exc}") from exc
    if dtype != "f32le":
        raise DataError(f"unsupported cube dtype {dtype!r}")
    if header.get("layout", "band-sequential") != "band-sequential":
        raise DataError(f"unsupported layout {header.get('layout')!r}")
    if centers.shape[0] != b:
        raise DataError(f"header declares {b} bands but {centers.shape[0]} band centers")
    expected = h * w * b * 4
    if len(raw) != expected:
        raise DataError(f"payload is {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").reshape(b, h, w).transpose(1, 2, 0)
    mask = np.all(data == nodata_value, axis=2)
    return HyperCube(band_centers=centers, data=data, nodata_mask=mask)


def select_bands(cube: HyperCube, ranges: Sequence[tuple[float, float]]) -> HyperCube:
    """Keep exactly the bands whose centers fall inside any [low, high] range."""
    if not ranges:
        raise DataError("at least one wavelength range required")
    lows = [r[0] for r in ranges]
    for (lo, hi) in ranges:
        if hi < lo:
            raise DataError(f"range ({lo}, {hi}) is descending")
    if sorted(lows) != list(lows):
        raise DataError("ranges must be ascending")
    for (_, hi_a), (lo_b, _) in zip(ranges[:-1], ranges[1:]):
        if lo_b <= hi_a:
            raise DataError("ranges must not overlap")
    sel = np.zeros(cube.bands, dtype=bool)
    for lo, hi in ranges:
        sel |= (cube.band_centers >= lo) & (cube.band_centers <= hi)
    if not sel.any():
        raise DataError("no band center falls inside the requested ranges")
    return HyperCube(
        band_centers=cube.band_centers[sel],
        data=cube.data[:, :, sel],
        nodata_mask=cube.nodata_mask,
    )


def save_mask(mask: LabelMask, path: str | Path) -> None:
    """Write a label mask with a u8 band-sequential payload."""
    header = {
        "height": mask.height,
        "width": mask.width,
        "bands": mask.classes,
        "band_centers": list(range(mask.classes)),
        "dtype": "u8",
        "layout": "band-sequential",
        "nodata_value": 255,
        "multi_hot": mask.multi_hot,
    }
    _write_pair(path, header, np.transpose(mask.values, (2, 0, 1)).astype(np.uint8))


def load_mask(path: str | Path) -> LabelMask:
    header, raw = _read_pair(path)
    try:
        h, w, c = int(header["height"]), int(header["width"]), int(header["bands"])
        dtype = header["dtype"]
        multi_hot = bool(header.get("multi_hot", c > 1))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"incomplete mask header: {exc}") from exc
    if dtype != "u8":
        raise DataError(f"unsupported mask dtype {dtype!r}")
    expected = h * w * c
    if len(raw) != expected:
        raise DataError(f"payload is {len(raw)} bytes, header implies {expected}")
    values = np.frombuffer(raw, dtype=np.uint8).reshape(c, h, w).transpose(1, 2, 0)
    return LabelMask(values=values, multi_hot=multi_hot)


def save_map(values: np.ndarray, path: str | Path) -> None:
    """Write a single-channel float map (e.g. concentration or scores)."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DataError("map must be 2-D")
    header = {
        "height": values.shape[0],
        "width": values.shape[1],
        "bands": 1,
        "band_centers": [0],
        "dtype": "f32le",
        "layout": "band-sequential",
        "nodata_value": DEFAULT_NODATA,
    }
    _write_pair(path, header, values.astype("<f4"))


def load_map(path: str | Path) -> np.ndarray:
    header, raw = _read_pair(path)
    h, w = int(header["height"]), int(header["width"])
    if header.get("dtype") != "f32le" or int(header.get("bands", 1)) != 1:
        raise DataError("not a single-channel f32 map")
    expected = h * w * 4
    if len(raw) != expected:
        raise DataError(f"payload is {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
