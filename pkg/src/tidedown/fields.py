"""Gridded tidal-current fields: types, coordinates, masking, infill, normalization, I/O.

A field is a [T, 3, H, W] float32 array (channels: U velocity, V velocity,
water level) plus a boolean sea mask [H, W] (True = sea) and geographic
extent metadata. Coordinates follow the cell-center convention: along an
axis with N cells, cell i has center 2*(i + 0.5)/N - 1, so every center
lies strictly inside [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import struct

import numpy as np
from scipy import ndimage

CHANNELS = ("u", "v", "level")
N_CHANNELS = 3

TCDS_MAGIC = b"TCDS"
TCDS_VERSION = 1


@dataclass(frozen=True)
class TidalField:
    """A timestamped 3-channel grid with land mask and geographic extent."""

    data: np.ndarray            # [T, 3, H, W] float32
    mask: np.ndarray            # [H, W] bool, True = sea
    extent: tuple               # (lat_min, lat_max, lon_min, lon_max) degrees
    meters_per_cell: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=bool)
        if data.ndim != 4 or data.shape[1] != N_CHANNELS:
            raise ValueError(f"data must be [T, 3, H, W], got {data.shape}")
        t, _, h, w = data.shape
        if t < 1 or h < 2 or w < 2:
            raise ValueError(f"need T >= 1 and H, W >= 2, got T={t}, H={h}, W={w}")
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} does not match grid {(h, w)}")
        if not mask.any():
            raise ValueError("no valid cells")
        lat_min, lat_max, lon_min, lon_max = self.extent
        if not (lat_min < lat_max and lon_min < lon_max):
            raise ValueError(f"degenerate extent {self.extent}")
        if not self.meters_per_cell > 0:
            raise ValueError("meters_per_cell must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        object.__setattr__(self, "meters_per_cell", float(self.meters_per_cell))

    @property
    def timesteps(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def with_data(self, data: np.ndarray) -> "TidalField":
        return replace(self, data=np.asarray(data, dtype=np.float32))

    def slice_time(self, start: int, stop: int) -> "TidalField":
        if not 0 <= start < stop <= self.timesteps:
            raise ValueError(f"bad time slice [{start}, {stop}) for T={self.timesteps}")
        return replace(self, data=self.data[start:stop].copy())


def axis_centers(n: int) -> np.ndarray:
    """Cell-center coordinates of an axis with n cells, in [-1, 1]."""
    if n < 1:
        raise ValueError("axis length must be >= 1")
    return (2.0 * (np.arange(n) + 0.5) / n) - 1.0


def cell_center_coords(height: int, width: int) -> np.ndarray:
    """All H*W cell-center (y, x) pairs in row-major order, shape [H*W, 2]."""
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be >= 1")
    ys = axis_centers(height)
    xs = axis_centers(width)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def _nearest_sea_indices(mask: np.ndarray) -> np.ndarray:
    """Flat index of the nearest sea cell for every cell of the grid.

    Distance is Euclidean on cell indices. Ties resolve to the sea cell with
    the smaller row index, then the smaller column index, so the result is
    identical on every platform. Sea cells map to themselves.
    """
    h, w = mask.shape
    if not mask.any():
        raise ValueError("no valid cells")
    out = np.arange(h * w, dtype=np.int64).reshape(h, w)
    land = ~mask
    if not land.any():
        return out.ravel()

    # Exact squared distances are integers, so the EDT only needs to supply
    # the distance; the winning cell is re-derived with the tie-break rule.
    dist = ndimage.distance_transform_edt(land)
    d2 = np.rint(dist[land] ** 2).astype(np.int64)
    rows, cols = np.nonzero(land)

    for d2_val in np.unique(d2):
        sel = d2_val == d2
        r = rows[sel]
        c = cols[sel]
        assigned = np.zeros(r.shape[0], dtype=bool)
        for dr, dc in _offsets_at_squared_distance(int(d2_val)):
            rr = r + dr
            cc = c + dc
            ok = (~assigned) & (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            if not ok.any():
                continue
            ok[ok] = mask[rr[ok], cc[ok]]
            out[r[ok], c[ok]] = rr[ok] * w + cc[ok]
            assigned |= ok
        if not assigned.all():
            raise AssertionError("distance transform inconsistent with mask")
    return out.ravel()


def _offsets_at_squared_distance(d2: int):
    """Integer offsets (dr, dc) with dr^2 + dc^2 == d2, ascending (dr, dc)."""
    offsets = []
    r_max = int(np.sqrt(d2)) + 1
    for dr in range(-r_max, r_max + 1):
        rem = d2 - dr * dr
        if rem < 0:
            continue
        dc = int(np.sqrt(rem))
        for cand in (dc - 1, dc, dc + 1):
            if cand >= 0 and cand * cand == rem:
                if cand == 0:
                    offsets.append((dr, 0))
                else:
                    offsets.append((dr, -cand))
                    offsets.append((dr, cand))
                break
    offsets.sort()
    return offsets


def infill_nearest(field: TidalField) -> TidalField:
    """Replace every land value with the value of the Euclidean-nearest sea cell.

    Sea cells and the mask are untouched; the operation is idempotent.
    """
    idx = _nearest_sea_indices(field.mask)
    t, c, h, w = field.data.shape
    flat = field.data.reshape(t, c, h * w)
    return field.with_data(flat[:, :, idx].reshape(t, c, h, w))


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std, computed over sea cells of a training split."""

    mean: np.ndarray  # [3]
    std: np.ndarray   # [3]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float32).reshape(N_CHANNELS)
        std = np.asarray(self.std, dtype=np.float32).reshape(N_CHANNELS)
        if not (std > 0).all():
            raise ValueError("std components must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def compute_stats(field: TidalField, floor: float = 1e-6) -> NormStats:
    """Sea-cell-only per-channel statistics; land infill artifacts are excluded."""
    sea = field.data[:, :, field.mask]        # [T, 3, n_sea]
    mean = sea.mean(axis=(0, 2))
    std = sea.std(axis=(0, 2))
    return NormStats(mean, np.maximum(std, floor))


def normalize(field: TidalField, stats: NormStats) -> TidalField:
    scaled = (field.data - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return field.with_data(scaled)


def denormalize(field: TidalField, stats: NormStats) -> TidalField:
    raw = field.data * stats.std[None, :, None, None] + stats.mean[None, :, None, None]
    return field.with_data(raw)


def normalize_array(data: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize a [..., 3, H, W] or [N, 3] array with per-channel stats."""
    if data.shape[-1] == N_CHANNELS and data.ndim == 2:
        return ((data - stats.mean) / stats.std).astype(data.dtype)
    return ((data - stats.mean[:, None, None]) / stats.std[:, None, None]).astype(data.dtype)


def denormalize_array(data: np.ndarray, stats: NormStats) -> np.ndarray:
    if data.shape[-1] == N_CHANNELS and data.ndim == 2:
        return (data * stats.std + stats.mean).astype(data.dtype)
    return (data * stats.std[:, None, None] + stats.mean[:, None, None]).astype(data.dtype)


def write_tcds(path, field: TidalField) -> None:
    """Write a field in the .tcds container (little-endian, bit-exact)."""
    t, c, h, w = field.data.shape
    with open(path, "wb") as fh:
        fh.write(TCDS_MAGIC)
        fh.write(struct.pack("<IIIII", TCDS_VERSION, t, h, w, c))
        fh.write(struct.pack("<dddd", *field.extent))
        fh.write(struct.pack("<d", field.meters_per_cell))
        fh.write(field.mask.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(field.data, dtype="<f4").tobytes())


def read_tcds(path) -> TidalField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TCDS_MAGIC:
            raise ValueError(f"{path}: not a .tcds file (bad magic {magic!r})")
        version, t, h, w, c = struct.unpack("<IIIII", fh.read(20))
        if version != TCDS_VERSION:
            raise ValueError(f"{path}: unsupported .tcds version {version}")
        if c != N_CHANNELS:
            raise ValueError(f"{path}: expected 3 channels, got {c}")
        extent = struct.unpack("<dddd", fh.read(32))
        (meters_per_cell,) = struct.unpack("<d", fh.read(8))
        mask = np.frombuffer(fh.read(h * w), dtype=np.uint8).reshape(h, w) != 0
        payload = fh.read(t * c * h * w * 4)
        if len(payload) != t * c * h * w * 4:
            raise ValueError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w)
    return TidalField(data=data.copy(), mask=mask.copy(), extent=extent,
                      meters_per_cell=meters_per_cell)
