"""Arbitrary-scale downscaling network for tidal-current grids.

Four pieces, assembled from the autodiff substrate:

  * an EDSR-style residual feature extractor with a learnable positional
    encoding added after the head convolution (the grid is geographically
    anchored, so translation variance is deliberate);
  * an arbitrary-scale head: per query coordinate, the 3x3-unfolded latents
    of the four nearest feature cells are run through a small MLP together
    with the query's offset from each cell centre, and the four outputs are
    blended with opposing-rectangle area weights;
  * an auxiliary fixed-scale head (conv -> pixel shuffle -> conv) that only
    exists to supply dense training gradients;
  * optional feature-map splitting, giving the velocity pair and the water
    level disjoint channel slices with separate heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .fields import (NormStats, TidalField, cell_center_coords,
                     denormalize_array, normalize_array)

OUT_VELOCITY = 2
OUT_LEVEL = 1
ENSEMBLE = 4
COORD_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters; defaults match the full-size network."""

    channels: int = 384
    n_blocks: int = 32
    fms_ratio: tuple[int, int] | None = (2, 1)
    atm_scale: int = 6
    lr_height: int = 50
    lr_width: int = 48
    n_mlp_hidden: int = 4
    pe_enabled: bool = True

    def __post_init__(self):
        if min(self.channels, self.n_blocks + 1, self.atm_scale,
               self.lr_height, self.lr_width, self.n_mlp_hidden) < 1:
            raise ValueError("all dimensions must be positive")
        if self.fms_ratio is not None:
            a, b = self.fms_ratio
            if a < 1 or b < 1:
                raise ValueError(f"split ratio parts must be positive, got {self.fms_ratio}")
            if self.channels * a % (a + b) or self.channels % (a + b):
                raise ValueError(
                    f"channels {self.channels} not divisible at ratio {a}:{b}")
            object.__setattr__(self, "fms_ratio", (int(a), int(b)))

    @property
    def split_boundary(self) -> int:
        """First channel of the level slice; equals channels when unsplit."""
        if self.fms_ratio is None:
            return self.channels
        a, b = self.fms_ratio
        return self.channels * a // (a + b)

    def branches(self) -> list[tuple[str, int, int]]:
        """(name, width, out_channels) per head branch, velocity first."""
        k = self.split_boundary
        if self.fms_ratio is None:
            return [("joint", self.channels, OUT_VELOCITY + OUT_LEVEL)]
        return [("vel", k, OUT_VELOCITY), ("lvl", self.channels - k, OUT_LEVEL)]

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "n_blocks": self.n_blocks,
            "fms_ratio": list(self.fms_ratio) if self.fms_ratio else None,
            "atm_scale": self.atm_scale,
            "lr_height": self.lr_height,
            "lr_width": self.lr_width,
            "n_mlp_hidden": self.n_mlp_hidden,
            "pe_enabled": self.pe_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("fms_ratio") is not None:
            d["fms_ratio"] = tuple(d["fms_ratio"])
        return cls(**d)


def split_channels(cfg: ModelConfig) -> tuple[int, int | None]:
    """Channel widths of the (velocity, level) slices; level None when unsplit."""
    if cfg.fms_ratio is None:
        return cfg.channels, None
    k = cfg.split_boundary
    return k, cfg.channels - k


class TidalDownscaler:
    """The assembled network; owns its ParamStore."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self._init_params(np.random.Generator(np.random.PCG64(seed)))

    # -- parameter construction ------------------------------------------

    def _uniform(self, rng, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(self.dtype)

    def _add_conv(self, rng, name, c_out, c_in):
        self.params.add(f"{name}_w", self._uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        self.params.add(f"{name}_b", np.zeros(c_out, dtype=self.dtype))

    def _add_linear(self, rng, name, d_out, d_in):
        self.params.add(f"{name}_w", self._uniform(rng, (d_out, d_in), d_in))
        self.params.add(f"{name}_b", np.zeros(d_out, dtype=self.dtype))

    def _init_params(self, rng):
        cfg = self.cfg
        c = cfg.channels
        self._add_conv(rng, "head", c, 3)
        self.params.add(
            "pe", rng.normal(0.0, 0.02, (c, cfg.lr_height, cfg.lr_width)).astype(self.dtype))
        for i in range(cfg.n_blocks):
            self._add_conv(rng, f"block{i}_conv1", c, c)
            self._add_conv(rng, f"block{i}_conv2", c, c)
        self._add_conv(rng, "tail", c, c)
        for name, k, out_ch in cfg.branches():
            in_dim = 9 * k + 2
            for j in range(cfg.n_mlp_hidden):
                self._add_linear(rng, f"{name}_mlp{j}", k, in_dim)
                in_dim = k
            self._add_linear(rng, f"{name}_mlp_out", out_ch, k)
            self._add_conv(rng, f"{name}_up", k * cfg.atm_scale ** 2, k)
            self._add_conv(rng, f"{name}_hr", out_ch, k)

    def branch_param_names(self, branch: str) -> list[str]:
        """Head parameters (MLP + fixed-scale convs) of one branch."""
        return [n for n in self.params.names() if n.startswith(f"{branch}_")]

    # -- forward passes ---------------------------------------------------

    def extract_features(self, x) -> Tensor:
        """LR grid [N, 3, H, W] -> feature map [N, C, H, W]."""
        x = ad.as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype))
        cfg = self.cfg
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ValueError(f"expected input [N, 3, H, W], got {x.data.shape}")
        if x.data.shape[2] != cfg.lr_height or x.data.shape[3] != cfg.lr_width:
            raise ValueError(
                f"PE shape mismatch: input {x.data.shape[2]}x{x.data.shape[3]}, "
                f"configured {cfg.lr_height}x{cfg.lr_width}")
        p = self.params
        t = ad.conv2d(x, p["head_w"], p["head_b"])
        if cfg.pe_enabled:
            t = ad.add(t, p["pe"])
        skip = t
        for i in range(cfg.n_blocks):
            u = ad.conv2d(t, p[f"block{i}_conv1_w"], p[f"block{i}_conv1_b"])
            u = ad.relu(u)
            u = ad.conv2d(u, p[f"block{i}_conv2_w"], p[f"block{i}_conv2_b"])
            t = ad.add(t, u)
        t = ad.conv2d(t, p["tail_w"], p["tail_b"])
        return ad.add(t, skip)

    def split_features(self, feat: Tensor) -> list[tuple[str, Tensor, int]]:
        """Contiguous channel slices per branch: [(name, slice, out_channels)]."""
        branches = self.cfg.branches()
        if self.cfg.fms_ratio is None:
            return [(branches[0][0], feat, branches[0][2])]
        k = self.cfg.split_boundary
        return [
            (branches[0][0], ad.slice_channels(feat, 0, k), branches[0][2]),
            (branches[1][0], ad.slice_channels(feat, k, self.cfg.channels), branches[1][2]),
        ]

    def _prepare_query(self, feat: Tensor):
        return [(name, ad.unfold3x3(sl), out_ch)
                for name, sl, out_ch in self.split_features(feat)]

    def query(self, feat: Tensor, coords: np.ndarray) -> Tensor:
        """Signals at normalized (y, x) query points: [Nq, 3] (U, V, level)."""
        return self._query_prepared(self._prepare_query(feat), coords)

    def _query_prepared(self, prepared, coords: np.ndarray) -> Tensor:
        if prepared[0][1].data.shape[0] != 1:
            raise ValueError("query supports one grid item at a time")
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 1:
            raise ValueError(f"coords must be [Nq, 2], got {coords.shape}")
        if np.abs(coords).max() > 1.0:
            raise ValueError("query coordinate outside [-1, 1]")
        h, w = self.cfg.lr_height, self.cfg.lr_width
        samples = _ensemble_samples(coords, h, w)

        branch_outs = []
        for name, unf, out_ch in prepared:
            preds = []
            for idx, rel in samples:
                lat = ad.gather_cells(unf, idx)
                inp = ad.concat([lat, Tensor(rel.astype(self.dtype))], axis=1)
                hdn = inp
                for j in range(self.cfg.n_mlp_hidden):
                    hdn = ad.relu(ad.linear(hdn, self.params[f"{name}_mlp{j}_w"],
                                            self.params[f"{name}_mlp{j}_b"]))
                preds.append(ad.linear(hdn, self.params[f"{name}_mlp_out_w"],
                                       self.params[f"{name}_mlp_out_b"]))
            weights = _ensemble_weights(samples)
            acc = ad.mul_const(preds[0], weights[0][:, None].astype(self.dtype))
            for s in range(1, ENSEMBLE):
                acc = ad.add(acc, ad.mul_const(preds[s], weights[s][:, None].astype(self.dtype)))
            branch_outs.append(acc)
        if len(branch_outs) == 1:
            return branch_outs[0]
        return ad.concat(branch_outs, axis=1)

    def aux_upsample(self, feat: Tensor) -> Tensor:
        """Fixed-scale output [N, 3, H*r, W*r] from the auxiliary head."""
        r = self.cfg.atm_scale
        outs = []
        for name, sl, _ in self.split_features(feat):
            t = ad.conv2d(sl, self.params[f"{name}_up_w"], self.params[f"{name}_up_b"])
            t = ad.pixel_shuffle(t, r)
            outs.append(ad.conv2d(t, self.params[f"{name}_hr_w"], self.params[f"{name}_hr_b"]))
        if len(outs) == 1:
            return outs[0]
        return ad.concat(outs, axis=1)

    # -- inference ---------------------------------------------------------

    def predict_grid(self, lr_input: np.ndarray, out_h: int, out_w: int,
                     chunk: int = 65536) -> np.ndarray:
        """Dense query of all out_h x out_w cell centers; returns [out_h*out_w, 3].

        Chunks of the coordinate list concatenate to exactly the same values
        a single full query would produce (rows are independent).
        """
        with ad.no_grad():
            feat = self.extract_features(lr_input)
            prepared = self._prepare_query(feat)
            coords = cell_center_coords(out_h, out_w)
            pieces = []
            for start in range(0, coords.shape[0], chunk):
                part = self._query_prepared(prepared, coords[start:start + chunk])
                pieces.append(part.data)
        return np.concatenate(pieces, axis=0)


def _ensemble_samples(coords: np.ndarray, h: int, w: int):
    """Four nearest-cell samples per query: [(flat_idx, rel), ...].

    rel is the query offset from the sampled cell center, expressed in cell
    units (multiplied by the axis length), matching the blend geometry.
    """
    y, x = coords[:, 0], coords[:, 1]
    out = []
    for sy in (-1.0, 1.0):
        jy, ry = _axis_sample(y, sy, h)
        for sx in (-1.0, 1.0):
            jx, rx = _axis_sample(x, sx, w)
            out.append((jy * w + jx, np.stack([ry, rx], axis=1)))
    return out


def _axis_sample(q: np.ndarray, side: float, n: int):
    shifted = q + side / n + COORD_EPS
    j = np.clip(np.floor((shifted + 1.0) * n / 2.0).astype(np.int64), 0, n - 1)
    centers = (2.0 * (j + 0.5) / n) - 1.0
    return j, (q - centers) * n


def _ensemble_weights(samples):
    """Opposing-rectangle area weights; rows sum to 1 across the 4 samples."""
    areas = [np.abs(rel[:, 0] * rel[:, 1]) + 1e-9 for _, rel in samples]
    total = areas[0] + areas[1] + areas[2] + areas[3]
    # weight of each sample is the area spanned by the diagonally opposite one
    order = (3, 2, 1, 0)
    return [areas[order[s]] / total for s in range(ENSEMBLE)]


def upsample_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Containing-cell (nearest-center) upsample of a boolean mask."""
    h, w = mask.shape
    iy = np.minimum((np.arange(out_h) + 0.5) * h // out_h, h - 1).astype(np.int64)
    ix = np.minimum((np.arange(out_w) + 0.5) * w // out_w, w - 1).astype(np.int64)
    return mask[np.ix_(iy, ix)]


def output_grid_size(h: int, w: int, scale: float) -> tuple[int, int]:
    if scale < 1.0:
        raise ValueError("scale must be >= 1")
    return int(round(scale * h)), int(round(scale * w))


def predict_field(model: TidalDownscaler, stats: NormStats, lr_field: TidalField,
                  scale: float, chunk: int = 65536) -> TidalField:
    """Downscale a whole field at any real scale >= 1 via the query head."""
    out_h, out_w = output_grid_size(lr_field.height, lr_field.width, scale)
    frames = []
    for t in range(lr_field.timesteps):
        lr_norm = normalize_array(lr_field.data[t], stats)[None]
        points = model.predict_grid(lr_norm, out_h, out_w, chunk=chunk)
        grid = points.T.reshape(3, out_h, out_w).astype(np.float32)
        frames.append(denormalize_array(grid, stats))
    mask = upsample_mask_nearest(lr_field.mask, out_h, out_w)
    return TidalField(
        data=np.stack(frames),
        mask=mask,
        extent=lr_field.extent,
        meters_per_cell=lr_field.meters_per_cell * lr_field.height / out_h,
    )
