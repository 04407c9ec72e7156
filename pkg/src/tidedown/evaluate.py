"""Metrics, the bicubic baseline, comparison harnesses, and PGM rendering.

Velocity (U and V pooled) and water level are always reported separately.
All metrics are masked: land cells never contribute. Values are raw model
units; any presentation rescaling (e.g. reporting MSE in 1e-5 units) is
left to the consumer of the CSVs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .costmodel import cost_report
from .fields import TidalField
from .model import output_grid_size, predict_field, upsample_mask_nearest
from .train import Checkpoint, TrainConfig, load_checkpoint, train_model

BICUBIC_A = -0.5  # Keys kernel parameter


def _masked_reduce(gt, pred, mask, fn) -> float:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    sel = np.broadcast_to(np.asarray(mask, dtype=bool), gt.shape)
    if not sel.any():
        raise ValueError("empty sea mask")
    return float(fn(gt[sel].astype(np.float64) - pred[sel].astype(np.float64)).mean())


def mse(gt, pred, mask) -> float:
    """Mean squared difference over sea elements."""
    return _masked_reduce(gt, pred, mask, np.square)


def mae(gt, pred, mask) -> float:
    """Mean absolute difference over sea elements."""
    return _masked_reduce(gt, pred, mask, np.abs)


@dataclass(frozen=True)
class EvalReport:
    label: str
    scale: float
    n_sea_points: int
    velocity_mse: float
    velocity_mae: float
    level_mse: float
    level_mae: float

    def csv_row(self) -> list:
        return [self.label, f"{self.scale:g}", str(self.n_sea_points),
                repr(self.velocity_mse), repr(self.velocity_mae),
                repr(self.level_mse), repr(self.level_mae)]


EVAL_CSV_HEADER = ["label", "scale", "n_sea_points",
                   "velocity_mse", "velocity_mae", "level_mse", "level_mae"]


def evaluate_prediction(gt: TidalField, pred: TidalField, label: str = "",
                        scale: float = 0.0) -> EvalReport:
    """Per-group metrics of a prediction against GT on the GT sea mask."""
    if gt.data.shape != pred.data.shape:
        raise ValueError(f"prediction shape {pred.data.shape} != GT {gt.data.shape}")
    mask = gt.mask
    return EvalReport(
        label=label, scale=scale,
        n_sea_points=gt.timesteps * int(mask.sum()),
        velocity_mse=mse(gt.data[:, :2], pred.data[:, :2], mask),
        velocity_mae=mae(gt.data[:, :2], pred.data[:, :2], mask),
        level_mse=mse(gt.data[:, 2], pred.data[:, 2], mask),
        level_mae=mae(gt.data[:, 2], pred.data[:, 2], mask),
    )


# ---------------------------------------------------------------------------
# bicubic baseline


def _cubic_kernel(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2 = t * t
    t3 = t2 * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] cubic interpolation matrix, edge-clamped.

    Output samples sit at the target grid's cell centers under the shared
    [-1, 1] convention; clamped taps accumulate, preserving the partition
    of unity (constants are reproduced exactly).
    """
    centers = (2.0 * (np.arange(n_out) + 0.5) / n_out) - 1.0
    p = (centers + 1.0) / 2.0 * n_in - 0.5
    base = np.floor(p).astype(np.int64)
    frac = p - base
    w = np.empty((4, n_out))
    for i, off in enumerate((-1, 0, 1, 2)):
        w[i] = _cubic_kernel(frac - off)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for i, off in enumerate((-1, 0, 1, 2)):
        cols = np.clip(base + off, 0, n_in - 1)
        np.add.at(mat, (rows, cols), w[i])
    return mat


def bicubic_upsample(lr: TidalField, scale: float) -> TidalField:
    """Separable Keys-kernel (a = -0.5) upsample of every channel/timestep."""
    out_h, out_w = output_grid_size(lr.height, lr.width, scale)
    wy = _resample_matrix(lr.height, out_h)
    wx = _resample_matrix(lr.width, out_w)
    t, c, h, w = lr.data.shape
    flat = lr.data.reshape(t * c, h, w).astype(np.float64)
    tmp = flat @ wx.T                                   # [T*C, H, Wout]
    out = np.matmul(tmp.transpose(0, 2, 1), wy.T).transpose(0, 2, 1)
    return TidalField(
        data=out.reshape(t, c, out_h, out_w).astype(np.float32),
        mask=upsample_mask_nearest(lr.mask, out_h, out_w),
        extent=lr.extent,
        meters_per_cell=lr.meters_per_cell * lr.height / out_h,
    )


# ---------------------------------------------------------------------------
# harnesses


ABLATION_VARIANTS = [
    # label, atm, pe, split
    ("baseline", False, False, False),
    ("+atm", True, False, False),
    ("+atm+pe", True, True, False),
    ("+atm+pe+fms", True, True, True),
]


def _check_variant(label: str, ckpt: Checkpoint, atm: bool, pe: bool, split: bool):
    got = (ckpt.train_cfg.atm_enabled, ckpt.model.cfg.pe_enabled,
           ckpt.model.cfg.fms_ratio is not None)
    if got != (atm, pe, split):
        raise ValueError(
            f"checkpoint for variant {label!r} was trained with "
            f"(atm, pe, fms)={got}, expected {(atm, pe, split)}")


def ablation_harness(test_pair: tuple[TidalField, TidalField],
                     ckpt_paths: dict, scale: float | None = None,
                     chunk: int = 65536) -> list[EvalReport]:
    """Evaluate the four cumulative variants on a held-out pair.

    ckpt_paths maps variant labels (see ABLATION_VARIANTS) to .tckp files;
    a missing entry is an error naming the variant.
    """
    lr, hr = test_pair
    if scale is None:
        scale = hr.height / lr.height
    reports = []
    for label, atm, pe, split in ABLATION_VARIANTS:
        path = ckpt_paths.get(label)
        if path is None:
            raise ValueError(f"missing checkpoint for variant {label!r}")
        try:
            ckpt = load_checkpoint(path)
        except FileNotFoundError:
            raise ValueError(f"missing checkpoint for variant {label!r}: {path}") from None
        _check_variant(label, ckpt, atm, pe, split)
        pred = predict_field(ckpt.model, ckpt.stats, lr, scale, chunk=chunk)
        reports.append(evaluate_prediction(hr, pred, label=label, scale=scale))
    return reports


ABLATION_CSV_HEADER = ["variant", "atm", "pe", "fms",
                       "velocity_mse", "velocity_mae", "level_mse", "level_mae"]


def ablation_csv_rows(reports: list[EvalReport]) -> list[list]:
    rows = [ABLATION_CSV_HEADER[:]]
    for (label, atm, pe, split), rep in zip(ABLATION_VARIANTS, reports):
        rows.append([label, str(int(atm)), str(int(pe)), str(int(split)),
                     repr(rep.velocity_mse), repr(rep.velocity_mae),
                     repr(rep.level_mse), repr(rep.level_mae)])
    return rows


def fms_tradeoff_harness(test_pair: tuple[TidalField, TidalField],
                         ckpt_paths: dict, scale: float | None = None,
                         chunk: int = 65536) -> list[dict]:
    """One row per split ratio joining test-time cost with held-out metrics,
    sorted by ascending query-path cost."""
    lr, hr = test_pair
    if scale is None:
        scale = hr.height / lr.height
    rows = []
    for label, path in ckpt_paths.items():
        try:
            ckpt = load_checkpoint(path)
        except FileNotFoundError:
            raise ValueError(f"missing checkpoint for ratio {label!r}: {path}") from None
        cost = cost_report(ckpt.model.cfg, label=label)
        pred = predict_field(ckpt.model, ckpt.stats, lr, scale, chunk=chunk)
        rep = evaluate_prediction(hr, pred, label=label, scale=scale)
        rows.append({"ratio": label, "test_gflops": cost.test_total / 1e9,
                     "report": rep})
    rows.sort(key=lambda r: r["test_gflops"])
    return rows


TRADEOFF_CSV_HEADER = ["fms", "test_gflops",
                       "velocity_mse", "velocity_mae", "level_mse", "level_mae"]


def tradeoff_csv_rows(rows: list[dict]) -> list[list]:
    out = [TRADEOFF_CSV_HEADER[:]]
    for row in rows:
        rep = row["report"]
        out.append([row["ratio"], f"{row['test_gflops']:.3f}",
                    repr(rep.velocity_mse), repr(rep.velocity_mae),
                    repr(rep.level_mse), repr(rep.level_mae)])
    return out


def atm_effect_curves(model_cfg, base_cfg: TrainConfig,
                      train_pair, val_pair, seeds, epochs: int | None = None) -> list[dict]:
    """Train with and without the auxiliary head per seed; collect curves.

    Returns one row per (seed, variant, epoch) with the epoch-mean train
    losses and held-out validation MSE, for aux-head effect comparisons.
    """
    rows = []
    for seed in seeds:
        for atm in (True, False):
            cfg = replace(base_cfg, seed=int(seed), atm_enabled=atm,
                          epochs=epochs or base_cfg.epochs)
            result = train_model(model_cfg, cfg, train_pair, val_pair=val_pair)
            for er in result.history["epochs"]:
                rows.append({
                    "seed": int(seed),
                    "variant": "atm" if atm else "no_atm",
                    "epoch": er["epoch"],
                    "loss_asm_mean": er["loss_asm_mean"],
                    "loss_atm_mean": er.get("loss_atm_mean"),
                    "val_mse_total": er.get("mse_total"),
                    "val_mse_velocity": er.get("mse_velocity"),
                    "val_mse_level": er.get("mse_level"),
                })
    return rows


CURVES_CSV_HEADER = ["seed", "variant", "epoch", "loss_asm_mean", "loss_atm_mean",
                     "val_mse_total", "val_mse_velocity", "val_mse_level"]


def curves_csv_rows(rows: list[dict]) -> list[list]:
    out = [CURVES_CSV_HEADER[:]]
    for row in rows:
        out.append([str(row["seed"]), row["variant"], str(row["epoch"])]
                   + ["" if row[k] is None else repr(row[k])
                      for k in CURVES_CSV_HEADER[3:]])
    return out


def write_csv(path, rows: list[list]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# rendering


CHANNEL_INDEX = {"u": 0, "v": 1, "level": 2}


def _to_gray(values: np.ndarray, mask: np.ndarray,
             vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Min-max normalized 8-bit grayscale; land forced to black."""
    sea_vals = values[mask]
    lo = float(sea_vals.min()) if vmin is None else vmin
    hi = float(sea_vals.max()) if vmax is None else vmax
    if hi - lo < 1e-12:
        img = np.full(values.shape, 128, dtype=np.uint8)
    else:
        scaled = np.clip((values.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
        img = np.rint(scaled * 255.0).astype(np.uint8)
    img[~mask] = 0
    return img


def _write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def render_gray(field: TidalField, channel, t: int, path) -> np.ndarray:
    """Write one channel/timestep as a binary PGM; returns the pixel array."""
    c = CHANNEL_INDEX[channel] if isinstance(channel, str) else int(channel)
    if not 0 <= c < 3:
        raise ValueError(f"bad channel {channel!r}")
    if not 0 <= t < field.timesteps:
        raise ValueError(f"timestep {t} outside [0, {field.timesteps})")
    img = _to_gray(field.data[t, c], field.mask)
    _write_pgm(path, img)
    return img


def render_compare(fields: list[TidalField], channel, t: int, path) -> np.ndarray:
    """Tile fields side by side (2-px white separators), shared gray scale.

    The first field (conventionally the GT) fixes the value range; the
    others are clipped into it so shading is comparable across tiles.
    """
    if not fields:
        raise ValueError("nothing to render")
    c = CHANNEL_INDEX[channel] if isinstance(channel, str) else int(channel)
    hw = (fields[0].height, fields[0].width)
    for f in fields:
        if (f.height, f.width) != hw:
            raise ValueError("comparison fields must share grid dimensions")
    ref = fields[0].data[t, c][fields[0].mask]
    lo, hi = float(ref.min()), float(ref.max())
    tiles = [_to_gray(f.data[t, c], f.mask, lo, hi) for f in fields]
    sep = np.full((hw[0], 2), 255, dtype=np.uint8)
    parts = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(tile)
    img = np.concatenate(parts, axis=1)
    _write_pgm(path, img)
    return img
