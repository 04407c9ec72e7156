"""Training loop: joint masked-L1 supervision of both heads, Adam with a
single step decay, fixed-scale LR/HR pairs, CSV logging, checkpoints.

Both losses are computed in normalized units (per-channel statistics taken
over sea cells of the training split only). Land cells of the LR input are
infilled and convolved normally; masking applies exclusively to losses.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fields import (NormStats, TidalField, cell_center_coords, compute_stats,
                     denormalize_array, normalize)
from .model import ModelConfig, TidalDownscaler
from .optim import Adam

TCKP_MAGIC = b"TCKP"
TCKP_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 1e-4
    decay_epoch: int = 25
    decay_factor: float = 10.0
    batch_size: int = 1
    coord_samples: int | str = 2048   # per-item ASM query count, or "full"
    seed: int = 0
    atm_enabled: bool = True
    w_asm: float = 1.0
    w_atm: float = 1.0
    val_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 1 <= self.decay_epoch <= self.epochs:
            raise ValueError("decay_epoch must lie in [1, epochs]")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        if self.batch_size < 1 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be >= 1")
        if self.coord_samples != "full" and int(self.coord_samples) < 1:
            raise ValueError('coord_samples must be >= 1 or "full"')

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "lr0": self.lr0,
            "decay_epoch": self.decay_epoch, "decay_factor": self.decay_factor,
            "batch_size": self.batch_size, "coord_samples": self.coord_samples,
            "seed": self.seed, "atm_enabled": self.atm_enabled,
            "w_asm": self.w_asm, "w_atm": self.w_atm, "val_every": self.val_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate until the decay epoch, then a single divided plateau."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch < cfg.decay_epoch:
        return cfg.lr0
    return cfg.lr0 / cfg.decay_factor


def masked_l1(pred: np.ndarray, target: np.ndarray, sea_mask: np.ndarray) -> float:
    """Mean absolute difference over sea elements only."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    sel = np.broadcast_to(np.asarray(sea_mask, dtype=bool), pred.shape)
    if not sel.any():
        raise ValueError("empty sea mask")
    return float(np.abs(pred[sel] - target[sel]).mean())


def sample_train_coords(hr: TidalField, t: int, q: int | str,
                        rng: np.random.Generator):
    """Uniform sample of HR sea-cell centers with their exact values.

    Returns (coords [Q, 2], targets [Q, 3]); q == "full" or q >= sea count
    takes every sea cell once. No resizing or augmentation is applied.
    """
    h, w = hr.height, hr.width
    sea = np.flatnonzero(hr.mask.ravel())
    if q == "full" or int(q) >= sea.size:
        cells = sea
    else:
        cells = rng.choice(sea, size=int(q), replace=False)
    coords = cell_center_coords(h, w)[cells]
    targets = hr.data[t].reshape(3, h * w)[:, cells].T
    return coords, np.ascontiguousarray(targets)


def train_step(model: TidalDownscaler, optim: Adam, lr_frames: np.ndarray,
               hr_frames: np.ndarray, hr_mask: np.ndarray, cfg: TrainConfig,
               coord_batches) -> tuple[float, float | None]:
    """One optimizer update over a batch of timesteps (normalized units).

    coord_batches: per item, an (coords, targets) pair for the query head.
    Returns the batch-mean loss of each head (auxiliary None when disabled).
    """
    n = lr_frames.shape[0]
    asm_terms = []
    atm_terms = []
    for i in range(n):
        feat = model.extract_features(lr_frames[i:i + 1])
        coords, targets = coord_batches[i]
        pred = model.query(feat, coords)
        asm_terms.append(ad.mean_abs(ad.sub_const(pred, targets.astype(model.dtype))))
        if cfg.atm_enabled:
            hr_pred = model.aux_upsample(feat)
            diff = ad.sub_const(hr_pred, hr_frames[i:i + 1].astype(model.dtype))
            atm_terms.append(ad.mean_abs(ad.take_mask(diff, hr_mask[None, None])))

    loss_asm = asm_terms[0]
    for term in asm_terms[1:]:
        loss_asm = ad.add(loss_asm, term)
    loss_asm = ad.mul_const(loss_asm, 1.0 / n)
    total = ad.mul_const(loss_asm, cfg.w_asm)
    loss_atm = None
    if cfg.atm_enabled:
        loss_atm = atm_terms[0]
        for term in atm_terms[1:]:
            loss_atm = ad.add(loss_atm, term)
        loss_atm = ad.mul_const(loss_atm, 1.0 / n)
        total = ad.add(total, ad.mul_const(loss_atm, cfg.w_atm))

    optim.zero_grad()
    total.backward()
    optim.step()
    return float(loss_asm.data), None if loss_atm is None else float(loss_atm.data)


def validation_mse(model: TidalDownscaler, stats: NormStats,
                   val_pair: tuple[TidalField, TidalField],
                   chunk: int = 65536) -> dict:
    """Query-head MSE against raw GT over sea cells of a held-out pair."""
    lr, hr = val_pair
    mask = hr.mask
    sq_all = sq_vel = sq_lvl = 0.0
    n_all = n_vel = n_lvl = 0
    for t in range(lr.timesteps):
        lr_norm = (lr.data[t] - stats.mean[:, None, None]) / stats.std[:, None, None]
        points = model.predict_grid(lr_norm[None].astype(model.dtype), hr.height, hr.width,
                                    chunk=chunk)
        pred = points.T.reshape(3, hr.height, hr.width)
        pred = denormalize_array(pred.astype(np.float32), stats)
        err = (pred - hr.data[t]) ** 2
        sea = err[:, mask]                       # [3, n_sea]
        sq_vel += float(sea[:2].sum()); n_vel += 2 * sea.shape[1]
        sq_lvl += float(sea[2].sum()); n_lvl += sea.shape[1]
        sq_all += float(sea.sum()); n_all += 3 * sea.shape[1]
    return {
        "mse_total": sq_all / n_all,
        "mse_velocity": sq_vel / n_vel,
        "mse_level": sq_lvl / n_lvl,
    }


@dataclass
class TrainResult:
    model: TidalDownscaler
    optim: Adam
    stats: NormStats
    history: dict = field(default_factory=dict)


def _log_row(rows, log_fh, epoch, step, loss_asm, loss_atm, lr, wall):
    atm_txt = "" if loss_atm is None else repr(float(loss_atm))
    row = [str(epoch), str(step), repr(float(loss_asm)), atm_txt,
           repr(float(lr)), f"{wall:.6f}"]
    rows.append(row)
    if log_fh is not None:
        log_fh.write(",".join(row) + "\n")
        log_fh.flush()


def train_model(model_cfg: ModelConfig, train_cfg: TrainConfig,
                train_pair: tuple[TidalField, TidalField],
                val_pair: tuple[TidalField, TidalField] | None = None,
                log_path=None, ckpt_path=None) -> TrainResult:
    """Full training run; returns the trained model with its statistics."""
    lr_field, hr_field = train_pair
    if (lr_field.height, lr_field.width) != (model_cfg.lr_height, model_cfg.lr_width):
        raise ValueError("training LR grid does not match the model configuration")
    r = model_cfg.atm_scale
    if train_cfg.atm_enabled and (hr_field.height, hr_field.width) != (
            lr_field.height * r, lr_field.width * r):
        raise ValueError(f"auxiliary head needs HR exactly x{r} of LR")
    if lr_field.timesteps != hr_field.timesteps:
        raise ValueError("LR/HR timestep counts differ")

    stats = compute_stats(hr_field)
    lr_norm = normalize(lr_field, stats)
    hr_norm = normalize(hr_field, stats)
    hr_norm_for_sampling = hr_norm

    seed_seq = np.random.SeedSequence(train_cfg.seed)
    param_seed, data_seed = seed_seq.spawn(2)
    model = TidalDownscaler(model_cfg, seed=param_seed)
    optim = Adam(model.params, lr=train_cfg.lr0)
    data_rng = np.random.Generator(np.random.PCG64(data_seed))

    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "w")
        log_fh.write("epoch,step,loss_asm,loss_atm,lr,wall_seconds\n")

    steps: list[list[str]] = []
    epochs_hist: list[dict] = []
    step_counter = 0
    t_steps = lr_field.timesteps
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            optim.lr = lr_schedule(train_cfg, epoch)
            order = data_rng.permutation(t_steps)
            asm_losses = []
            atm_losses = []
            for start in range(0, t_steps, train_cfg.batch_size):
                batch = order[start:start + train_cfg.batch_size]
                t0 = time.perf_counter()
                coord_batches = [
                    sample_train_coords(hr_norm_for_sampling, int(t),
                                        train_cfg.coord_samples, data_rng)
                    for t in batch
                ]
                loss_asm, loss_atm = train_step(
                    model, optim, lr_norm.data[batch], hr_norm.data[batch],
                    hr_field.mask, train_cfg, coord_batches)
                step_counter += 1
                wall = time.perf_counter() - t0
                _log_row(steps, log_fh, epoch, step_counter, loss_asm, loss_atm,
                         optim.lr, wall)
                asm_losses.append(loss_asm)
                if loss_atm is not None:
                    atm_losses.append(loss_atm)
            epoch_row = {
                "epoch": epoch,
                "loss_asm_mean": float(np.mean(asm_losses)),
                "loss_atm_mean": float(np.mean(atm_losses)) if atm_losses else None,
            }
            if val_pair is not None and epoch % train_cfg.val_every == 0:
                epoch_row.update(validation_mse(model, stats, val_pair))
            epochs_hist.append(epoch_row)
    finally:
        if log_fh is not None:
            log_fh.close()

    result = TrainResult(model=model, optim=optim, stats=stats,
                         history={"steps": steps, "epochs": epochs_hist})
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, model, optim, train_cfg, stats,
                        epoch=train_cfg.epochs, step=step_counter,
                        rng_state=data_rng.bit_generator.state)
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: TidalDownscaler, optim: Adam,
                    train_cfg: TrainConfig, stats: NormStats,
                    epoch: int = 0, step: int = 0, rng_state: dict | None = None) -> None:
    """Serialize configs, statistics, parameters and optimizer state (.tckp)."""
    header = {
        "model": model.cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "stats": stats.to_dict(),
        "dtype": model.dtype.name,
        "epoch": int(epoch),
        "step": int(step),
        "optimizer": {"t": optim.t, "lr": optim.lr, "beta1": optim.beta1,
                      "beta2": optim.beta2, "eps": optim.eps},
        "param_names": model.params.names(),
        "rng_state": rng_state,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    params = model.params.to_vector()
    m_vec, v_vec = optim.state_arrays()
    with open(path, "wb") as fh:
        fh.write(TCKP_MAGIC)
        fh.write(struct.pack("<II", TCKP_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for vec in (params, m_vec, v_vec):
            fh.write(np.ascontiguousarray(vec, dtype=f"<{vec.dtype.kind}{vec.dtype.itemsize}").tobytes())


@dataclass
class Checkpoint:
    model: TidalDownscaler
    optim: Adam
    train_cfg: TrainConfig
    stats: NormStats
    epoch: int
    step: int
    rng_state: dict | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TCKP_MAGIC:
            raise ValueError(f"{path}: not a .tckp file (bad magic {magic!r})")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != TCKP_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        model_cfg = ModelConfig.from_dict(header["model"])
        train_cfg = TrainConfig.from_dict(header["train"])
        stats = NormStats.from_dict(header["stats"])
        dtype = np.dtype(header["dtype"])
        model = TidalDownscaler(model_cfg, seed=0, dtype=dtype)
        if model.params.names() != header["param_names"]:
            raise ValueError(f"{path}: parameter manifest mismatch")
        total = model.params.n_values()
        itemsize = dtype.itemsize
        payload = fh.read(3 * total * itemsize)
        if len(payload) != 3 * total * itemsize:
            raise ValueError(f"{path}: truncated parameter payload")
    vecs = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype, copy=False)
    model.params.load_vector(vecs[:total])
    opt_hdr = header["optimizer"]
    optim = Adam(model.params, lr=opt_hdr["lr"], beta1=opt_hdr["beta1"],
                 beta2=opt_hdr["beta2"], eps=opt_hdr["eps"])
    optim.load_state_arrays(vecs[total:2 * total], vecs[2 * total:], opt_hdr["t"])
    return Checkpoint(model=model, optim=optim, train_cfg=train_cfg, stats=stats,
                      epoch=header["epoch"], step=header["step"],
                      rng_state=header["rng_state"])
