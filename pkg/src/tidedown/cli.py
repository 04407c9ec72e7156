"""Single executable covering the full workflow: synthesize data, train,
infer at arbitrary scale, evaluate, run comparison harnesses, report
computational cost, and render grayscale comparisons.

Every command is deterministic given its flags and seeds, never mutates
input files, exits 0 on success and 1 with a one-line diagnostic on error.
TIDEDOWN_THREADS caps BLAS parallelism when set before startup.
"""

import os

_threads = os.environ.get("TIDEDOWN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from pathlib import Path

from . import costmodel, evaluate, synth
from .fields import read_tcds, write_tcds
from .model import ModelConfig, predict_field
from .train import TrainConfig, load_checkpoint, train_model

TOP_KEYS = {"model", "train", "data", "out_dir"}
DATA_KEYS = {"lr_train", "hr_train", "lr_val", "hr_val"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_run_config(path) -> dict:
    """Parse and strictly validate a run-config JSON document."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be an object")
    _reject_unknown(doc, TOP_KEYS, "top level")
    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    data = dict(doc.get("data", {}))
    _reject_unknown(model, set(ModelConfig.__dataclass_fields__), '"model"')
    _reject_unknown(train, set(TrainConfig.__dataclass_fields__), '"train"')
    _reject_unknown(data, DATA_KEYS, '"data"')
    if isinstance(model.get("fms_ratio"), str):
        model["fms_ratio"] = costmodel.parse_ratio(model["fms_ratio"])
    return {"model": model, "train": train, "data": data,
            "out_dir": doc.get("out_dir")}


def _write_resolved(out_dir: Path, doc: dict, name: str = "config.resolved.json") -> None:
    with open(out_dir / name, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    spec = synth.SynthSpec(
        seed=args.seed, hr_height=args.hr_height, hr_width=args.hr_width,
        scale=args.scale, timesteps=args.timesteps,
        n_constituents=args.constituents,
        land_fraction_target=args.land_fraction, amplitude=args.amplitude)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lr, hr = synth.generate(spec)
    write_tcds(out / "lr_full.tcds", lr)
    write_tcds(out / "hr_full.tcds", hr)
    fractions = tuple(float(v) for v in args.splits.split(","))
    if len(fractions) != 3:
        raise ValueError(f"--splits needs three comma-separated fractions, got {args.splits!r}")
    names = ("train", "val", "test")
    for name, (lr_s, hr_s) in zip(names, synth.split_dataset(lr, hr, fractions)):
        write_tcds(out / f"lr_{name}.tcds", lr_s)
        write_tcds(out / f"hr_{name}.tcds", hr_s)
    _write_resolved(out, {
        "seed": spec.seed, "hr_height": spec.hr_height, "hr_width": spec.hr_width,
        "scale": spec.scale, "timesteps": spec.timesteps,
        "n_constituents": spec.n_constituents,
        "land_fraction_target": spec.land_fraction_target,
        "amplitude": spec.amplitude, "splits": list(fractions),
    }, name="synth.resolved.json")
    print(f"wrote {out}/lr_full.tcds ({lr.timesteps}x3x{lr.height}x{lr.width}) "
          f"and hr_full.tcds ({hr.timesteps}x3x{hr.height}x{hr.width}) + splits")
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    model_d, train_d, data = doc["model"], doc["train"], doc["data"]
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.epochs is not None:
        train_d["epochs"] = args.epochs
    if args.no_atm:
        train_d["atm_enabled"] = False
    if args.no_pe:
        model_d["pe_enabled"] = False
    if args.fms is not None:
        model_d["fms_ratio"] = costmodel.parse_ratio(args.fms)

    for key in ("lr_train", "hr_train"):
        if key not in data:
            raise ValueError(f'config "data" section needs {key!r}')
    lr_train = read_tcds(data["lr_train"])
    hr_train = read_tcds(data["hr_train"])
    model_d.setdefault("lr_height", lr_train.height)
    model_d.setdefault("lr_width", lr_train.width)
    if "atm_scale" not in model_d and hr_train.height % lr_train.height == 0:
        model_d["atm_scale"] = hr_train.height // lr_train.height
    model_cfg = ModelConfig.from_dict(model_d)
    train_cfg = TrainConfig.from_dict(train_d)

    val_pair = None
    if "lr_val" in data and "hr_val" in data:
        val_pair = (read_tcds(data["lr_val"]), read_tcds(data["hr_val"]))

    out_dir = Path(args.out or doc["out_dir"] or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved(out_dir, {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                              "data": data, "out_dir": str(out_dir)})
    result = train_model(model_cfg, train_cfg, (lr_train, hr_train), val_pair=val_pair,
                         log_path=out_dir / "train_log.csv",
                         ckpt_path=out_dir / "model.tckp")
    last = result.history["epochs"][-1]
    msg = f"trained {train_cfg.epochs} epochs; final loss_asm {last['loss_asm_mean']:.6f}"
    if last.get("mse_total") is not None:
        msg += f", val mse {last['mse_total']:.8f}"
    print(msg + f"; checkpoint {out_dir / 'model.tckp'}")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    field = read_tcds(args.input)
    pred = predict_field(ckpt.model, ckpt.stats, field, args.scale, chunk=args.chunk)
    write_tcds(args.out, pred)
    print(f"wrote {args.out} ({pred.timesteps}x3x{pred.height}x{pred.width}, "
          f"scale {args.scale:g})")
    return 0


def cmd_eval(args) -> int:
    pred = read_tcds(args.pred)
    gt = read_tcds(args.gt)
    rep = evaluate.evaluate_prediction(gt, pred, label=args.label, scale=args.scale)
    rows = [evaluate.EVAL_CSV_HEADER[:], rep.csv_row()]
    if args.out:
        evaluate.write_csv(args.out, rows)
    print(f"velocity mse {rep.velocity_mse:.8g} mae {rep.velocity_mae:.8g} | "
          f"level mse {rep.level_mse:.8g} mae {rep.level_mae:.8g} "
          f"({rep.n_sea_points} sea points)")
    return 0


def cmd_flops(args) -> int:
    if args.config:
        model_d = load_run_config(args.config)["model"]
        cfg = ModelConfig.from_dict(model_d)
    else:
        cfg = ModelConfig()
    ratios = [costmodel.parse_ratio(r) for r in args.ratios.split(",")]
    reports = costmodel.cost_table(cfg, ratios)
    print(format_grid_line(cfg))
    print(costmodel.format_cost_table(reports))
    by_label = {rep.label: rep for rep in reports}
    if "2:1" in by_label and "none" in by_label:
        red = costmodel.reduction_report(by_label["2:1"], by_label["none"])
        print(f"2:1 vs none: test {red['test_reduction_pct']:.1f}% lower, "
              f"train {red['train_reduction_pct']:.1f}% lower")
    if args.csv:
        evaluate.write_csv(args.csv, costmodel.cost_table_csv_rows(reports))
    return 0


def format_grid_line(cfg: ModelConfig) -> str:
    return (f"config: C={cfg.channels} B={cfg.n_blocks} LR {cfg.lr_height}x{cfg.lr_width} "
            f"r={cfg.atm_scale} mlp={cfg.n_mlp_hidden}")


def cmd_ablate(args) -> int:
    pair = (read_tcds(args.lr), read_tcds(args.hr))
    ckpts = {"baseline": args.ckpt_baseline, "+atm": args.ckpt_atm,
             "+atm+pe": args.ckpt_atm_pe, "+atm+pe+fms": args.ckpt_full}
    reports = evaluate.ablation_harness(pair, ckpts, scale=args.scale, chunk=args.chunk)
    rows = evaluate.ablation_csv_rows(reports)
    evaluate.write_csv(args.out, rows)
    for rep in reports:
        print(f"{rep.label:>12}: velocity mse {rep.velocity_mse:.8g}, "
              f"level mse {rep.level_mse:.8g}")
    print(f"wrote {args.out}")
    return 0


def cmd_tradeoff(args) -> int:
    pair = (read_tcds(args.lr), read_tcds(args.hr))
    ckpts = {}
    for item in args.ckpt:
        if "=" not in item:
            raise ValueError(f"--ckpt expects LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        ckpts[label] = path
    if not ckpts:
        raise ValueError("at least one --ckpt LABEL=PATH is required")
    rows = evaluate.fms_tradeoff_harness(pair, ckpts, scale=args.scale, chunk=args.chunk)
    evaluate.write_csv(args.out, evaluate.tradeoff_csv_rows(rows))
    for row in rows:
        rep = row["report"]
        print(f"{row['ratio']:>6}: {row['test_gflops']:.3f} GFLOPs, "
              f"velocity mse {rep.velocity_mse:.8g}, level mse {rep.level_mse:.8g}")
    print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    field = read_tcds(args.input)
    if args.compare:
        others = [read_tcds(p) for p in args.compare]
        evaluate.render_compare([field] + others, args.channel, args.t, args.out)
    else:
        evaluate.render_gray(field, args.channel, args.t, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tidedown", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic LR/HR dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--hr-height", type=int, default=300)
    sp.add_argument("--hr-width", type=int, default=288)
    sp.add_argument("--scale", type=int, default=6)
    sp.add_argument("--timesteps", type=int, default=64)
    sp.add_argument("--constituents", type=int, default=3)
    sp.add_argument("--land-fraction", type=float, default=0.3)
    sp.add_argument("--amplitude", type=float, default=1.0)
    sp.add_argument("--splits", default="0.75,0.125,0.125")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train from a run-config JSON")
    tp.add_argument("--config", required=True)
    tp.add_argument("--out", default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--epochs", type=int, default=None)
    tp.add_argument("--no-atm", action="store_true")
    tp.add_argument("--no-pe", action="store_true")
    tp.add_argument("--fms", default=None, help="'a:b' or 'none'")
    tp.set_defaults(func=cmd_train)

    ip = sub.add_parser("infer", help="downscale a field at any scale >= 1")
    ip.add_argument("--ckpt", required=True)
    ip.add_argument("--input", required=True)
    ip.add_argument("--scale", type=float, required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--chunk", type=int, default=65536)
    ip.set_defaults(func=cmd_infer)

    ep = sub.add_parser("eval", help="metrics of a prediction vs ground truth")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--gt", required=True)
    ep.add_argument("--out", default=None)
    ep.add_argument("--label", default="model")
    ep.add_argument("--scale", type=float, default=0.0)
    ep.set_defaults(func=cmd_eval)

    fp = sub.add_parser("flops", help="analytic per-component cost table")
    fp.add_argument("--config", default=None)
    fp.add_argument("--ratios", default="none,11:1,5:1,2:1")
    fp.add_argument("--csv", default=None)
    fp.set_defaults(func=cmd_flops)

    ap = sub.add_parser("ablate", help="four-variant comparison table")
    ap.add_argument("--lr", required=True)
    ap.add_argument("--hr", required=True)
    ap.add_argument("--scale", type=float, default=None)
    ap.add_argument("--ckpt-baseline", required=True)
    ap.add_argument("--ckpt-atm", required=True)
    ap.add_argument("--ckpt-atm-pe", required=True)
    ap.add_argument("--ckpt-full", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--chunk", type=int, default=65536)
    ap.set_defaults(func=cmd_ablate)

    wp = sub.add_parser("tradeoff", help="cost/quality table across split ratios")
    wp.add_argument("--lr", required=True)
    wp.add_argument("--hr", required=True)
    wp.add_argument("--scale", type=float, default=None)
    wp.add_argument("--ckpt", action="append", default=[],
                    help="LABEL=PATH, repeatable (e.g. 2:1=runs/fms21/model.tckp)")
    wp.add_argument("--out", required=True)
    wp.add_argument("--chunk", type=int, default=65536)
    wp.set_defaults(func=cmd_tradeoff)

    rp = sub.add_parser("render", help="grayscale PGM of one channel/timestep")
    rp.add_argument("--input", required=True)
    rp.add_argument("--channel", choices=["u", "v", "level"], default="level")
    rp.add_argument("--t", type=int, default=0)
    rp.add_argument("--out", required=True)
    rp.add_argument("--compare", nargs="*", default=None,
                    help="additional .tcds files tiled after the input")
    rp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
