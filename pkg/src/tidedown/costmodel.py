"""Analytic multiply-accumulate accounting for every network component.

Counting convention: 1 MAC = 1 FLOP; biases, activations, positional-
encoding adds, residual adds, and ensemble blends are excluded. Counts are
exact integers; division by 1e9 happens only at presentation time. The
substrate's `count_macs` debug counter uses the same convention, so
instrumented forward passes must match these numbers exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ENSEMBLE, ModelConfig

GIGA = 1e9


@dataclass(frozen=True)
class CostReport:
    """Per-component MAC counts for one configuration."""

    label: str
    fe_flops: int
    asm_flops: int
    atm_flops: int

    @property
    def test_total(self) -> int:
        return self.fe_flops + self.asm_flops

    @property
    def train_total(self) -> int:
        return self.test_total + self.atm_flops

    def as_giga(self) -> dict:
        return {
            "fe": self.fe_flops / GIGA,
            "asm": self.asm_flops / GIGA,
            "test": self.test_total / GIGA,
            "atm": self.atm_flops / GIGA,
            "train": self.train_total / GIGA,
        }


def flops_fe(cfg: ModelConfig, height: int | None = None, width: int | None = None) -> int:
    """Head + residual blocks + tail convolutions on the LR grid."""
    h = cfg.lr_height if height is None else height
    w = cfg.lr_width if width is None else width
    c = cfg.channels
    head = 9 * 3 * c * h * w
    blocks = cfg.n_blocks * 2 * 9 * c * c * h * w
    tail = 9 * c * c * h * w
    return head + blocks + tail


def flops_asm(cfg: ModelConfig, hr_pixels: int | None = None,
              ensemble: int = ENSEMBLE) -> int:
    """MLP cost of querying `hr_pixels` points with the local ensemble."""
    if hr_pixels is None:
        hr_pixels = (cfg.lr_height * cfg.atm_scale) * (cfg.lr_width * cfg.atm_scale)
    per_sample = 0
    for _, k, out_ch in cfg.branches():
        per_sample += (9 * k + 2) * k + (cfg.n_mlp_hidden - 1) * k * k + k * out_ch
    return per_sample * ensemble * hr_pixels


def flops_atm(cfg: ModelConfig, height: int | None = None, width: int | None = None) -> int:
    """Channel-amplifying conv + post-shuffle conv of the auxiliary head."""
    h = cfg.lr_height if height is None else height
    w = cfg.lr_width if width is None else width
    r = cfg.atm_scale
    total = 0
    for _, k, out_ch in cfg.branches():
        total += 9 * k * (k * r * r) * h * w
        total += 9 * k * out_ch * (h * r * w * r)
    return total


def cost_report(cfg: ModelConfig, label: str | None = None) -> CostReport:
    if label is None:
        label = ratio_label(cfg.fms_ratio)
    return CostReport(label=label, fe_flops=flops_fe(cfg),
                      asm_flops=flops_asm(cfg), atm_flops=flops_atm(cfg))


def reduction_report(a: CostReport, b: CostReport) -> dict:
    """Percentage cost reductions of report `a` relative to report `b`."""
    return {
        "test_reduction_pct": (1.0 - a.test_total / b.test_total) * 100.0,
        "train_reduction_pct": (1.0 - a.train_total / b.train_total) * 100.0,
    }


def ratio_label(ratio: tuple[int, int] | None) -> str:
    return "none" if ratio is None else f"{ratio[0]}:{ratio[1]}"


def parse_ratio(text: str) -> tuple[int, int] | None:
    text = text.strip().lower()
    if text in ("none", "null", ""):
        return None
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise ValueError(f"bad split ratio {text!r}; expected 'a:b' or 'none'") from None


def cost_table(cfg: ModelConfig, ratios) -> list[CostReport]:
    """One CostReport per split ratio, with all other hyperparameters shared."""
    reports = []
    for ratio in ratios:
        variant = ModelConfig(**{**cfg.to_dict(), "fms_ratio": ratio})
        reports.append(cost_report(variant))
    return reports


def format_cost_table(reports: list[CostReport]) -> str:
    header = f"{'FMS':>8} {'FE':>8} {'ASM':>8} {'Test':>8} {'+ATM':>8} {'Train':>8}   (GFLOPs)"
    lines = [header]
    for rep in reports:
        g = rep.as_giga()
        lines.append(f"{rep.label:>8} {g['fe']:>8.1f} {g['asm']:>8.1f} "
                     f"{g['test']:>8.1f} {g['atm']:>+8.1f} {g['train']:>8.1f}")
    return "\n".join(lines)


def cost_table_csv_rows(reports: list[CostReport]) -> list[list]:
    rows = [["fms", "fe_gflops", "asm_gflops", "test_gflops", "atm_gflops", "train_gflops"]]
    for rep in reports:
        g = rep.as_giga()
        rows.append([rep.label, f"{g['fe']:.3f}", f"{g['asm']:.3f}",
                     f"{g['test']:.3f}", f"{g['atm']:.3f}", f"{g['train']:.3f}"])
    return rows
