"""Exact parameter and MAC accounting, plus growth percentages.

Counts are exact integers; percentages are exact rationals rounded
half-up to two decimals only for display.  FLOPs are counted as MACs
(1 MAC = 1 FLOP unit); conventions differing by 2x exist, so reports
state the unit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

from .errors import ConfigurationError, ContractViolationError


@dataclass
class LayerCost:
    name: str
    params: int  # weights + bias
    macs: int  # multiply-accumulates (weights only)
    bias_adds: int = 0


@dataclass
class CostReport:
    base_layers: list[LayerCost] = field(default_factory=list)
    adapter_layers: list[LayerCost] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def base_params(self) -> int:
        return sum(c.params for c in self.base_layers)

    @property
    def base_macs(self) -> int:
        return sum(c.macs for c in self.base_layers)

    @property
    def adapter_params(self) -> int:
        return sum(c.params for c in self.adapter_layers)

    @property
    def adapter_macs(self) -> int:
        return sum(c.macs for c in self.adapter_layers)

    def growth_pct_params(self) -> Fraction:
        if self.base_params == 0:
            raise ContractViolationError("growth: base parameter count is zero")
        return Fraction(100 * self.adapter_params, self.base_params)

    def growth_pct_macs(self) -> Fraction:
        if self.base_macs == 0:
            raise ContractViolationError("growth: base MAC count is zero")
        return Fraction(100 * self.adapter_macs, self.base_macs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["section", "layer", "params", "macs"])
        for c in self.base_layers:
            w.writerow(["base", c.name, c.params, c.macs])
        for c in self.adapter_layers:
            w.writerow(["adapter", c.name, c.params, c.macs])
        w.writerow(["total", "base", self.base_params, self.base_macs])
        w.writerow(["total", "adapter", self.adapter_params, self.adapter_macs])
        w.writerow(
            [
                "growth_pct",
                "",
                round_half_up(self.growth_pct_params()),
                round_half_up(self.growth_pct_macs()),
            ]
        )
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'layer':<28}{'params':>12}{'MACs':>16}"]
        for c in self.base_layers:
            lines.append(f"{c.name:<28}{c.params:>12}{c.macs:>16}")
        lines.append(f"{'base total':<28}{self.base_params:>12}{self.base_macs:>16}")
        for c in self.adapter_layers:
            lines.append(f"{'+ ' + c.name:<28}{c.params:>12}{c.macs:>16}")
        lines.append(
            f"{'adapter total (per task)':<28}{self.adapter_params:>12}{self.adapter_macs:>16}"
        )
        lines.append(
            f"growth per task: {round_half_up(self.growth_pct_params())}% params, "
            f"{round_half_up(self.growth_pct_macs())}% MACs (1 MAC = 1 FLOP unit)"
        )
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def round_half_up(x, places: int = 2) -> Decimal:
    if isinstance(x, Fraction):
        d = Decimal(x.numerator) / Decimal(x.denominator)
    else:
        d = Decimal(str(x))
    return d.quantize(Decimal(10) ** -places, rounding=ROUND_HALF_UP)


def conv_cost(
    c_in: int,
    c_out: int,
    kh: int,
    kw: int,
    group_size: int,
    h_out: int,
    w_out: int,
    bias: bool = True,
    name: str = "conv",
) -> LayerCost:
    """group_size = input channels each filter spans (c_in for a standard
    conv); weights = kh*kw*group_size*c_out."""
    if group_size < 1 or c_in % group_size:
        raise ConfigurationError(f"conv_cost: group size {group_size} must divide c_in={c_in}")
    weights = kh * kw * group_size * c_out
    params = weights + (c_out if bias else 0)
    macs = weights * h_out * w_out
    return LayerCost(name, params, macs, bias_adds=(c_out * h_out * w_out if bias else 0))


def dense_cost(f_in: int, f_out: int, bias: bool = True, name: str = "dense") -> LayerCost:
    weights = f_in * f_out
    return LayerCost(name, weights + (f_out if bias else 0), weights, bias_adds=f_out if bias else 0)


@dataclass
class GrowthResult:
    pct_params: Decimal
    pct_flops: Decimal
    exact_params: Fraction
    exact_flops: Fraction


def growth(base: tuple[float, float], adapted: tuple[float, float]) -> GrowthResult:
    """Percentage growth of (params, flops) totals, exact before rounding."""
    bp, bf = (Fraction(Decimal(str(v))) for v in base)
    ap, af = (Fraction(Decimal(str(v))) for v in adapted)
    if bp <= 0 or bf <= 0:
        raise ContractViolationError("growth: base totals must be positive")
    ep = 100 * (ap - bp) / bp
    ef = 100 * (af - bf) / bf
    return GrowthResult(round_half_up(ep), round_half_up(ef), ep, ef)


def model_cost(gspec, adapter_cfg) -> CostReport:
    """Cost of the generator defined by `gspec` plus per-task adapter cost
    under `adapter_cfg`.  Imported lazily to keep costing free of engine
    dependencies elsewhere."""
    from .gan import generator_layout

    report = CostReport()
    report.base_layers.append(
        LayerCost("embed", gspec.num_classes * gspec.embed_dim, 0)
    )
    for entry in generator_layout(gspec):
        kind = entry["kind"]
        if kind == "dense":
            report.base_layers.append(dense_cost(entry["f_in"], entry["f_out"], name=entry["name"]))
            continue
        c_in, c_out, hw = entry["c_in"], entry["c_out"], entry["hw"]
        kh = entry["k"]
        report.base_layers.append(
            conv_cost(c_in, c_out, kh, kh, c_in, hw, hw, bias=entry["bias"], name=entry["name"])
        )
        if entry.get("instrumented"):
            cfg = adapter_cfg.for_layer(entry["name"])
            c = c_out
            report.adapter_layers.append(
                conv_cost(c, c, 3, 3, cfg.k, hw, hw, name=f"{entry['name']}/phi_g")
            )
            if cfg.beta == 1 or cfg.mode == "sequential":
                report.adapter_layers.append(
                    conv_cost(c, c, 1, 1, cfg.z, hw, hw, name=f"{entry['name']}/phi_p")
                )
            if cfg.residual_bias and entry.get("prev2_channels") is not None:
                report.adapter_layers.append(
                    conv_cost(c, c, 3, 3, cfg.k, hw, hw, name=f"{entry['name']}/phi_r")
                )
    report.notes.append("FLOPs counted as MACs; bias/activation/normalization ops excluded")
    return report
