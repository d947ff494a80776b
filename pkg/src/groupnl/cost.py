"""Closed-form parameter, FLOP and gradient accounting, plus data-parallel communication volume.

FLOP convention:

* convolutions and linear layers: one multiply-accumulate per FLOP, bias adds free;
* batch norm: one op per output element;
* NLFs: one op per transformed element;
* spatial size is the conv's *output* size.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

from .errors import InvalidSpec
from .layers import LayerKind, LayerSpec


@dataclass(frozen=True)
class CostTerm:
    name: str
    params: int = 0
    flops: int = 0


@dataclass(frozen=True)
class CostReport:
    params: int
    flops: int
    grads: int
    ops_modules: int
    breakdown: tuple = field(default_factory=tuple)
    label: str = ""

    @classmethod
    def from_terms(cls, terms, ops_modules, label=""):
        terms = tuple(t for t in terms if t.params or t.flops)
        p = sum(t.params for t in terms)
        f = sum(t.flops for t in terms)
        return cls(p, f, p, ops_modules, terms, label)

    def to_dict(self):
        return {
            "schema": "cost_report/v1",
            "label": self.label,
            "params": self.params,
            "flops": self.flops,
            "grads": self.grads,
            "ops_modules": self.ops_modules,
            "breakdown": [asdict(t) for t in self.breakdown],
        }


class CommMode(str, enum.Enum):
    DP = "DP"
    DDP = "DDP"

    @classmethod
    def parse(cls, value):
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InvalidSpec(f"unknown communication mode {value!r}", field="mode") from None


@dataclass(frozen=True)
class CommReport:
    mode: CommMode
    n_gpus: int
    grads: float
    per_gpu: float
    total: float
    other_gpu: float

    def to_dict(self):
        return {
            "schema": "comm_report/v1",
            "mode": self.mode.value,
            "n_gpus": self.n_gpus,
            "grads": self.grads,
            "per_gpu": self.per_gpu,
            "other_gpu": self.other_gpu,
            "total": self.total,
        }


def _conv_macs(hw, c_out, c_in_per_group, k):
    return hw * c_out * c_in_per_group * k * k


def layer_cost(spec, in_hw, bias=None):
    """Analytic cost of one conv-variant layer on an ``in_hw`` input.

    ``bias`` overrides the spec's bias flag when not None.
    """
    if not isinstance(spec, LayerSpec):
        raise InvalidSpec("expected a LayerSpec")
    with_bias = spec.geom.bias if bias is None else bool(bias)
    cg = spec.conv_geom
    ho, wo = cg.out_hw(*in_hw)
    hw = ho * wo
    cin_g = cg.c_in // cg.groups
    kind = spec.kind
    terms = []
    if kind is LayerKind.Mono:
        terms.append(CostTerm("seed_conv", spec.c_seed * cin_g * cg.k**2, _conv_macs(hw, cg.c_out, cin_g, cg.k)))
        terms.append(CostTerm("nlf", 0, spec.c_gen * cin_g * cg.k**2))
        terms.append(CostTerm("bias", cg.c_out if with_bias else 0, 0))
        return CostReport.from_terms(terms, 1, kind.value)

    terms.append(CostTerm("seed_conv", cg.c_out * cin_g * cg.k**2, _conv_macs(hw, cg.c_out, cin_g, cg.k)))
    bias_params = cg.c_out if with_bias else 0
    ops = 1
    cs, gm = spec.c_seed, spec.gamma
    if kind.is_groupnl and gm:
        terms.append(CostTerm("nlf", 0, spec.c_gen * hw))
    elif kind is LayerKind.Ghost and gm:
        ch = spec.cheap_geom
        terms.append(CostTerm("cheap_conv", ch.c_out * spec.d**2, _conv_macs(hw, ch.c_out, 1, spec.d)))
        bias_params += ch.c_out if with_bias else 0
        ops = 2
    elif kind is LayerKind.SineFM and gm:
        ch = spec.cheap_geom
        expanded = spec.t * cs
        terms.append(CostTerm("nlf", 0, expanded * hw))
        terms.append(CostTerm("bn", 2 * expanded, expanded * hw))
        terms.append(CostTerm("cheap_conv", ch.c_out * spec.t, _conv_macs(hw, ch.c_out, spec.t, 1)))
        bias_params += ch.c_out if with_bias else 0
        ops = 2 + spec.t
    terms.append(CostTerm("bias", bias_params, 0))
    return CostReport.from_terms(terms, ops, kind.value)


def bn_cost(channels, hw):
    return CostTerm("bn", 2 * channels, channels * hw)


def linear_cost(in_features, out_features, bias=True):
    return CostTerm("linear", in_features * out_features + (out_features if bias else 0), in_features * out_features)


def sum_reports(reports, label=""):
    terms = {}
    ops = 0
    for r in reports:
        ops += r.ops_modules
        for t in r.breakdown:
            p, f = terms.get(t.name, (0, 0))
            terms[t.name] = (p + t.params, f + t.flops)
    return CostReport.from_terms([CostTerm(n, p, f) for n, (p, f) in terms.items()], ops, label)


def comm_cost(grads, n_gpus, mode):
    """Per-iteration gradient traffic for N-GPU DP (scatter through a main GPU) or DDP (ring all-reduce)."""
    mode = CommMode.parse(mode)
    if isinstance(n_gpus, bool) or int(n_gpus) != n_gpus or n_gpus < 1:
        raise InvalidSpec(f"n_gpus must be a positive integer, got {n_gpus!r}", field="gpus")
    if grads < 0:
        raise InvalidSpec(f"gradient count must be non-negative, got {grads!r}", field="grads")
    n = int(n_gpus)
    total = 2 * (n - 1) * grads
    if mode is CommMode.DP:
        per_gpu = (n - 1) * grads
        other = grads if n > 1 else 0
    else:
        per_gpu = 2 * (n - 1) / n * grads
        other = per_gpu
    return CommReport(mode, n, grads, per_gpu, total, other)


def nlf_diversity(c_seed, c_out, g):
    """Number of distinct NLF instances in a GroupNL layer (gamma * g)."""
    if c_seed < 1 or g < 1 or c_seed % g:
        raise InvalidSpec(f"c_seed={c_seed} must be a positive multiple of g={g}")
    return (math.ceil(c_out / c_seed) - 1) * g


# -- rendering ----------------------------------------------------------------------


def fmt_count(x, unit=None):
    if unit is None:
        unit = "M" if abs(x) >= 1e6 else "K" if abs(x) >= 1e3 else ""
    scale = {"": 1, "K": 1e3, "M": 1e6, "G": 1e9}[unit]
    return f"{x / scale:.2f}{unit}"


def render_table(rows, columns):
    """Aligned plain-text table from a list of dicts."""
    cells = [[str(c) for c in columns]] + [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_rows(report):
    rows = [
        {"term": t.name, "params": t.params, "flops": t.flops, "flops_M": f"{t.flops / 1e6:.2f}"}
        for t in report.breakdown
    ]
    rows.append(
        {"term": "TOTAL", "params": report.params, "flops": report.flops, "flops_M": f"{report.flops / 1e6:.2f}"}
    )
    return rows


def to_json(obj):
    return json.dumps(obj.to_dict(), indent=2)
