"""Wall-clock micro-benchmarks for single layers and whole models.

Latencies are measured with ``time.perf_counter_ns`` around eval-mode
forwards, after untimed warmup iterations.  Absolute numbers are host
artifacts; comparisons between variants on the same host are what matter.
"""
from __future__ import annotations

import os
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .cost import layer_cost, render_table
from .errors import BuildFailure, GroupNLError, InvalidSpec
from .layers import LayerKind, LayerSpec, build_layer
from .tensor import DTYPE, ConvGeometry
from .zoo import ModelSpec, instantiate, model_cost

# Module-level profiling scenario: 512 -> 512 channels, 3x3 kernel, stride 2, 32x32 input.
PROFILE_GEOM = ConvGeometry(512, 512, 3, stride=2, padding=1, bias=True)
PROFILE_INPUT = (1, 512, 32, 32)

BENCH_VARIANTS = {
    "vanilla": LayerKind.Vanilla,
    "depthwise": LayerKind.Depthwise,
    "mono": LayerKind.Mono,
    "ghost": LayerKind.Ghost,
    "sinefm": LayerKind.SineFM,
    "groupnl": LayerKind.GroupNLStd,
    "groupnl_sparse": LayerKind.GroupNLSparse,
}


@dataclass(frozen=True)
class BenchConfig:
    target: object
    input_shape: tuple
    warmup: int = 10
    iters: int = 100
    threads: int | None = None
    seed: int = 0
    fresh_inputs: bool = False
    label: str = ""

    def __post_init__(self):
        if self.iters < 1:
            raise InvalidSpec(f"iters must be >= 1, got {self.iters}", field="iters")
        if self.warmup < 0:
            raise InvalidSpec(f"warmup must be >= 0, got {self.warmup}", field="warmup")
        if self.threads is not None and self.threads < 1:
            raise InvalidSpec(f"threads must be >= 1, got {self.threads}", field="threads")

    def inputs(self):
        """Deterministic input stream: one tensor, or one per timed and warmup iteration."""
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0xBE]))
        count = self.warmup + self.iters if self.fresh_inputs else 1
        for _ in range(count):
            yield rng.standard_normal(self.input_shape).astype(DTYPE)


@dataclass(frozen=True)
class BenchReport:
    label: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    samples: int
    params: int
    flops: int
    config: dict = field(default_factory=dict)
    host: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["schema"] = "bench_report/v1"
        return d


def host_info():
    blas = [
        {"api": i.get("internal_api"), "threads": i.get("num_threads"), "version": i.get("version")}
        for i in threadpool_info()
    ]
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
        "blas": blas,
    }


def _describe(target):
    if isinstance(target, LayerSpec):
        return target.kind.value, target.to_dict()
    return f"{target.name}/{target.variant}", {"arch": target.name, "variant": target.variant, "r": target.r}


def _build(target):
    try:
        if isinstance(target, LayerSpec):
            return build_layer(target)
        if isinstance(target, ModelSpec):
            return instantiate(target)
    except GroupNLError as e:
        raise BuildFailure(f"could not build benchmark target: {e}") from e
    raise BuildFailure(f"unsupported benchmark target {type(target).__name__}")


def _cost(target, input_shape):
    if isinstance(target, LayerSpec):
        return layer_cost(target, input_shape[2:])
    return model_cost(target, input_shape[1:])


def _report(cfg, times):
    times = np.asarray(times)
    mean = float(times.mean())
    label, echo = _describe(cfg.target)
    cost = _cost(cfg.target, cfg.input_shape)
    config = {
        "target": echo,
        "input_shape": list(cfg.input_shape),
        "warmup": cfg.warmup,
        "iters": cfg.iters,
        "threads": cfg.threads,
        "seed": cfg.seed,
        "fresh_inputs": cfg.fresh_inputs,
    }
    return BenchReport(
        label=cfg.label or label,
        mean_ms=mean,
        median_ms=float(np.median(times)),
        p95_ms=float(np.percentile(times, 95)),
        fps=1000.0 * cfg.input_shape[0] / mean,
        samples=len(times),
        params=cost.params,
        flops=cost.flops,
        config=config,
        host=host_info(),
    )


def _timed(module, x):
    t0 = time.perf_counter_ns()
    module(x)
    return (time.perf_counter_ns() - t0) / 1e6


def profile(cfg):
    """Time ``cfg.iters`` forwards of the target after ``cfg.warmup`` untimed ones."""
    module = _build(cfg.target)
    stream = list(cfg.inputs())
    times = []
    with threadpool_limits(limits=cfg.threads):
        for i in range(cfg.warmup + cfg.iters):
            dt = _timed(module, stream[i] if cfg.fresh_inputs else stream[0])
            if i >= cfg.warmup:
                times.append(dt)
    return _report(cfg, times)


def profile_interleaved(cfgs):
    """Profile several configs round-robin so background load hits every target alike.

    All configs must share warmup/iters/threads; each target still sees its own input stream.
    """
    if not cfgs:
        return []
    first = cfgs[0]
    if any((c.warmup, c.iters, c.threads) != (first.warmup, first.iters, first.threads) for c in cfgs):
        raise InvalidSpec("interleaved configs must share warmup, iters and threads", field="iters")
    modules = [_build(c.target) for c in cfgs]
    streams = [list(c.inputs()) for c in cfgs]
    times = [[] for _ in cfgs]
    with threadpool_limits(limits=first.threads):
        for i in range(first.warmup + first.iters):
            for j, (cfg, module, stream) in enumerate(zip(cfgs, modules, streams)):
                dt = _timed(module, stream[i] if cfg.fresh_inputs else stream[0])
                if i >= first.warmup:
                    times[j].append(dt)
    return [_report(c, t) for c, t in zip(cfgs, times)]


def profile_spec(variant, r=2, g=4, seed=0):
    """LayerSpec for one row of the module-level profiling scenario."""
    key = str(variant).lower()
    if key not in BENCH_VARIANTS:
        raise InvalidSpec(f"unknown variant {variant!r}; known: {', '.join(BENCH_VARIANTS)}", field="variant")
    return LayerSpec(BENCH_VARIANTS[key], PROFILE_GEOM, r=r, g=g, seed=seed)


def profile_config(variant, r=2, g=4, warmup=10, iters=100, threads=None, seed=0):
    label = variant if variant in ("vanilla", "depthwise") else f"{variant} r={r}"
    return BenchConfig(profile_spec(variant, r, g, seed), PROFILE_INPUT, warmup, iters, threads, seed, label=label)


def compare(variants, r=2, warmup=10, iters=100, threads=None, seed=0):
    """Profile several variants of the module-level scenario on identical inputs, interleaved."""
    return profile_interleaved(
        [profile_config(v, r, warmup=warmup, iters=iters, threads=threads, seed=seed) for v in variants]
    )


def bench_rows(reports):
    """Rows in module-profiling column order: module, params, FLOPs, average time, FPS."""
    return [
        {
            "Module": rep.label,
            "Params": f"{rep.params / 1e6:.3f}M" if rep.params >= 1e5 else f"{rep.params / 1e3:.2f}K",
            "FLOPs(M)": f"{rep.flops / 1e6:.2f}",
            "Avg.Times(ms)": f"{rep.mean_ms:.2f}",
            "p95(ms)": f"{rep.p95_ms:.2f}",
            "FPS": f"{rep.fps:.2f}",
        }
        for rep in reports
    ]


def render_bench(reports):
    rows = bench_rows(reports)
    return render_table(rows, list(rows[0]) if rows else ["Module"])
