"""Self-verification suites: oracle equivalence, decomposition, freeze, gradients, counts.

The oracle rebuilds every variant from the tensor-core primitives alone
(``conv2d_direct``, ``channel_split``/``channel_repeat``/``channel_concat``,
``nlf_apply``) without touching the fast paths in :mod:`groupnl.layers`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cost import layer_cost, nlf_diversity
from .gradcheck import count_trainable, finite_diff_check
from .layers import LayerKind, LayerSpec, build_layer, sinefm_interleave
from .nlf import NlfKind, NlfSpec, nlf_apply
from .tensor import ConvGeometry, channel_concat, channel_repeat, channel_split, conv2d_direct

SUITES = ("oracle", "decomposition", "freeze", "gradcheck", "counts")


# -- random specs -------------------------------------------------------------------


def _divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def random_spec(rng, kind, max_c=32, max_hw=12, nlf_kind=None):
    """A legal random LayerSpec of ``kind`` plus a compatible input (h, w)."""
    kind = LayerKind.parse(kind)
    c_in = int(rng.integers(1, max_c + 1))
    if kind is LayerKind.Depthwise:
        c_out = c_in * int(rng.integers(1, max_c // c_in + 1))
    else:
        c_out = int(rng.integers(1, max_c + 1))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(max(0, math.ceil((k - max_hw) / 2)), k // 2 + 1))
    geom = ConvGeometry(c_in, c_out, k, stride, padding, 1, bool(rng.integers(0, 2)))
    r = int(rng.integers(1, 7))
    c_seed = math.ceil(c_out / r)
    g = int(rng.choice(_divisors(c_seed)))
    if nlf_kind is None:
        nlf_kind = NlfKind.Monomial if kind is LayerKind.Mono else NlfKind.Sinusoidal
    spec = LayerSpec(
        kind,
        geom,
        r=r,
        g=g,
        t=int(rng.integers(1, 6)),
        d=int(rng.choice([1, 3, 5])),
        nlf=NlfSpec(nlf_kind),
        seed=int(rng.integers(0, 2**31)),
    )
    lo = max(1, k - 2 * padding)
    h = int(rng.integers(lo, max_hw + 1))
    w = int(rng.integers(lo, max_hw + 1))
    return spec, (h, w)


# -- compositional oracle ---------------------------------------------------------------


def _generated(seed, spec, hypers):
    """Generated channels assembled slot by slot from primitives."""
    width = spec.c_seed // spec.g
    copies = channel_concat([channel_repeat(p, spec.gamma) for p in channel_split(seed, spec.g)])
    copies = copies[:, : spec.c_gen]
    blocks = []
    for j in range(hypers.slots):
        chunk = copies[:, j * width:(j + 1) * width]
        if chunk.shape[1]:
            blocks.append(nlf_apply(hypers.kind, hypers.slot(j), chunk, hypers.laplace_abs))
    return channel_concat(blocks)


def _bn_eval(x, bn):
    inv = (1.0 / np.sqrt(bn.running_var + bn.eps)).astype(x.dtype)
    xhat = (x - bn.running_mean[None, :, None, None]) * inv[None, :, None, None]
    return xhat * bn.gamma.value[None, :, None, None] + bn.beta.value[None, :, None, None]


def _val(p):
    return None if p is None else p.value


def oracle_forward(layer, x):
    """Eval-mode forward of ``layer`` rebuilt from tensor-core primitives."""
    spec = layer.spec
    kind = spec.kind
    if kind is LayerKind.Mono:
        w = layer.seed_weight.value
        if spec.gamma:
            cs, rest = w.shape[0], w.shape[1:]
            flat = w.reshape(1, cs, rest[0] * rest[1], rest[2])
            w = channel_concat([flat, _generated(flat, spec, layer.hypers)]).reshape((spec.geom.c_out,) + rest)
        return conv2d_direct(x, w, _val(layer.seed_bias), spec.geom)
    ys = conv2d_direct(x, layer.seed_weight.value, _val(layer.seed_bias), spec.conv_geom)
    if kind in (LayerKind.Vanilla, LayerKind.Depthwise) or spec.gamma == 0:
        return ys
    if kind.is_groupnl:
        gen = _generated(ys, spec, layer.hypers)
    elif kind is LayerKind.Ghost:
        gen = conv2d_direct(ys, layer.cheap_weight.value, _val(layer.cheap_bias), spec.cheap_geom)[:, : spec.c_gen]
    else:
        hs = layer.hypers
        branches = [_bn_eval(nlf_apply(hs.kind, hs.slot(i), ys, hs.laplace_abs), bn) for i, bn in enumerate(layer.bns)]
        expanded = channel_concat(branches)[:, sinefm_interleave(spec.t, spec.c_seed)]
        gen = conv2d_direct(expanded, layer.cheap_weight.value, _val(layer.cheap_bias), spec.cheap_geom)
        gen = gen[:, : spec.c_gen]
    return channel_concat([ys, gen])


# -- suites -------------------------------------------------------------------------


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    checked: int
    failures: int
    metric: float = 0.0
    detail: list = field(default_factory=list)

    def to_dict(self):
        return {
            "suite": self.suite,
            "passed": self.passed,
            "checked": self.checked,
            "failures": self.failures,
            "metric": self.metric,
            "detail": self.detail[:10],
        }


def _randomise_bn(layer, rng):
    for bn in layer.bns:
        c = bn.gamma.value.shape[0]
        bn.running_mean[...] = rng.normal(0, 0.3, c)
        bn.running_var[...] = rng.uniform(0.5, 2.0, c)
        bn.gamma.value[...] = rng.uniform(0.5, 1.5, c)
        bn.beta.value[...] = rng.normal(0, 0.3, c)


def suite_oracle(instances=200, seed=0, tol=1e-5, kinds=tuple(LayerKind)):
    """Fast forward vs compositional oracle on random small specs (f32, max abs)."""
    rng = np.random.default_rng(seed)
    worst, fails, detail, n = 0.0, 0, [], 0
    for kind in kinds:
        for _ in range(instances):
            spec, (h, w) = random_spec(rng, kind)
            layer = build_layer(spec, int(rng.integers(0, 2**31)))
            _randomise_bn(layer, rng)
            x = rng.uniform(-1, 1, (2, spec.geom.c_in, h, w)).astype(np.float32)
            err = float(np.max(np.abs(layer(x) - oracle_forward(layer, x))))
            worst = max(worst, err)
            n += 1
            if not err <= tol:
                fails += 1
                detail.append({"spec": spec.to_dict(), "max_abs": err})
    return SuiteResult("oracle", fails == 0, n, fails, worst, detail)


def decompose(y, seed_out, hypers, spec):
    """For every generated channel, the (group i, copy j, seed channel) triples that reproduce it bitwise."""
    width = spec.c_seed // spec.g
    matches = {}
    for m in range(spec.c_seed, spec.geom.c_out):
        found = []
        for i in range(spec.g):
            for j in range(spec.gamma):
                slot = i * spec.gamma + j
                for c in range(i * width, (i + 1) * width):
                    cand = nlf_apply(hypers.kind, hypers.slot(slot), seed_out[:, c:c + 1], hypers.laplace_abs)
                    if np.array_equal(cand, y[:, m:m + 1]):
                        found.append((i, j, c))
        matches[m] = found
    return matches


def suite_decomposition(instances=50, seed=0):
    """Exhaustive search: each generated GroupNL channel equals some slot NLF of some seed channel."""
    rng = np.random.default_rng(seed)
    fails, detail = 0, []
    for _ in range(instances):
        spec, (h, w) = random_spec(rng, (LayerKind.GroupNLStd, LayerKind.GroupNLSparse)[int(rng.integers(0, 2))], max_c=16, max_hw=6)
        layer = build_layer(spec, int(rng.integers(0, 2**31)))
        x = rng.standard_normal((1, spec.geom.c_in, h, w)).astype(np.float32)
        y = layer(x)
        ys = layer.seed_conv(x)
        ok = np.array_equal(y[:, : spec.c_seed], ys)
        matches = decompose(y, ys, layer.hypers, spec)
        ok = ok and all(matches.values())
        if not ok:
            fails += 1
            detail.append(spec.to_dict())
    return SuiteResult("decomposition", fails == 0, instances, fails, float(instances - fails), detail)


def suite_freeze(instances=20, seed=0):
    """Repeated eval forwards are bitwise identical and never touch the hyperparameters."""
    rng = np.random.default_rng(seed)
    fails, n = 0, 0
    for kind in (LayerKind.GroupNLStd, LayerKind.GroupNLSparse, LayerKind.Mono, LayerKind.SineFM, LayerKind.Ghost):
        for _ in range(instances):
            spec, (h, w) = random_spec(rng, kind, max_c=16, max_hw=8)
            layer = build_layer(spec, int(rng.integers(0, 2**31)))
            before = None if layer.hypers is None else layer.hypers.params.copy()
            x = rng.standard_normal((2, spec.geom.c_in, h, w)).astype(np.float32)
            a, b = layer(x), layer(x)
            # a training-mode backward must not produce hyperparameter gradients either
            grads = ad.backward(ad.total(layer.graph(x, training=False)))
            same = np.array_equal(a, b) and all(p.trainable for p in grads)
            if before is not None:
                same = same and np.array_equal(before, layer.hypers.params) and not layer.hypers.params.flags.writeable
            n += 1
            fails += not same
    return SuiteResult("freeze", fails == 0, n, fails)


def suite_gradcheck(instances=3, seed=0, eps=1e-5, tol=1e-5):
    """Central differences vs reverse mode for every variant on tiny f64 layers."""
    rng = np.random.default_rng(seed)
    worst, fails, n, detail = 0.0, 0, 0, []
    for kind in LayerKind:
        for _ in range(instances):
            spec, (h, w) = random_spec(rng, kind, max_c=6, max_hw=5)
            layer = build_layer(spec, int(rng.integers(0, 2**31)))
            _randomise_bn(layer, rng)
            if kind is LayerKind.Mono:
                # keep seed filters away from the monomial's non-smooth point at 0
                wv = layer.seed_weight.value
                wv[...] = np.sign(wv) * (0.2 + np.abs(wv))
            x = rng.standard_normal((2, spec.geom.c_in, h, w))
            err = finite_diff_check(layer, x, eps, seed=int(rng.integers(0, 2**31)))
            worst = max(worst, err)
            n += 1
            if not err < tol:
                fails += 1
                detail.append({"spec": spec.to_dict(), "rel_err": err})
    return SuiteResult("gradcheck", fails == 0, n, fails, worst, detail)


def suite_counts(instances=100, seed=0):
    """count_trainable equals the analytic parameter count, plus the diversity examples."""
    rng = np.random.default_rng(seed)
    fails, n, detail = 0, 0, []
    for kind in LayerKind:
        for _ in range(instances):
            spec, _ = random_spec(rng, kind, max_c=64)
            got, want = count_trainable(build_layer(spec)), layer_cost(spec, (8, 8)).params
            n += 1
            if got != want:
                fails += 1
                detail.append({"spec": spec.to_dict(), "trainable": got, "analytic": want})
    for args, want in (((4, 16, 2), 6), ((64, 256, 8), 24), ((64, 256, 64), 192), ((64, 64, 4), 0)):
        n += 1
        if nlf_diversity(*args) != want:
            fails += 1
            detail.append({"nlf_diversity": args, "got": nlf_diversity(*args), "want": want})
    return SuiteResult("counts", fails == 0, n, fails, 0.0, detail)


def run_suites(names=SUITES, instances=None, eps=1e-5, seed=0):
    runners = {
        "oracle": lambda: suite_oracle(instances or 200, seed),
        "decomposition": lambda: suite_decomposition(instances or 50, seed),
        "freeze": lambda: suite_freeze(instances or 20, seed),
        "gradcheck": lambda: suite_gradcheck(instances or 3, seed, eps),
        "counts": lambda: suite_counts(instances or 100, seed),
    }
    return [runners[n]() for n in names]

