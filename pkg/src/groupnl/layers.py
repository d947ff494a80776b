"""Convolution layer variants: Vanilla, Depthwise, Mono, Ghost, SineFM and GroupNL.

Every variant is expressed once, as a graph over :mod:`groupnl.autodiff`
primitives, so the same code serves inference (under ``no_grad``) and
training.  Channel bookkeeping shared by the generative variants:

* ``c_seed = ceil(c_out / r)`` channels come from a trainable seed conv;
* ``gamma = ceil(c_out / c_seed) - 1`` copies of the seed maps are generated;
* generated channels beyond ``c_out - c_seed`` are dropped.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import InvalidSpec, ShapeMismatch
from .nlf import NlfKind, NlfSpec, broadcast_params, nlf_eval, sample_hyperset
from .tensor import DTYPE, ConvGeometry, check_nchw


class LayerKind(str, enum.Enum):
    Vanilla = "Vanilla"
    Depthwise = "Depthwise"
    Mono = "Mono"
    Ghost = "Ghost"
    SineFM = "SineFM"
    GroupNLStd = "GroupNLStd"
    GroupNLSparse = "GroupNLSparse"

    @classmethod
    def parse(cls, value, field="kind"):
        if isinstance(value, cls):
            return value
        aliases = {
            "groupnl": cls.GroupNLStd,
            "groupnl_std": cls.GroupNLStd,
            "groupnl_sparse": cls.GroupNLSparse,
            "sparse": cls.GroupNLSparse,
            "conv": cls.Vanilla,
            "dw": cls.Depthwise,
        }
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise InvalidSpec(f"unknown layer kind {value!r}", field=field)

    @property
    def generative(self):
        return self in GENERATIVE

    @property
    def is_groupnl(self):
        return self in (LayerKind.GroupNLStd, LayerKind.GroupNLSparse)


GENERATIVE = frozenset(
    {LayerKind.Mono, LayerKind.Ghost, LayerKind.SineFM, LayerKind.GroupNLStd, LayerKind.GroupNLSparse}
)


def _posint(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise InvalidSpec(f"expected a positive integer, got {value!r}", field=name)
    return int(value)


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    geom: ConvGeometry
    r: int = 2
    g: int = 4
    t: int = 5
    d: int = 3
    nlf: NlfSpec | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind.parse(self.kind))
        if self.nlf is None:
            kind = NlfKind.Monomial if self.kind is LayerKind.Mono else NlfKind.Sinusoidal
            object.__setattr__(self, "nlf", NlfSpec(kind))
        self.validate()

    # derived quantities

    @property
    def c_seed(self):
        if not self.kind.generative:
            return self.geom.c_out
        return math.ceil(self.geom.c_out / self.r)

    @property
    def gamma(self):
        return math.ceil(self.geom.c_out / self.c_seed) - 1

    @property
    def c_gen(self):
        return self.geom.c_out - self.c_seed

    @property
    def xi(self):
        return math.gcd(self.geom.c_in, self.c_seed) if self.kind is LayerKind.GroupNLSparse else 1

    @property
    def slots(self):
        """Number of distinct NLF instances the layer carries."""
        if self.kind in (LayerKind.GroupNLStd, LayerKind.GroupNLSparse, LayerKind.Mono):
            return self.gamma * self.g
        if self.kind is LayerKind.SineFM:
            return self.t
        return 0

    @property
    def conv_geom(self):
        """Geometry of the seed conv (or the only conv, for Vanilla/Depthwise/Mono)."""
        gm = self.geom
        if self.kind is LayerKind.Depthwise:
            return replace(gm, groups=gm.c_in)
        if self.kind in (LayerKind.Vanilla, LayerKind.Mono):
            return gm
        return replace(gm, c_out=self.c_seed, groups=self.xi)

    @property
    def cheap_geom(self):
        """Ghost's d x d depthwise-multiplier conv, or SineFM's grouped 1x1 aligner."""
        cs, gm = self.c_seed, self.gamma
        if gm == 0:
            return None
        if self.kind is LayerKind.Ghost:
            return ConvGeometry(cs, gm * cs, self.d, 1, self.d // 2, cs, self.geom.bias)
        if self.kind is LayerKind.SineFM:
            return ConvGeometry(self.t * cs, gm * cs, 1, 1, 0, cs, self.geom.bias)
        return None

    def validate(self):
        gm = self.geom
        for name in ("r", "g", "t", "d"):
            _posint(getattr(self, name), name)
        if self.kind is LayerKind.Depthwise and gm.c_out % gm.c_in:
            raise InvalidSpec(f"depthwise needs c_out ({gm.c_out}) to be a multiple of c_in ({gm.c_in})", "geom.c_out")
        if not self.kind.generative:
            return
        if gm.groups != 1:
            raise InvalidSpec(f"{self.kind.value} seed conv takes groups=1, got {gm.groups}", "geom.groups")
        if self.kind in (LayerKind.GroupNLStd, LayerKind.GroupNLSparse, LayerKind.Mono) and self.c_seed % self.g:
            raise InvalidSpec(f"c_seed={self.c_seed} is not divisible by g={self.g}", "g")
        if self.kind is LayerKind.Ghost and self.d % 2 == 0:
            raise InvalidSpec(f"cheap kernel size d must be odd to preserve spatial size, got {self.d}", "d")
        if self.kind is LayerKind.Mono and self.nlf.kind is not NlfKind.Monomial:
            raise InvalidSpec("Mono layers generate filters with the Monomial NLF", "nlf.kind")

    # serialisation

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "geom": self.geom.to_dict(),
            "r": self.r,
            "g": self.g,
            "t": self.t,
            "d": self.d,
            "nlf": self.nlf.to_dict(),
            "seed": self.seed,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise InvalidSpec("expected a JSON object", field="$")
        unknown = set(d) - {"kind", "geom", "r", "g", "t", "d", "nlf", "seed", "schema_version"}
        if unknown:
            raise InvalidSpec(f"unknown keys {sorted(unknown)}", field="$")
        if "kind" not in d:
            raise InvalidSpec("missing required field", field="kind")
        if "geom" not in d or not isinstance(d["geom"], dict):
            raise InvalidSpec("missing or non-object geometry", field="geom")
        gd = d["geom"]
        unknown = set(gd) - {"c_in", "c_out", "k", "stride", "padding", "groups", "bias"}
        if unknown:
            raise InvalidSpec(f"unknown keys {sorted(unknown)}", field="geom")
        for req in ("c_in", "c_out", "k"):
            if req not in gd:
                raise InvalidSpec("missing required field", field=f"geom.{req}")
        vals = {}
        for name, default in (("c_in", None), ("c_out", None), ("k", None), ("stride", 1), ("groups", 1)):
            vals[name] = _posint(gd.get(name, default), f"geom.{name}")
        pad = gd.get("padding", 0)
        if isinstance(pad, bool) or not isinstance(pad, int) or pad < 0:
            raise InvalidSpec(f"expected a non-negative integer, got {pad!r}", field="geom.padding")
        bias = gd.get("bias", True)
        if not isinstance(bias, bool):
            raise InvalidSpec(f"expected a boolean, got {bias!r}", field="geom.bias")
        try:
            geom = ConvGeometry(padding=pad, bias=bias, **vals)
        except ValueError as e:
            raise InvalidSpec(str(e), field="geom") from None
        kw = {}
        for name in ("r", "g", "t", "d"):
            if name in d:
                kw[name] = _posint(d[name], name)
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise InvalidSpec(f"expected a non-negative integer, got {seed!r}", field="seed")
        nlf = NlfSpec.from_dict(d["nlf"]) if "nlf" in d else None
        return cls(kind=LayerKind.parse(d["kind"]), geom=geom, nlf=nlf, seed=seed, **kw)

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidSpec(f"invalid JSON ({e.msg} at line {e.lineno} col {e.colno})", field="$") from None
        return cls.from_dict(d)


# -- built layers -----------------------------------------------------------------


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bias_init(rng, n, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n).astype(dtype)


@dataclass(eq=False)
class Layer:
    spec: LayerSpec
    seed_weight: ad.Parameter
    seed_bias: ad.Parameter | None = None
    hypers: object = None
    cheap_weight: ad.Parameter | None = None
    cheap_bias: ad.Parameter | None = None
    bns: list = field(default_factory=list)
    # per-(h, w, dtype) hyperparameter planes for the fused inference path
    expanded: dict = field(default_factory=dict, repr=False)

    def parameters(self):
        ps = [self.seed_weight, self.seed_bias, self.cheap_weight, self.cheap_bias]
        ps += [p for bn in self.bns for p in bn.parameters()]
        return [p for p in ps if p is not None]

    def trainable(self):
        return [p for p in self.parameters() if p.trainable]

    def graph(self, x, training=False):
        """Forward as an autodiff graph; ``x`` may be an ndarray or a Var."""
        x = ad.as_var(x)
        check_nchw(x.value, "input")
        if x.value.shape[1] != self.spec.geom.c_in:
            raise ShapeMismatch(f"input has {x.value.shape[1]} channels, layer expects {self.spec.geom.c_in}")
        return _GRAPHS[self.spec.kind](self, x, training)

    def __call__(self, x):
        with ad.no_grad():
            return self.graph(x).value

    def seed_conv(self, x):
        with ad.no_grad():
            return ad.conv2d(x, self.seed_weight, self.seed_bias, self.spec.conv_geom).value

    def astype(self, dtype):
        def cp(p):
            return None if p is None else ad.Parameter(p.value.astype(dtype), p.name, p.trainable)

        return Layer(
            self.spec,
            cp(self.seed_weight),
            cp(self.seed_bias),
            self.hypers,
            cp(self.cheap_weight),
            cp(self.cheap_bias),
            [bn.astype(dtype) for bn in self.bns],
        )


def build_layer(spec, init_seed=0, dtype=DTYPE):
    """Initialise a layer's trainable tensors and sample its frozen NLF hyperparameters."""
    if not isinstance(spec, LayerSpec):
        raise InvalidSpec("expected a LayerSpec")
    rng = np.random.default_rng(np.random.SeedSequence([int(init_seed), 0x6E4C]))
    cg = spec.conv_geom
    fan_in = (cg.c_in // cg.groups) * cg.k * cg.k
    w_shape = (spec.c_seed,) + cg.weight_shape[1:] if spec.kind is LayerKind.Mono else cg.weight_shape
    layer = Layer(spec, ad.Parameter(_kaiming_uniform(rng, w_shape, fan_in, dtype), "seed.weight"))
    if cg.bias:
        layer.seed_bias = ad.Parameter(_bias_init(rng, cg.c_out, fan_in, dtype), "seed.bias")
    if spec.slots:
        nl = spec.nlf
        layer.hypers = sample_hyperset(nl.kind, spec.slots, spec.seed, nl.effective_ranges, nl.laplace_abs)
    ch = spec.cheap_geom
    if ch is not None:
        cfan = (ch.c_in // ch.groups) * ch.k * ch.k
        layer.cheap_weight = ad.Parameter(_kaiming_uniform(rng, ch.weight_shape, cfan, dtype), "cheap.weight")
        if ch.bias:
            layer.cheap_bias = ad.Parameter(_bias_init(rng, ch.c_out, cfan, dtype), "cheap.bias")
    if spec.kind is LayerKind.SineFM and spec.gamma:
        layer.bns = [ad.BatchNorm(spec.c_seed, dtype=dtype, name=f"bn{i}") for i in range(spec.t)]
    return layer


# -- graphs -----------------------------------------------------------------------


def _grouped_copies(seed, spec):
    """Split into g groups, repeat each group gamma times, keep the first c_gen channels."""
    parts = ad.split(seed, spec.g)
    copies = ad.concat([ad.repeat(p, spec.gamma) for p in parts])
    if spec.gamma * spec.c_seed > spec.c_gen:
        copies = ad.channel_slice(copies, 0, spec.c_gen)
    return copies


def _slot_params(layer):
    spec = layer.spec
    return broadcast_params(layer.hypers, spec.c_seed // spec.g)[:, : spec.c_gen]


def _expanded_params(layer, h, w, dtype):
    """Slot hyperparameters spread to full (c_gen, h, w) planes, one per dimension; cached."""
    key = (h, w, np.dtype(dtype).str)
    planes = layer.expanded.get(key)
    if planes is None:
        p = _slot_params(layer)[0].astype(dtype)
        planes = tuple(np.ascontiguousarray(np.broadcast_to(p[..., i], (p.shape[0], h, w))) for i in range(p.shape[-1]))
        layer.expanded = {key: planes}
    return planes


def _groupnl_fused(layer, ys):
    """Inference-only assembly into one preallocated buffer; bitwise equal to the graph path."""
    spec, hs = layer.spec, layer.hypers
    n, cs, h, w = ys.shape
    g, gm, width = spec.g, spec.gamma, cs // spec.g
    out = np.empty((n, spec.geom.c_out, h, w), dtype=ys.dtype)
    out[:, :cs] = ys
    gen = out[:, cs:]
    planes = _expanded_params(layer, h, w, ys.dtype)
    if gm * cs == spec.c_gen:
        # no truncation: broadcast the seed groups straight into the (g, gamma, width) layout
        src = ys.reshape(n, g, 1, width, h, w)
        dst = gen.reshape(n, g, gm, width, h, w)
        planes = [p.reshape(g, gm, width, h, w) for p in planes]
    else:
        src = np.broadcast_to(ys.reshape(n, g, 1, width, h, w), (n, g, gm, width, h, w))
        src = src.reshape(n, g * gm * width, h, w)[:, : spec.c_gen]
        dst = gen
    if hs.kind is NlfKind.Sinusoidal:
        omega, phi = planes
        np.add(src, phi, out=dst)
        dst *= omega
        np.sin(dst, out=dst)
    else:
        dst[...] = nlf_eval(hs.kind, np.stack(planes, axis=-1), np.broadcast_to(src, dst.shape), hs.laplace_abs)
    return out


def _groupnl_graph(layer, x, training=False):
    spec = layer.spec
    ys = ad.conv2d(x, layer.seed_weight, layer.seed_bias, spec.conv_geom)
    if spec.gamma == 0:
        return ys
    if not ys.requires_grad:
        return ad.Var(_groupnl_fused(layer, ys.value))
    hs = layer.hypers
    gen = ad.nlf(_grouped_copies(ys, spec), hs.kind, _slot_params(layer), hs.laplace_abs)
    return ad.concat([ys, gen])


def _mono_graph(layer, x, training=False):
    spec = layer.spec
    w = layer.seed_weight
    if spec.gamma:
        cs, rest = w.value.shape[0], w.value.shape[1:]
        flat = ad.reshape(w, (1, cs, rest[0] * rest[1], rest[2]))
        hs = layer.hypers
        gen = ad.nlf(_grouped_copies(flat, spec), hs.kind, _slot_params(layer), hs.laplace_abs)
        w = ad.reshape(ad.concat([flat, gen]), (spec.geom.c_out,) + rest)
    return ad.conv2d(x, w, layer.seed_bias, spec.conv_geom)


def _ghost_graph(layer, x, training=False):
    spec = layer.spec
    ys = ad.conv2d(x, layer.seed_weight, layer.seed_bias, spec.conv_geom)
    if spec.gamma == 0:
        return ys
    gen = ad.conv2d(ys, layer.cheap_weight, layer.cheap_bias, spec.cheap_geom)
    if gen.value.shape[1] > spec.c_gen:
        gen = ad.channel_slice(gen, 0, spec.c_gen)
    return ad.concat([ys, gen])


def sinefm_interleave(t, c_seed):
    """Permutation taking branch-major [branch i][seed j] order to seed-major [seed j][branch i]."""
    return np.array([i * c_seed + j for j in range(c_seed) for i in range(t)])


def _sinefm_graph(layer, x, training=False):
    spec = layer.spec
    ys = ad.conv2d(x, layer.seed_weight, layer.seed_bias, spec.conv_geom)
    if spec.gamma == 0:
        return ys
    hs = layer.hypers
    branches = [ad.batch_norm(ad.nlf(ys, hs.kind, hs.slot(i), hs.laplace_abs), bn, training) for i, bn in enumerate(layer.bns)]
    expanded = ad.permute_channels(ad.concat(branches), sinefm_interleave(spec.t, spec.c_seed))
    gen = ad.conv2d(expanded, layer.cheap_weight, layer.cheap_bias, spec.cheap_geom)
    if gen.value.shape[1] > spec.c_gen:
        gen = ad.channel_slice(gen, 0, spec.c_gen)
    return ad.concat([ys, gen])


def _plain_graph(layer, x, training=False):
    return ad.conv2d(x, layer.seed_weight, layer.seed_bias, layer.spec.conv_geom)


_GRAPHS = {
    LayerKind.Vanilla: _plain_graph,
    LayerKind.Depthwise: _plain_graph,
    LayerKind.Mono: _mono_graph,
    LayerKind.Ghost: _ghost_graph,
    LayerKind.SineFM: _sinefm_graph,
    LayerKind.GroupNLStd: _groupnl_graph,
    LayerKind.GroupNLSparse: _groupnl_graph,
}


def _forward(expected, layer, x):
    if layer.spec.kind not in expected:
        raise InvalidSpec(f"{layer.spec.kind.value} layer passed to a forward for {sorted(k.value for k in expected)}")
    return layer(x)


def groupnl_forward(layer, x):
    return _forward({LayerKind.GroupNLStd, LayerKind.GroupNLSparse}, layer, x)


def ghost_forward(layer, x):
    return _forward({LayerKind.Ghost}, layer, x)


def sinefm_forward(layer, x):
    return _forward({LayerKind.SineFM}, layer, x)


def mono_forward(layer, x):
    return _forward({LayerKind.Mono}, layer, x)


def layer_forward(layer, x):
    return layer(x)
