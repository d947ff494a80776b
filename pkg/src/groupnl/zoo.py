"""Declarative CIFAR-style architectures and conv-variant substitution.

Architectures live as JSON files in ``groupnl/archs`` (schema_version 1).
Two families are understood:

``resnet``
    stem conv + BN + ReLU, stages of ``basic`` or ``bottleneck`` residual
    blocks, global average pool, linear head.
``plain``
    a VGG-style list of convs (ints, or ``{"out", "stride"}`` objects) and
    ``"M"`` max-pools, then global average pool and a linear head.

The ``substitute`` table of an arch decides which convs a non-vanilla variant
replaces.  Roles are ``stem``, ``block_kxk`` (k > 1 convs inside residual
blocks), ``block_1x1``, ``shortcut`` (projection convs), and ``all_convs``
for plain nets.  The shipped ResNet tables keep the stem and the bottleneck
1x1 convs vanilla and substitute everything else; BN layers and the classifier
always stay vanilla.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cost import CostReport, bn_cost, layer_cost, linear_cost, sum_reports
from .errors import InvalidSpec, ShapeMismatch, UnknownArch
from .layers import LayerKind, LayerSpec, build_layer
from .nlf import NlfSpec
from .tensor import DTYPE, ConvGeometry, check_nchw

SCHEMA_VERSION = 1

VARIANTS = {
    "vanilla": LayerKind.Vanilla,
    "mono": LayerKind.Mono,
    "ghost": LayerKind.Ghost,
    "sinefm": LayerKind.SineFM,
    "groupnl": None,  # resolved per arch: standard for basic blocks, sparse for bottlenecks
    "groupnl_std": LayerKind.GroupNLStd,
    "groupnl_sparse": LayerKind.GroupNLSparse,
}


@dataclass(frozen=True)
class ConvUnit:
    name: str
    layer: LayerSpec
    bn: bool = True
    relu: bool = True


@dataclass(frozen=True)
class Residual:
    name: str
    body: tuple
    shortcut: tuple = ()


@dataclass(frozen=True)
class MaxPool:
    name: str
    k: int = 2


@dataclass(frozen=True)
class ModelSpec:
    name: str
    variant: str
    input_shape: tuple
    num_classes: int
    nodes: tuple
    head_features: int
    r: int = 2
    g: int = 4
    nlf: NlfSpec = field(default_factory=NlfSpec)
    seed: int = 0

    def conv_units(self):
        for node in self.nodes:
            if isinstance(node, ConvUnit):
                yield node
            elif isinstance(node, Residual):
                yield from node.body
                yield from node.shortcut


def available_archs():
    return sorted(p.name[:-5] for p in resources.files("groupnl.archs").iterdir() if p.name.endswith(".json"))


def load_arch(name):
    """Arch config by id (shipped) or by path to a JSON file."""
    path = Path(str(name))
    if path.suffix == ".json" and path.exists():
        cfg = json.loads(path.read_text())
    else:
        res = resources.files("groupnl.archs") / f"{name}.json"
        if not res.is_file():
            raise UnknownArch(f"unknown architecture {name!r}; known: {', '.join(available_archs())}")
        cfg = json.loads(res.read_text())
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise InvalidSpec(f"unsupported arch schema_version {cfg.get('schema_version')!r}", field="schema_version")
    if cfg.get("family") not in ("resnet", "plain"):
        raise InvalidSpec(f"unknown family {cfg.get('family')!r}", field="family")
    return cfg


def _layer_seed(seed, idx):
    return int(np.random.SeedSequence([int(seed), idx]).generate_state(1)[0])


class _Builder:
    def __init__(self, cfg, variant, r, g, t, d, nlf, seed):
        if variant not in VARIANTS:
            raise InvalidSpec(f"unknown variant {variant!r}; known: {', '.join(VARIANTS)}", field="variant")
        kind = VARIANTS[variant]
        if variant == "groupnl":
            kind = LayerKind.parse(cfg.get("groupnl_kind", "GroupNLStd"), field="groupnl_kind")
        self.kind = kind
        self.policy = cfg.get("substitute", {})
        self.conv_bias = bool(cfg.get("conv_bias", False))
        self.r, self.g, self.t, self.d, self.nlf, self.seed = r, g, t, d, nlf, seed
        self.count = 0

    def conv(self, name, c_in, c_out, k, stride, padding, role, bn=True, relu=True):
        self.count += 1
        sub = self.kind is not LayerKind.Vanilla and (self.policy.get(role) or self.policy.get("all_convs"))
        kind = self.kind if sub else LayerKind.Vanilla
        geom = ConvGeometry(c_in, c_out, k, stride, padding, 1, True if sub else self.conv_bias)
        nlf = self.nlf if kind is not LayerKind.Mono else None
        try:
            spec = LayerSpec(kind, geom, self.r, self.g, self.t, self.d, nlf, _layer_seed(self.seed, self.count))
        except InvalidSpec as e:
            raise InvalidSpec(f"cannot substitute {name}: {e}", field=name) from None
        return ConvUnit(name, spec, bn, relu)


def build_model(name, variant="vanilla", r=2, g=4, nlf=None, seed=0, t=5, d=3, num_classes=None):
    """Expand an architecture config into a ModelSpec for the requested conv family."""
    cfg = load_arch(name)
    nlf = nlf if nlf is not None else NlfSpec()
    b = _Builder(cfg, variant, r, g, t, d, nlf, seed)
    c, h, w = cfg["input"]
    classes = int(num_classes or cfg.get("num_classes", 10))
    nodes = []
    if cfg["family"] == "resnet":
        st = cfg["stem"]
        nodes.append(b.conv("stem", c, st["out"], st["k"], st.get("stride", 1), st["k"] // 2, "stem"))
        inp = st["out"]
        expansion = 4 if cfg["block"] == "bottleneck" else 1
        for si, (n_blocks, width) in enumerate(zip(cfg["stages"], cfg["widths"])):
            for bi in range(n_blocks):
                stride = 2 if si > 0 and bi == 0 else 1
                pre = f"layer{si + 1}.{bi}"
                out = width * expansion
                if cfg["block"] == "basic":
                    body = (
                        b.conv(f"{pre}.conv1", inp, width, 3, stride, 1, "block_kxk"),
                        b.conv(f"{pre}.conv2", width, width, 3, 1, 1, "block_kxk", relu=False),
                    )
                else:
                    body = (
                        b.conv(f"{pre}.conv1", inp, width, 1, 1, 0, "block_1x1"),
                        b.conv(f"{pre}.conv2", width, width, 3, stride, 1, "block_kxk"),
                        b.conv(f"{pre}.conv3", width, out, 1, 1, 0, "block_1x1", relu=False),
                    )
                short = ()
                if stride != 1 or inp != out:
                    short = (b.conv(f"{pre}.shortcut", inp, out, 1, stride, 0, "shortcut", relu=False),)
                nodes.append(Residual(pre, body, short))
                inp = out
        head = inp
    else:
        k = cfg.get("k", 3)
        inp = c
        for i, item in enumerate(cfg["layers"]):
            if item == "M":
                nodes.append(MaxPool(f"pool{i}", 2))
                continue
            out, stride = (item, 1) if isinstance(item, int) else (item["out"], item.get("stride", 1))
            nodes.append(b.conv(f"conv{i}", inp, out, k, stride, k // 2, "all_convs", bn=cfg.get("bn", True)))
            inp = out
        head = inp
    return ModelSpec(cfg["name"], variant, (c, h, w), classes, tuple(nodes), head, r, g, nlf, seed)


# -- cost -----------------------------------------------------------------------------


def _unit_cost(unit, hw):
    rep = layer_cost(unit.layer, hw)
    out_hw = unit.layer.conv_geom.out_hw(*hw)
    reps = [rep]
    if unit.bn:
        reps.append(CostReport.from_terms([bn_cost(unit.layer.geom.c_out, out_hw[0] * out_hw[1])], 1))
    return sum_reports(reps, unit.name), out_hw


def model_layer_costs(model, input_shape=None):
    """Per-module CostReports in execution order (convs with their BN, then the head)."""
    c, h, w = input_shape or model.input_shape
    hw = (h, w)
    rows = []
    for node in model.nodes:
        if isinstance(node, ConvUnit):
            rep, hw = _unit_cost(node, hw)
            rows.append(rep)
        elif isinstance(node, Residual):
            start = hw
            for u in node.body:
                rep, hw = _unit_cost(u, hw)
                rows.append(rep)
            for u in node.shortcut:
                rep, _ = _unit_cost(u, start)
                rows.append(rep)
        elif isinstance(node, MaxPool):
            hw = (hw[0] // node.k, hw[1] // node.k)
    rows.append(CostReport.from_terms([linear_cost(model.head_features, model.num_classes)], 1, "fc"))
    return rows


def model_cost(model, input_shape=None):
    return sum_reports(model_layer_costs(model, input_shape), f"{model.name}/{model.variant}")


# -- built models -----------------------------------------------------------------------


class Model:
    """Weights for a ModelSpec; forward/graph run the network in NCHW."""

    def __init__(self, spec, init_seed=0, dtype=DTYPE):
        self.spec = spec
        self.layers = {}
        self.bns = {}
        for i, unit in enumerate(spec.conv_units()):
            self.layers[unit.name] = build_layer(unit.layer, _layer_seed(init_seed, i), dtype)
            if unit.bn:
                self.bns[unit.name] = ad.BatchNorm(unit.layer.geom.c_out, dtype=dtype, name=f"{unit.name}.bn")
        rng = np.random.default_rng(np.random.SeedSequence([int(init_seed), 0xFC]))
        bound = 1.0 / np.sqrt(spec.head_features)
        self.fc_w = ad.Parameter(
            rng.uniform(-bound, bound, (spec.num_classes, spec.head_features)).astype(dtype), "fc.weight"
        )
        self.fc_b = ad.Parameter(rng.uniform(-bound, bound, spec.num_classes).astype(dtype), "fc.bias")

    def parameters(self):
        ps = [p for layer in self.layers.values() for p in layer.parameters()]
        ps += [p for bn in self.bns.values() for p in bn.parameters()]
        return ps + [self.fc_w, self.fc_b]

    def trainable(self):
        return [p for p in self.parameters() if p.trainable]

    def hyper_snapshot(self):
        """Copies of every layer's frozen NLF hyperparameters, keyed by layer name."""
        return {n: layer.hypers.params.copy() for n, layer in self.layers.items() if layer.hypers is not None}

    def _unit(self, unit, x, training):
        y = self.layers[unit.name].graph(x, training)
        if unit.bn:
            y = ad.batch_norm(y, self.bns[unit.name], training)
        return ad.relu(y) if unit.relu else y

    def graph(self, x, training=False):
        x = ad.as_var(x)
        check_nchw(x.value, "input")
        if x.value.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeMismatch(f"model expects input (n, {self.spec.input_shape}), got {x.value.shape}")
        for node in self.spec.nodes:
            if isinstance(node, ConvUnit):
                x = self._unit(node, x, training)
            elif isinstance(node, Residual):
                y = x
                for u in node.body:
                    y = self._unit(u, y, training)
                s = x
                for u in node.shortcut:
                    s = self._unit(u, s, training)
                x = ad.relu(ad.add(y, s))
            elif isinstance(node, MaxPool):
                x = ad.max_pool2d(x, node.k)
        return ad.linear(ad.global_avg_pool(x), self.fc_w, self.fc_b)

    def __call__(self, x):
        with ad.no_grad():
            return self.graph(x).value


def instantiate(spec, init_seed=0, dtype=DTYPE):
    return Model(spec, init_seed, dtype)


def forward_model(model, x):
    return model(x)
