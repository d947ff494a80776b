"""Data-agnostic nonlinear transformation functions (NLFs) and frozen hyperparameter sets."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArityMismatch, InvalidSpec, ShapeMismatch
from .tensor import channel_concat, channel_split, check_nchw


class NlfKind(str, enum.Enum):
    Sinusoidal = "Sinusoidal"
    Monomial = "Monomial"
    Gaussian = "Gaussian"
    Laplace = "Laplace"

    @property
    def arity(self):
        return 2 if self is NlfKind.Sinusoidal else 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise InvalidSpec(f"unknown NLF kind {value!r}", field="nlf.kind")


# Uniform sampling ranges, one (lo, hi) per hyperparameter dimension.
# The Gaussian/Laplace epsilon range is our own choice.
DEFAULT_RANGES = {
    NlfKind.Sinusoidal: ((1.0, 2.0), (1.0, 5.0)),  # omega, phi
    NlfKind.Monomial: ((1.0, 7.0),),  # eta
    NlfKind.Gaussian: ((1.0, 2.0),),  # epsilon
    NlfKind.Laplace: ((1.0, 2.0),),  # epsilon
}

# Candidate per-layer filter expansion factors for MonoCNN layers.
MONO_EXP_FACTORS = (2, 4, 8, 16)


@dataclass(frozen=True)
class NlfSpec:
    kind: NlfKind = NlfKind.Sinusoidal
    ranges: tuple | None = None
    laplace_abs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", NlfKind.parse(self.kind))
        if self.ranges is not None:
            ranges = tuple(tuple(float(v) for v in r) for r in self.ranges)
            if len(ranges) != self.kind.arity or any(len(r) != 2 or r[0] > r[1] for r in ranges):
                raise InvalidSpec(
                    f"{self.kind.value} needs {self.kind.arity} (lo, hi) ranges, got {self.ranges!r}",
                    field="nlf.ranges",
                )
            object.__setattr__(self, "ranges", ranges)

    @property
    def effective_ranges(self):
        return self.ranges if self.ranges is not None else DEFAULT_RANGES[self.kind]

    def to_dict(self):
        d = {"kind": self.kind.value, "laplace_abs": self.laplace_abs}
        if self.ranges is not None:
            d["ranges"] = [list(r) for r in self.ranges]
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise InvalidSpec("expected an object", field="nlf")
        unknown = set(d) - {"kind", "ranges", "laplace_abs"}
        if unknown:
            raise InvalidSpec(f"unknown keys {sorted(unknown)}", field="nlf")
        return cls(
            kind=NlfKind.parse(d.get("kind", "Sinusoidal")),
            ranges=d.get("ranges"),
            laplace_abs=bool(d.get("laplace_abs", False)),
        )


@dataclass(frozen=True, eq=False)
class HyperSet:
    """Frozen per-slot NLF hyperparameters; ``params`` has shape (slots, arity)."""

    kind: NlfKind
    slots: int
    params: np.ndarray
    rng_seed: int = 0
    laplace_abs: bool = False
    ranges: tuple = field(default=(), repr=False)

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64).reshape(self.slots, self.kind.arity)
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def slot(self, j):
        return self.params[j]

    def __eq__(self, other):
        return (
            isinstance(other, HyperSet)
            and (self.kind, self.slots, self.rng_seed, self.laplace_abs)
            == (other.kind, other.slots, other.rng_seed, other.laplace_abs)
            and np.array_equal(self.params, other.params)
        )

    __hash__ = None

    def to_json(self):
        return json.dumps(
            {
                "kind": self.kind.value,
                "slots": self.slots,
                "seed": self.rng_seed,
                "laplace_abs": self.laplace_abs,
                "params": self.params.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            kind=NlfKind.parse(d["kind"]),
            slots=int(d["slots"]),
            params=np.asarray(d["params"], dtype=np.float64),
            rng_seed=int(d["seed"]),
            laplace_abs=bool(d.get("laplace_abs", False)),
        )


def sample_hyperset(kind, slots, seed, ranges=None, laplace_abs=False):
    """Draw ``slots`` hyperparameter vectors uniformly inside ``ranges``.

    Each hyperparameter dimension is drawn as its own block of ``slots``
    values, so adding a dimension never perturbs the earlier ones.
    """
    kind = NlfKind.parse(kind)
    if slots < 0:
        raise ValueError(f"slots must be >= 0, got {slots}")
    ranges = tuple(ranges) if ranges is not None else DEFAULT_RANGES[kind]
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    cols = [rng.uniform(lo, hi, size=slots) for lo, hi in ranges]
    params = np.stack(cols, axis=1) if slots else np.zeros((0, kind.arity))
    return HyperSet(kind, slots, params, int(seed), laplace_abs, ranges)


def _unpack(kind, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape[-1] != kind.arity:
        raise ArityMismatch(f"{kind.value} takes {kind.arity} hyperparameters, got {params.shape[-1]}")
    return [params[..., i] for i in range(kind.arity)]


def nlf_eval(kind, params, x, laplace_abs=False):
    """Elementwise NLF; ``params`` columns broadcast against ``x`` (scalars or per-channel arrays)."""
    kind = NlfKind.parse(kind)
    dt = x.dtype
    hp = [np.asarray(p, dtype=dt) for p in _unpack(kind, params)]
    if kind is NlfKind.Sinusoidal:
        omega, phi = hp
        return np.sin(omega * (x + phi))
    if kind is NlfKind.Monomial:
        (eta,) = hp
        return np.sign(x) * np.abs(x) ** eta
    if kind is NlfKind.Gaussian:
        (eps,) = hp
        return np.exp(-((eps * x) ** 2))
    (eps,) = hp
    arg = np.abs(x) if laplace_abs else x
    return (eps / 2) * np.exp(-(eps * arg))


def nlf_grad(kind, params, x, laplace_abs=False):
    """Elementwise derivative d nlf / dx (monomial derivative at x=0 is taken as 0)."""
    kind = NlfKind.parse(kind)
    dt = x.dtype
    hp = [np.asarray(p, dtype=dt) for p in _unpack(kind, params)]
    if kind is NlfKind.Sinusoidal:
        omega, phi = hp
        return omega * np.cos(omega * (x + phi))
    if kind is NlfKind.Monomial:
        (eta,) = hp
        ax = np.abs(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = eta * ax ** (eta - 1)
        return np.where(ax > 0, g, 0).astype(dt)
    if kind is NlfKind.Gaussian:
        (eps,) = hp
        return -2 * eps**2 * x * np.exp(-((eps * x) ** 2))
    (eps,) = hp
    if laplace_abs:
        return -(eps**2 / 2) * np.sign(x) * np.exp(-(eps * np.abs(x)))
    return -(eps**2 / 2) * np.exp(-(eps * x))


def nlf_apply(kind, params, x, laplace_abs=False):
    x = check_nchw(x)
    kind = NlfKind.parse(kind)
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (kind.arity,):
        raise ArityMismatch(f"{kind.value} takes {kind.arity} hyperparameters, got shape {params.shape}")
    return nlf_eval(kind, params, x, laplace_abs)


def broadcast_params(hs, slot_channel_width):
    """Per-channel hyperparameters, shape (1, slots*width, 1, 1, arity): slot j spans a contiguous block."""
    per_channel = np.repeat(hs.params, slot_channel_width, axis=0)
    return per_channel.reshape(1, -1, 1, 1, hs.kind.arity)


def nlf_apply_grouped(hs, slot_channel_width, x):
    x = check_nchw(x)
    if x.shape[1] != hs.slots * slot_channel_width:
        raise ShapeMismatch(
            f"input has {x.shape[1]} channels, expected slots*width = {hs.slots}*{slot_channel_width}"
        )
    return nlf_eval(hs.kind, broadcast_params(hs, slot_channel_width), x, hs.laplace_abs)


def nlf_apply_grouped_reference(hs, slot_channel_width, x):
    """Slot-by-slot composition of :func:`nlf_apply`; the oracle for the broadcast path."""
    parts = channel_split(x, hs.slots)
    assert parts[0].shape[1] == slot_channel_width
    return channel_concat([nlf_apply(hs.kind, hs.slot(j), p, hs.laplace_abs) for j, p in enumerate(parts)])
