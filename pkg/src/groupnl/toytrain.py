"""Desk-scale training and corruption-robustness experiments on synthetic images.

The synthetic task: every class owns a random template made of a few coloured
Gaussian bumps; samples are jittered, noisy copies of their class template.
Images live in [0, 1] in NCHW layout.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .errors import DivergedLoss, InvalidSpec
from .tensor import DTYPE, load_nchw, save_nchw
from .zoo import Model, ModelSpec, instantiate


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    seed: int
    classes: int
    hw: int
    kind: str = "gaussian_blobs"

    @property
    def n(self):
        return len(self.y_train) + len(self.y_test)


def _templates(rng, classes, hw, channels=3, blobs=3):
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    out = np.zeros((classes, channels, hw, hw))
    for c in range(classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, hw, size=2)
            sigma = rng.uniform(0.1, 0.25) * hw
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            out[c] += rng.uniform(-1, 1, size=channels)[:, None, None] * bump
    lo = out.min(axis=(1, 2, 3), keepdims=True)
    hi = out.max(axis=(1, 2, 3), keepdims=True)
    return 0.2 + 0.6 * (out - lo) / np.maximum(hi - lo, 1e-12)


def generate_dataset(seed=0, n=500, classes=10, hw=16, noise=0.15):
    """Class-balanced synthetic images with a stratified 80/20 train/test split."""
    if n < classes or classes < 2:
        raise InvalidSpec(f"need n >= classes >= 2, got n={n}, classes={classes}", field="n")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    templates = _templates(rng, classes, hw)
    labels = np.arange(n) % classes
    gain = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    x = 0.5 + gain * (templates[labels] - 0.5) + noise * rng.standard_normal((n, 3, hw, hw))
    x = np.clip(x, 0, 1).astype(DTYPE)
    order = rng.permutation(n)
    x, labels = x[order], labels[order]
    test = np.zeros(n, dtype=bool)
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        test[idx[int(round(0.8 * len(idx))):]] = True
    return SyntheticDataset(x[~test], labels[~test], x[test], labels[test], int(seed), classes, hw)


# -- corruptions ------------------------------------------------------------------


class Corruption(str, enum.Enum):
    GaussianNoise = "GaussianNoise"
    ShotNoise = "ShotNoise"
    GaussianBlur = "GaussianBlur"
    Brightness = "Brightness"
    Contrast = "Contrast"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise InvalidSpec(f"unknown corruption {value!r}", field="corruption")


# Magnitude per severity 1..5, scaled for [0, 1] images at 16x16.
SEVERITY = {
    Corruption.GaussianNoise: (0.08, 0.16, 0.24, 0.32, 0.40),  # noise std
    Corruption.ShotNoise: (60, 25, 12, 5, 3),  # photons per unit intensity
    Corruption.GaussianBlur: (0.5, 0.75, 1.0, 1.5, 2.0),  # blur sigma, pixels
    Corruption.Brightness: (0.1, 0.2, 0.3, 0.4, 0.5),  # additive shift
    Corruption.Contrast: (0.75, 0.5, 0.4, 0.3, 0.15),  # contrast factor
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: Corruption
    severity: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Corruption.parse(self.kind))
        if isinstance(self.severity, bool) or not isinstance(self.severity, int) or not 0 <= self.severity <= 5:
            raise InvalidSpec(f"severity must be an integer in 1..5 (0 = identity), got {self.severity!r}", "severity")


def _apply(x, spec, rng):
    if spec.severity == 0:
        return x
    c = SEVERITY[spec.kind][spec.severity - 1]
    xf = x.astype(np.float64)
    if spec.kind is Corruption.GaussianNoise:
        out = xf + rng.normal(scale=c, size=x.shape)
    elif spec.kind is Corruption.ShotNoise:
        out = rng.poisson(xf * c) / c
    elif spec.kind is Corruption.GaussianBlur:
        out = gaussian_filter(xf, sigma=(0, 0, c, c), mode="reflect")
    elif spec.kind is Corruption.Brightness:
        out = xf + c
    else:
        mean = xf.mean(axis=(1, 2, 3), keepdims=True)
        out = (xf - mean) * c + mean
    return np.clip(out, 0, 1).astype(x.dtype)


def corrupt(ds, spec):
    """Label-preserving corrupted copy of both splits; severity 0 returns the images unchanged."""
    kinds = list(Corruption)
    rng = np.random.default_rng(np.random.SeedSequence([ds.seed, kinds.index(spec.kind), spec.severity, 0xC0]))
    return replace(ds, x_train=_apply(ds.x_train, spec, rng), x_test=_apply(ds.x_test, spec, rng))


# -- dataset cache and external data -------------------------------------------------------


def save_dataset(ds, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_nchw(d / "train.nchw", ds.x_train)
    save_nchw(d / "test.nchw", ds.x_test)
    meta = {
        "seed": ds.seed,
        "classes": ds.classes,
        "hw": ds.hw,
        "kind": ds.kind,
        "y_train": ds.y_train.tolist(),
        "y_test": ds.y_test.tolist(),
    }
    (d / "labels.json").write_text(json.dumps(meta))


def load_dataset(directory):
    d = Path(directory)
    meta = json.loads((d / "labels.json").read_text())
    return SyntheticDataset(
        load_nchw(d / "train.nchw"),
        np.asarray(meta["y_train"], dtype=np.int64),
        load_nchw(d / "test.nchw"),
        np.asarray(meta["y_test"], dtype=np.int64),
        meta["seed"],
        meta["classes"],
        meta["hw"],
        meta["kind"],
    )


def load_cifar10_binary(root, limit=None):
    """CIFAR-10 binary batches from ``root`` if present, else None (the hermetic default)."""
    root = Path(root)
    train_files = sorted(root.glob("data_batch_*.bin"))
    test_file = root / "test_batch.bin"
    if not train_files or not test_file.exists():
        return None

    def read(paths):
        raw = np.concatenate([np.fromfile(p, dtype=np.uint8).reshape(-1, 3073) for p in paths])
        if limit:
            raw = raw[:limit]
        return (raw[:, 1:].reshape(-1, 3, 32, 32) / 255.0).astype(DTYPE), raw[:, 0].astype(np.int64)

    xtr, ytr = read(train_files)
    xte, yte = read([test_file])
    return SyntheticDataset(xtr, ytr, xte, yte, 0, 10, 32, kind="cifar10")


# -- training ----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    batch: int = 32
    epochs: int = 20
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidSpec(f"lr must be >= 0, got {self.lr}", field="lr")
        if self.batch < 1:
            raise InvalidSpec(f"batch must be >= 1, got {self.batch}", field="batch")
        if self.epochs < 0:
            raise InvalidSpec(f"epochs must be >= 0, got {self.epochs}", field="epochs")


@dataclass
class TrainLog:
    """Per-epoch records; epoch 0 is the untrained model.

    ``loss``/``train_acc`` are measured on the whole train split with batch
    statistics (running buffers untouched), so they depend on the weights only.
    ``test_acc`` uses eval-mode BN.
    """

    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    model: object = field(default=None, repr=False, compare=False)

    def to_jsonl(self):
        return "\n".join(json.dumps({"schema": "train_log/v1", **r}) for r in self.records)

    @property
    def final(self):
        return self.records[-1]


def _objective(model, x, y):
    with ad.no_grad(), ad.frozen_stats():
        logits = model.graph(x, training=True).value
    return _loss_acc(logits, y)


def _loss_acc(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean()), float((logits.argmax(axis=1) == y).mean())


def evaluate(model, x, y, batch=256):
    """Eval-mode (running-statistics) loss and accuracy."""
    logits = np.concatenate([model(x[i:i + batch]) for i in range(0, len(x), batch)])
    return _loss_acc(logits, y)


def cosine_lr(base, step, total):
    return 0.5 * base * (1 + math.cos(math.pi * step / max(total, 1)))


def train(model, ds, cfg=None):
    """SGD with momentum and per-step cosine annealing; returns the TrainLog (trained model attached)."""
    cfg = cfg or TrainConfig()
    if isinstance(model, ModelSpec):
        model = instantiate(model, init_seed=cfg.seed)
    if not isinstance(model, Model):
        raise InvalidSpec("train expects a ModelSpec or a built Model", field="model")
    params = model.trainable()
    velocity = {id(p): np.zeros_like(p.value) for p in params}
    n = len(ds.y_train)
    steps_per_epoch = math.ceil(n / cfg.batch)
    total = steps_per_epoch * cfg.epochs
    log = TrainLog(config=asdict(cfg), model=model)

    def record(epoch, lr, batch_losses):
        loss, acc = _objective(model, ds.x_train, ds.y_train)
        _, test_acc = evaluate(model, ds.x_test, ds.y_test)
        log.records.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": loss,
                "train_acc": acc,
                "test_acc": test_acc,
                "batch_loss": float(np.mean(batch_losses)) if batch_losses else loss,
            }
        )

    record(0, cfg.lr, [])
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5EED])).permutation(n)
        losses = []
        lr = cfg.lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            lr = cosine_lr(cfg.lr, step, total)
            loss = ad.softmax_cross_entropy(model.graph(ds.x_train[idx], training=True), ds.y_train[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergedLoss(f"non-finite loss {value} at epoch {epoch}, step {step} (lr={lr:.4g})")
            grads = ad.backward(loss)
            for p in params:
                g = grads.get(p)
                if g is None:
                    continue
                if cfg.weight_decay and p.value.ndim > 1:
                    g = g + cfg.weight_decay * p.value
                v = velocity[id(p)]
                v *= cfg.momentum
                v += g
                p.value -= (lr * v).astype(p.value.dtype)
            losses.append(value)
            step += 1
        record(epoch, lr, losses)
    return log


# -- robustness sweep -------------------------------------------------------------------


def robustness(model, ds, kinds=tuple(Corruption), severities=(0, 1, 2, 3, 4, 5)):
    """Test accuracy of ``model`` under each corruption kind and severity."""
    out = {}
    for kind in kinds:
        kind = Corruption.parse(kind)
        out[kind.value] = [evaluate(model, corrupt(ds, CorruptionSpec(kind, s)).x_test, ds.y_test)[1] for s in severities]
    return out


def mean_over_kinds(table):
    return np.mean(np.asarray(list(table.values())), axis=0)
