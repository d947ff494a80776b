"""Central-difference verification of reverse-mode gradients and trainable-scalar counting."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .tensor import ORACLE_DTYPE


def count_trainable(obj):
    """Number of scalars in the trainable registry of a Layer or Model (the G of the comm model)."""
    return sum(p.size for p in obj.trainable())


def _probe_loss(layer, x, probe):
    return ad.weighted_sum(layer.graph(x, training=False), probe)


def finite_diff_check(layer, x, eps=1e-5, seed=0):
    """Max over trainable scalars of |g_ad - g_fd| / max(1, |g_fd|).

    Runs on a float64 copy of ``layer``.  The scalar objective is a fixed random
    projection of the eval-mode output, so BN layers use frozen statistics.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    layer = layer.astype(ORACLE_DTYPE)
    x = np.asarray(x, dtype=ORACLE_DTYPE)
    with ad.no_grad():
        out_shape = layer.graph(x).value.shape
    probe = np.random.default_rng(seed).standard_normal(out_shape)

    grads = ad.backward(_probe_loss(layer, x, probe))
    worst = 0.0
    with ad.no_grad():
        for p in layer.trainable():
            g_ad = grads.get(p, np.zeros_like(p.value))
            flat = p.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(_probe_loss(layer, x, probe).value)
                flat[i] = orig - eps
                down = float(_probe_loss(layer, x, probe).value)
                flat[i] = orig
                g_fd = (up - down) / (2 * eps)
                err = abs(g_ad.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
                worst = max(worst, err)
    return worst
