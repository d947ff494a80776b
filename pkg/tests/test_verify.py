import numpy as np

from groupnl.layers import LayerKind, LayerSpec, build_layer
from groupnl.tensor import ConvGeometry
from groupnl.verify import (
    decompose,
    oracle_forward,
    random_spec,
    run_suites,
    suite_counts,
    suite_decomposition,
    suite_freeze,
    suite_gradcheck,
    suite_oracle,
)


def test_random_specs_are_legal_and_bounded():
    rng = np.random.default_rng(0)
    for kind in LayerKind:
        for _ in range(50):
            spec, (h, w) = random_spec(rng, kind, max_c=32, max_hw=12)
            assert spec.geom.c_in <= 32 and spec.geom.c_out <= 32 and h <= 12 and w <= 12
            spec.conv_geom.out_hw(h, w)


def test_small_suite_runs_pass():
    results = run_suites(instances=3, seed=1)
    assert [r.suite for r in results] == ["oracle", "decomposition", "freeze", "gradcheck", "counts"]
    assert all(r.passed for r in results), [r.to_dict() for r in results if not r.passed]


def test_oracle_catches_layout_bug():
    # a plausible wrong layout: tile the whole seed block instead of repeating each group
    from groupnl import autodiff as ad
    from groupnl.layers import _slot_params

    spec = LayerSpec(LayerKind.GroupNLStd, ConvGeometry(4, 16, 3, padding=1), r=4, g=2)
    layer = build_layer(spec)
    x = np.random.default_rng(0).uniform(-1, 1, (1, 4, 5, 5)).astype(np.float32)
    ys = layer.seed_conv(x)
    tiled = np.tile(ys, (1, spec.gamma, 1, 1))[:, : spec.c_gen]
    gen = ad.nlf(tiled, layer.hypers.kind, _slot_params(layer)).value
    bad = np.concatenate([ys, gen], axis=1)
    assert np.max(np.abs(bad - oracle_forward(layer, x))) > 1e-3
    assert np.max(np.abs(layer(x) - oracle_forward(layer, x))) < 1e-5


def test_decompose_finds_every_generated_channel():
    spec = LayerSpec(LayerKind.GroupNLStd, ConvGeometry(8, 16, 3, padding=1), r=4, g=2)
    layer = build_layer(spec, 3)
    x = np.random.default_rng(1).standard_normal((1, 8, 4, 4)).astype(np.float32)
    matches = decompose(layer(x), layer.seed_conv(x), layer.hypers, spec)
    assert set(matches) == set(range(4, 16))
    # channel 4 is the first copy of group 0: slot (0, 0) applied to seed channel 0
    assert (0, 0, 0) in matches[4]
    assert all(matches.values())


def test_decompose_rejects_foreign_channel():
    spec = LayerSpec(LayerKind.GroupNLStd, ConvGeometry(2, 8, 1), r=2, g=2)
    layer = build_layer(spec)
    x = np.random.default_rng(2).standard_normal((1, 2, 3, 3)).astype(np.float32)
    y = layer(x)
    y[:, 5] += 1e-3
    assert decompose(y, layer.seed_conv(x), layer.hypers, spec)[5] == []


def test_individual_suites():
    assert suite_oracle(instances=5, seed=2).passed
    assert suite_decomposition(instances=5, seed=2).passed
    assert suite_freeze(instances=2, seed=2).passed
    assert suite_gradcheck(instances=1, seed=2).passed
    counts = suite_counts(instances=5, seed=2)
    assert counts.passed and counts.checked == 7 * 5 + 4
