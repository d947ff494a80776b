"""Print layer-level and model-level parameter/FLOP tables for every conv variant."""
import argparse

from groupnl.bench import profile_spec
from groupnl.cost import comm_cost, layer_cost, render_table
from groupnl.zoo import available_archs, build_model, model_cost

LAYER_VARIANTS = [
    ("vanilla", (2,)),
    ("ghost", (2,)),
    ("sinefm", (2,)),
    ("groupnl", (2, 4, 8)),
    ("depthwise", (2,)),
    ("groupnl_sparse", (2, 4, 8)),
]
MODEL_VARIANTS = ["vanilla", "ghost", "sinefm", "groupnl"]


def layer_table(hw):
    rows = []
    for variant, ratios in LAYER_VARIANTS:
        for r in ratios:
            rep = layer_cost(profile_spec(variant, r), hw)
            rows.append({"variant": variant, "r": r, "params": f"{rep.params:,}", "FLOPs(M)": f"{rep.flops / 1e6:.2f}"})
    return rows


def model_table(archs, ratios):
    rows = []
    for arch in archs:
        for variant in MODEL_VARIANTS:
            for r in ratios if variant != "vanilla" else (2,):
                rep = model_cost(build_model(arch, variant, r=r))
                ddp = comm_cost(rep.grads, 8, "DDP")
                rows.append(
                    {
                        "arch": arch,
                        "variant": variant,
                        "r": "-" if variant == "vanilla" else r,
                        "params(M)": f"{rep.params / 1e6:.2f}",
                        "FLOPs(G)": f"{rep.flops / 1e9:.3f}",
                        "DDP 8-GPU per GPU(M)": f"{ddp.per_gpu / 1e6:.2f}",
                    }
                )
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hw", type=int, default=32, help="layer input height/width")
    ap.add_argument("--archs", nargs="+", default=[a for a in available_archs() if a != "tinycnn"])
    ap.add_argument("--ratios", type=int, nargs="+", default=[2, 4])
    args = ap.parse_args()
    rows = layer_table((args.hw, args.hw))
    print(render_table(rows, list(rows[0])))
    print()
    rows = model_table(args.archs, args.ratios)
    print(render_table(rows, list(rows[0])))


if __name__ == "__main__":
    main()
