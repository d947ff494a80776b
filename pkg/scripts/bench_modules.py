"""Interleaved latency comparison of the module-level profiling scenario."""
import argparse
import json

from groupnl.bench import host_info, profile_config, profile_interleaved, render_bench

DEFAULT = ["vanilla", "ghost", "sinefm", "groupnl", "depthwise", "groupnl_sparse"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variants", nargs="+", default=DEFAULT)
    ap.add_argument("--ratios", type=int, nargs="+", default=[2])
    ap.add_argument("--warmup", type=int, default=10)
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--json", action="store_true", help="emit bench_report/v1 records instead of a table")
    args = ap.parse_args()
    cfgs = []
    for v in args.variants:
        for r in args.ratios if v.startswith("groupnl") or v in ("ghost", "sinefm") else args.ratios[:1]:
            cfgs.append(profile_config(v, r, warmup=args.warmup, iters=args.iters, threads=args.threads))
    reports = profile_interleaved(cfgs)
    if args.json:
        print(json.dumps([rep.to_dict() for rep in reports], indent=2))
    else:
        print(json.dumps(host_info()))
        print(render_bench(reports))


if __name__ == "__main__":
    main()
