"""``groupnl`` command line: cost analysis, verification, benchmarking and toy training.

Exit codes: 0 success, 1 validation error (bad flags, malformed spec, failed
verification), 2 internal error.  A ``--config`` JSON file overrides flags,
which override defaults; ``GROUPNL_SEED`` is the seed when ``--seed`` is absent.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from .errors import GroupNLError, InvalidSpec
from .nlf import NlfKind, NlfSpec


class CliError(Exception):
    """Usage or validation problem reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# -- output -----------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render(result, fmt):
    payload, rows, columns = result
    if fmt == "json":
        if isinstance(payload, str):
            return payload
        return json.dumps(payload, indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue().rstrip("\n")
    from .cost import render_table

    return render_table([{c: _fmt(r.get(c, "")) for c in columns} for r in rows], columns)


def _m(x):
    return f"{x / 1e6:.2f}M"


# -- argument helpers -----------------------------------------------------------------


def parse_hw(text):
    """'32x32', '32,16' or a single '32' for square inputs."""
    m = re.fullmatch(r"\s*(\d+)\s*(?:[xX,]\s*(\d+)\s*)?", str(text))
    if not m:
        raise InvalidSpec(f"expected HxW, got {text!r}", field="hw")
    return int(m.group(1)), int(m.group(2) or m.group(1))


def parse_severities(text):
    """'1..5', '0..3' or '1,3,5'."""
    text = str(text).strip()
    m = re.fullmatch(r"(\d)\s*\.\.\s*(\d)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        vals = list(range(lo, hi + 1))
    else:
        try:
            vals = [int(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise InvalidSpec(f"expected a range like 1..5 or a list like 1,3,5, got {text!r}", "severity") from None
    if not vals or any(not 0 <= v <= 5 for v in vals):
        raise InvalidSpec(f"severities must lie in 0..5, got {text!r}", field="severity")
    return vals


def _csv_list(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def resolve_seed(args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("GROUPNL_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InvalidSpec(f"GROUPNL_SEED must be an integer, got {env!r}", field="GROUPNL_SEED") from None


def _load_spec_file(path):
    from .layers import LayerSpec

    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InvalidSpec(f"cannot read spec file: {e.strerror}", field="spec") from None
    return LayerSpec.from_json(text)


# -- commands -----------------------------------------------------------------------


def cmd_cost_layer(args):
    from .cost import layer_cost, report_rows

    spec = _load_spec_file(args.spec)
    rep = layer_cost(spec, parse_hw(args.hw), bias=False if args.no_bias else None)
    payload = {**rep.to_dict(), "label": spec.kind.value, "spec": spec.to_dict(), "hw": list(parse_hw(args.hw))}
    return payload, report_rows(rep), ["term", "params", "flops", "flops_M"]


def _model_spec(args, seed):
    from .zoo import build_model

    nlf = NlfSpec(NlfKind.parse(args.nlf)) if getattr(args, "nlf", None) else None
    return build_model(args.arch, args.variant, r=args.r, g=args.g, nlf=nlf, seed=seed)


def cmd_cost_model(args):
    from .zoo import model_cost, model_layer_costs

    model = _model_spec(args, resolve_seed(args))
    total = model_cost(model)
    payload = total.to_dict()
    payload["arch"], payload["variant"], payload["r"], payload["g"] = model.name, model.variant, model.r, model.g
    if args.per_layer:
        rows = [{"module": c.label, "params": c.params, "flops": c.flops} for c in model_layer_costs(model)]
        payload["layers"] = rows
    else:
        rows = []
    rows = rows + [
        {
            "module": "TOTAL",
            "params": total.params,
            "flops": total.flops,
            "params_M": f"{total.params / 1e6:.3f}",
            "flops_M": f"{total.flops / 1e6:.2f}",
        }
    ]
    return payload, rows, ["module", "params", "flops", "params_M", "flops_M"]


def cmd_cost_comm(args):
    from .cost import comm_cost

    rep = comm_cost(float(args.grads), args.gpus, args.mode)
    row = {
        "mode": rep.mode.value,
        "gpus": rep.n_gpus,
        "grads": _m(rep.grads),
        "per_gpu": _m(rep.per_gpu),
        "other_gpu": _m(rep.other_gpu),
        "total": _m(rep.total),
    }
    return rep.to_dict(), [row], list(row)


def cmd_verify(args):
    from .verify import SUITES, run_suites

    names = SUITES if args.suite == "all" else (args.suite,)
    results = run_suites(names, instances=args.instances, eps=args.eps, seed=resolve_seed(args))
    rows = [
        {
            "suite": r.suite,
            "result": "PASS" if r.passed else "FAIL",
            "checked": r.checked,
            "failures": r.failures,
            "metric": r.metric,
        }
        for r in results
    ]
    payload = {"schema": "verify_report/v1", "passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    return payload, rows, ["suite", "result", "checked", "failures", "metric"]


def cmd_bench_module(args):
    from .bench import BenchConfig, bench_rows, profile, profile_config

    seed = resolve_seed(args)
    if args.spec:
        spec = _load_spec_file(args.spec)
        h, w = parse_hw(args.hw)
        cfg = BenchConfig(spec, (args.batch, spec.geom.c_in, h, w), args.warmup, args.iters, args.threads, seed, args.fresh_inputs)
    else:
        cfg = profile_config(args.variant, args.r, args.g, args.warmup, args.iters, args.threads, seed)
    rep = profile(cfg)
    rows = bench_rows([rep])
    return rep.to_dict(), rows, list(rows[0])


def cmd_bench_compare(args):
    from .bench import bench_rows, compare

    reps = compare(_csv_list(args.variants), args.r, args.warmup, args.iters, args.threads, resolve_seed(args))
    rows = bench_rows(reps)
    payload = {"schema": "bench_compare/v1", "reports": [r.to_dict() for r in reps]}
    return payload, rows, list(rows[0])


def _dataset(args, seed):
    from .toytrain import generate_dataset, load_cifar10_binary, load_dataset, save_dataset

    if args.cifar:
        ds = load_cifar10_binary(args.cifar)
        if ds is not None:
            return ds
        print(f"note: no CIFAR-10 binaries under {args.cifar}; using synthetic data", file=sys.stderr)
    if args.cache and (Path(args.cache) / "labels.json").exists():
        ds = load_dataset(args.cache)
        if ds.seed == seed and ds.n == args.n and ds.classes == args.classes and ds.hw == args.hw:
            return ds
    ds = generate_dataset(seed, args.n, args.classes, args.hw)
    if args.cache:
        save_dataset(ds, args.cache)
    return ds


def _train_cfg(args, seed):
    from .toytrain import TrainConfig

    return TrainConfig(lr=args.lr, batch=args.batch, epochs=args.epochs, seed=seed)


def cmd_train_toy(args):
    from .toytrain import train

    seed = resolve_seed(args)
    ds = _dataset(args, seed)
    log = train(_model_spec(args, seed), ds, _train_cfg(args, seed))
    cols = ["epoch", "lr", "loss", "train_acc", "test_acc", "batch_loss"]
    return log.to_jsonl(), log.records, cols


def cmd_train_robust(args):
    from .toytrain import Corruption, mean_over_kinds, robustness, train

    severities = parse_severities(args.severity)
    if 0 not in severities:
        severities = [0] + severities
    kinds = [Corruption.parse(k) for k in _csv_list(args.kinds)] if args.kinds else list(Corruption)
    base = resolve_seed(args)
    tables = []
    for s in range(args.seeds):
        seed = base + s
        ds = _dataset(args, seed)
        log = train(_model_spec(args, seed), ds, _train_cfg(args, seed))
        tables.append(robustness(log.model, ds, kinds, severities))
    avg = {k.value: np.mean([t[k.value] for t in tables], axis=0).tolist() for k in kinds}
    mean = mean_over_kinds(avg).tolist()
    cols = ["corruption"] + [f"s{v}" for v in severities]
    rows = [{"corruption": k, **{f"s{v}": f"{a:.3f}" for v, a in zip(severities, accs)}} for k, accs in avg.items()]
    rows.append({"corruption": "mean", **{f"s{v}": f"{a:.3f}" for v, a in zip(severities, mean)}})
    payload = {
        "schema": "robustness_report/v1",
        "arch": args.arch,
        "variant": args.variant,
        "seeds": args.seeds,
        "severities": severities,
        "accuracy": avg,
        "mean": mean,
        "non_increasing": bool(all(b <= a for a, b in zip(mean, mean[1:]))),
    }
    return payload, rows, cols


# -- parser -----------------------------------------------------------------------------


def _common(p):
    p.add_argument("--format", choices=("json", "table", "csv"), default="table")
    p.add_argument("--output", "-o", help="write the rendered result here instead of stdout")
    p.add_argument("--config", help="JSON file of option values; overrides flags")
    p.add_argument("--seed", type=int, help="global seed (fallback: GROUPNL_SEED, then 0)")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads")


def _model_opts(p, arch="resnet18", variant="groupnl"):
    from .zoo import VARIANTS

    p.add_argument("--arch", default=arch)
    p.add_argument("--variant", default=variant, choices=sorted(VARIANTS))
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--g", type=int, default=4)
    p.add_argument("--nlf", choices=[k.value for k in NlfKind], help="NLF kind for generative variants")


def _train_opts(p):
    _model_opts(p, arch="tinycnn", variant="groupnl")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--n", type=int, default=500, help="synthetic samples (80/20 split)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--hw", type=int, default=16, help="synthetic image size")
    p.add_argument("--cifar", help="directory with CIFAR-10 binary batches (optional)")
    p.add_argument("--cache", help="dataset cache directory (.nchw + labels.json)")


def build_parser():
    from .bench import BENCH_VARIANTS
    from .verify import SUITES

    parser = _Parser(prog="groupnl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    cost = sub.add_parser("cost", help="analytic parameter / FLOP / communication costs")
    cost_sub = cost.add_subparsers(dest="target", required=True, parser_class=_Parser)
    p = cost_sub.add_parser("layer", help="cost of one layer from a LayerSpec JSON file")
    p.add_argument("--spec", required=True)
    p.add_argument("--hw", default="32x32")
    p.add_argument("--no-bias", action="store_true", help="ignore bias parameters")
    _common(p)
    p.set_defaults(func=cmd_cost_layer)
    p = cost_sub.add_parser("model", help="cost of a zoo architecture")
    _model_opts(p)
    p.add_argument("--per-layer", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_cost_model)
    p = cost_sub.add_parser("comm", help="per-iteration gradient communication volume")
    p.add_argument("--grads", required=True, type=float)
    p.add_argument("--gpus", required=True, type=int)
    p.add_argument("--mode", default="ddp", type=str.lower, choices=("dp", "ddp"))
    _common(p)
    p.set_defaults(func=cmd_cost_comm)

    p = sub.add_parser("verify", help="run self-verification suites")
    p.add_argument("--suite", default="all", choices=("all",) + SUITES)
    p.add_argument("--instances", type=int)
    p.add_argument("--eps", type=float, default=1e-5)
    _common(p)
    p.set_defaults(func=cmd_verify)

    bench = sub.add_parser("bench", help="wall-clock micro-benchmarks")
    bench_sub = bench.add_subparsers(dest="target", required=True, parser_class=_Parser)
    for name, fn in (("module", cmd_bench_module), ("compare", cmd_bench_compare)):
        p = bench_sub.add_parser(name)
        p.add_argument("--preset", default="module512", choices=("module512",))
        if name == "module":
            p.add_argument("--variant", default="groupnl", choices=sorted(BENCH_VARIANTS))
            p.add_argument("--spec", help="LayerSpec JSON file instead of the preset")
            p.add_argument("--hw", default="32x32")
            p.add_argument("--batch", type=int, default=1)
            p.add_argument("--fresh-inputs", action="store_true")
        else:
            p.add_argument("--variants", default="vanilla,ghost,sinefm,groupnl")
        p.add_argument("--r", type=int, default=2)
        p.add_argument("--g", type=int, default=4)
        p.add_argument("--iters", type=int, default=100)
        p.add_argument("--warmup", type=int, default=10)
        _common(p)
        p.set_defaults(func=fn)

    train = sub.add_parser("train", help="toy training and robustness sweeps")
    train_sub = train.add_subparsers(dest="target", required=True, parser_class=_Parser)
    p = train_sub.add_parser("toy", help="train a small model on synthetic data")
    _train_opts(p)
    _common(p)
    p.set_defaults(func=cmd_train_toy)
    p = train_sub.add_parser("robust", help="accuracy vs corruption severity")
    _train_opts(p)
    p.add_argument("--severity", default="1..5")
    p.add_argument("--kinds", help="comma-separated corruption kinds (default: all)")
    p.add_argument("--seeds", type=int, default=3)
    _common(p)
    p.set_defaults(func=cmd_train_robust)
    return parser


def apply_config(args, parser_defaults):
    """Overlay values from ``args.config`` onto parsed flags; unknown keys are errors."""
    if not args.config:
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except OSError as e:
        raise InvalidSpec(f"cannot read config: {e.strerror}", field="config") from None
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"invalid JSON ({e.msg} at line {e.lineno})", field="config") from None
    if not isinstance(data, dict):
        raise InvalidSpec("config must be a JSON object", field="config")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command", "target", "config") or dest not in parser_defaults:
            raise InvalidSpec(f"unknown option {key!r}", field=f"config.{key}")
        setattr(args, dest, value)
    return args


def _leaf_defaults(parser, argv):
    """Option dests known to the leaf subparser selected by ``argv``."""
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    p, rest = parser, list(argv)
    while action is not None:
        name = next((t for t in rest if not t.startswith("-")), None)
        p = action.choices[name]
        rest = rest[rest.index(name) + 1:]
        action = next((a for a in p._actions if isinstance(a, argparse._SubParsersAction)), None)
    return {a.dest for a in p._actions}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = apply_config(args, _leaf_defaults(parser, argv))
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            result = args.func(args)
        text = render(result, args.format)
        if args.output:
            Path(args.output).write_text(text + "\n")
        else:
            print(text)
        if args.func is cmd_verify and not result[0]["passed"]:
            return 1
        return 0
    except (CliError, GroupNLError) as e:
        print(f"groupnl: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - last-resort boundary
        print(f"groupnl: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
