"""``slicekit`` command line: profile, bench, plan, insert-tl, train, split,
serve-edge, run-device, experiment and report.

Every command checks its arguments and inputs before writing anything. Domain
errors exit with the ``exit_code`` of their class; usage errors exit with 2.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from slicekit.benchmark import ResourceProfile, benchmark_model, load_bench, save_records
from slicekit.errors import InvalidSplit, NotTlEligible, ParseError, SliceKitError
from slicekit.graph import (LayerGraph, enumerate_split_points, load_model, make_synthetic_model,
                            random_input, save_model, slice_graph)
from slicekit.netem import ENV_VAR, parse_profile
from slicekit.offloader import (EdgeServer, ExperimentResult, build_registry,
                                device_plan, format_summary, load_raw_log, raw_log_csv,
                                run_experiment, serve, summary_csv)
from slicekit.planner import Constraints, Variant, candidates, format_report, plan_csv, rank
from slicekit.preprocessor import (TLModel, TrainConfig, insert_tl, make_toy_dataset, split_model,
                                   strip_tl, tl_name, train)
from slicekit.tensor import DeviceTL, EdgeTL

log = logging.getLogger("slicekit")

DEFAULT_NET = "30mbps/30ms"
USAGE_ERROR = 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument helpers
# ---------------------------------------------------------------------------

def _address(text: str):
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    try:
        p = int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port {port!r}") from None
    if not 0 <= p <= 65535:
        raise argparse.ArgumentTypeError(f"port {p} outside 0..65535")
    return host, p


def _scale(text: str) -> float:
    v = float(text)
    if not v >= 1:
        raise argparse.ArgumentTypeError("compute scale must be >= 1")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _net(args):
    """Flag, then the environment variable, then the default."""
    spec = args.net or os.environ.get(ENV_VAR) or DEFAULT_NET
    return parse_profile(spec)


def _model_from_args(args) -> LayerGraph:
    if args.model_file:
        return load_model(args.model_file)
    return make_synthetic_model(args.model, args.seed)


def _as_tl_model(graph: LayerGraph) -> Optional[TLModel]:
    """Recognise a graph holding a DeviceTL/EdgeTL pair as a TL model."""
    at = [i for i, layer in enumerate(graph.layers) if isinstance(layer, DeviceTL)]
    if not at:
        return None
    d = at[0]
    if len(at) > 1 or d == 0 or d + 1 >= graph.n or not isinstance(graph.layers[d + 1], EdgeTL):
        raise InvalidSplit(f"{graph.name} does not hold exactly one DeviceTL/EdgeTL pair")
    split = d - 1
    base_name = graph.name
    suffix = tl_name("", split)
    if base_name.endswith(suffix) and len(base_name) > len(suffix):
        base_name = base_name[: -len(suffix)]
    stub = TLModel(graph, split, graph)
    base = strip_tl(stub).renamed(base_name)
    return TLModel(base, split, graph)


def _resolve(args):
    """``(base graph, TLModel or None)`` for --model / --model-file."""
    graph = _model_from_args(args)
    tl = _as_tl_model(graph)
    return (tl.base, tl) if tl else (graph, None)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _profiles(args):
    device = ResourceProfile("device", getattr(args, "device_scale", 1.0))
    edge = ResourceProfile("edge", getattr(args, "edge_scale", 1.0))
    return device, edge


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_profile(args) -> int:
    graph = _model_from_args(args)
    rows = [["split", "kind", "output shape", "wire bytes", "tl_eligible"]]
    for p in enumerate_split_points(graph):
        rows.append([str(p.index), p.kind, "x".join(map(str, p.output_shape)),
                     str(p.output_bytes), "yes" if p.tl_eligible else "no"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    print(f"model {graph.name}  input {'x'.join(map(str, graph.input_shape))}  units {graph.n}")
    for k, r in enumerate(rows):
        print("  ".join(v.rjust(w) for v, w in zip(r, widths)).rstrip())
        if k == 0:
            print("  ".join("-" * w for w in widths))
    return 0


def cmd_bench(args) -> int:
    graph = _model_from_args(args)
    device, edge = _profiles(args)
    out = Path(args.out) / f"{graph.name}.bench.txt"
    records = benchmark_model(graph, device, edge, random_input(graph, args.seed), args.reps)
    save_records(out, records, graph.name, device, edge)
    print(out)
    return 0


def _constraints(args) -> Constraints:
    return Constraints(min_split_index=args.min_split,
                       max_total_latency_us=getattr(args, "max_total", None),
                       variant=Variant(args.variant))


def _plan(bench_path, args):
    meta, records = load_bench(bench_path)
    return meta, records, rank(records, _net(args), _constraints(args), str(bench_path))


def cmd_plan(args) -> int:
    _, _, plan = _plan(args.bench, args)
    text = format_report(plan)
    if args.out:
        _write(Path(args.out) / "plan.txt", text)
        _write(Path(args.out) / "plan.csv", plan_csv(plan))
    sys.stdout.write(text)
    return 0


def cmd_insert_tl(args) -> int:
    graph = _model_from_args(args)
    model = insert_tl(graph, args.split)
    print(save_model(model.graph, Path(args.out) / f"{model.graph.name}.slk"))
    return 0


def cmd_train(args) -> int:
    graph = _model_from_args(args)
    classes = graph.output_shape[0]
    if graph.output_shape[1:] != (1, 1) or not 2 <= classes <= 10:
        raise UsageError(f"{graph.name} outputs {graph.output_shape}; training needs (C, 1, 1) "
                         f"with 2 <= C <= 10")
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed)
    data = make_toy_dataset(args.seed, classes=classes)
    trained, tlog = train(graph, data, cfg)
    out = Path(args.out)
    path = save_model(trained, out / f"{graph.name}.trained.slk")
    _write(out / f"{graph.name}.train.csv", tlog.to_csv())
    print(f"{path}  val_acc {tlog.final.val_acc:.4f}")
    return 0


def cmd_split(args) -> int:
    graph, tl = _resolve(args)
    if tl is not None:
        if args.split is not None and args.split != tl.split_index:
            raise InvalidSplit(f"model holds its TL pair at split {tl.split_index}, not {args.split}")
        head, tail = split_model(tl)
        name = tl.graph.name
    else:
        if args.split is None:
            raise UsageError("--split is required for a model without a TL pair")
        if not 0 <= args.split <= graph.n - 2:
            raise InvalidSplit(f"split {args.split} is not an interior split of {graph.name} "
                               f"(0..{graph.n - 2})")
        head, tail = slice_graph(graph, args.split)
        name = graph.name
    out = Path(args.out)
    print(save_model(head, out / f"{name}.head.slk"))
    print(save_model(tail, out / f"{name}.tail.slk"))
    return 0


def cmd_serve_edge(args) -> int:
    graph, tl = _resolve(args)
    _, edge = _profiles(args)
    tl_graphs = {tl.split_index: tl.graph} if tl else None
    registry = build_registry(graph, tl_graphs)
    log.info("serving %d tails of %s on %s:%d", len(registry), graph.name, *args.addr)
    serve(registry, args.addr, edge)
    return 0


def _variants(args, graph: LayerGraph, split: int) -> List[bool]:
    eligible = any(p.index == split and p.tl_eligible for p in enumerate_split_points(graph))
    v = Variant(args.variant)
    out = []
    if v is not Variant.TL:
        out.append(False)
    if v is not Variant.NO_TL and eligible:
        out.append(True)
    return out


def _emit_results(results: Sequence[ExperimentResult], planned, out: Optional[str]) -> None:
    text = format_summary(results, planned)
    if out:
        d = Path(out)
        _write(d / "raw_log.csv", raw_log_csv(results))
        _write(d / "summary.txt", text)
        _write(d / "summary.csv", summary_csv(results, planned))
    sys.stdout.write(text)


def cmd_run_device(args) -> int:
    graph, tl = _resolve(args)
    net = _net(args)
    if args.variant == "both":
        raise UsageError("run-device takes --variant tl or no-tl")
    use_tl = args.variant == "tl"
    if tl is not None and use_tl and tl.split_index != args.split:
        raise InvalidSplit(f"model holds its TL pair at split {tl.split_index}, not {args.split}")
    device, _ = _profiles(args)
    tl_graph = tl.graph if tl is not None and use_tl else None
    # validates split and variant before any connection is made
    device_plan(graph, args.split, use_tl, tl_graph)
    res = run_experiment(graph, args.split, use_tl, net, args.requests, device=device,
                         address=args.addr, tl_graph=tl_graph, seed=args.seed)
    _emit_results([res], None, args.out)
    return 0


def _planned_map(records, net):
    return {(c.split_index, str(c.variant)): c for c in candidates(records, net, Variant.BOTH)}


def cmd_experiment(args) -> int:
    graph, tl = _resolve(args)
    if tl is not None:
        raise UsageError("experiment takes a base model; it inserts the TL pair itself")
    net = _net(args)
    constraints = _constraints(args)
    points = {p.index for p in enumerate_split_points(graph)}
    if args.split is not None and args.split not in points:
        raise InvalidSplit(f"split {args.split} outside -1..{graph.n - 1}")
    device, edge = _profiles(args)
    out = Path(args.out) if args.out else None

    records = benchmark_model(graph, device, edge, random_input(graph, args.seed), args.reps)
    if out:
        save_records(out / f"{graph.name}.bench.txt", records, graph.name, device, edge)
    plan = rank(records, net, constraints, f"{graph.name} (in-process)")
    report = format_report(plan)
    sys.stdout.write(report)
    if out:
        _write(out / "plan.txt", report)
        _write(out / "plan.csv", plan_csv(plan))

    if args.split is not None:
        splits = [args.split]
    else:
        picks = [plan.best(v) for v in (Variant.NO_TL, Variant.TL)]
        splits = sorted({c.split_index for c in picks if c is not None})
    jobs = [(s, t) for s in splits for t in _variants(args, graph, s)]
    if not jobs:
        raise NotTlEligible(f"no {args.variant} plan to run at split(s) {splits}")

    results = []
    # one server for the whole run; every tail is registered
    with EdgeServer(build_registry(graph), edge=edge) as server:
        for s, use_tl in jobs:
            log.info("running split %d %s", s, "tl" if use_tl else "no-tl")
            results.append(run_experiment(graph, s, use_tl, net, args.requests, device=device,
                                          edge=edge, address=server.address, seed=args.seed))
    print()
    _emit_results(results, _planned_map(records, net), args.out)
    return 0


def cmd_report(args) -> int:
    if not args.bench and not args.log:
        raise UsageError("report needs --bench PATH and/or --log PATH")
    if args.log:
        results = load_raw_log(Path(args.log).read_text(encoding="utf-8"))
        planned = None
        if args.bench:
            _, records = load_bench(args.bench)
            nets = {str(r.net) for r in results}
            if len(nets) != 1:
                raise ParseError(f"raw log mixes networks {sorted(nets)}")
            planned = _planned_map(records, results[0].net)
        text = format_summary(results, planned)
        if args.out:
            _write(Path(args.out) / "summary.csv", summary_csv(results, planned))
    else:
        _, _, plan = _plan(args.bench, args)
        text = format_report(plan)
        if args.out:
            _write(Path(args.out) / "plan.csv", plan_csv(plan))
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--model", metavar="NAME", help="builtin model (tiny-cnn-8, branchy-12, deep-20)")
    g.add_argument("--model-file", metavar="PATH", help="model text file")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="weights, inputs and training seed (default 0)")


def _add_net(p):
    p.add_argument("--net", metavar="SPEC",
                   help=f"<n>mbps/<n>ms or 'unlimited'; else ${ENV_VAR}, else {DEFAULT_NET}")


def _add_plan_filters(p, variants=("tl", "no-tl", "both")):
    p.add_argument("--min-split", type=int, metavar="N", help="lowest split index allowed")
    p.add_argument("--max-total", type=int, metavar="US", help="latency budget in µs")
    p.add_argument("--variant", choices=variants, default="both")


def _add_scales(p, device=True, edge=True):
    if device:
        p.add_argument("--device-scale", type=_scale, default=1.0, metavar="X",
                       help="slow device compute by this factor (default 1)")
    if edge:
        p.add_argument("--edge-scale", type=_scale, default=1.0, metavar="X",
                       help="slow edge compute by this factor (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicekit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<command>")

    p = sub.add_parser("profile", help="list split points of a model")
    _add_model(p)
    _add_seed(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="benchmark every split point and write a record file")
    _add_model(p)
    _add_seed(p)
    p.add_argument("--reps", type=int, default=20, metavar="N", help="repetitions (>= 20)")
    p.add_argument("--out", default=".", metavar="DIR")
    _add_scales(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plan", help="rank split plans from a record file")
    p.add_argument("--bench", required=True, metavar="PATH")
    _add_net(p)
    _add_plan_filters(p)
    p.add_argument("--out", metavar="DIR", help="also write plan.txt and plan.csv")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("insert-tl", help="insert the transfer layer pair after a split")
    _add_model(p)
    _add_seed(p)
    p.add_argument("--split", type=int, required=True, metavar="N")
    p.add_argument("--out", default=".", metavar="DIR")
    p.set_defaults(func=cmd_insert_tl)

    p = sub.add_parser("train", help="train a model on the toy dataset")
    _add_model(p)
    _add_seed(p)
    p.add_argument("--epochs", type=_positive, default=30, metavar="N")
    p.add_argument("--lr", type=float, default=0.001, metavar="RATE")
    p.add_argument("--out", default=".", metavar="DIR")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("split", help="write head and tail model files")
    _add_model(p)
    _add_seed(p)
    p.add_argument("--split", type=int, metavar="N", help="required unless the model holds a TL pair")
    p.add_argument("--out", default=".", metavar="DIR")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("serve-edge", help="run the edge server in the foreground")
    _add_model(p)
    _add_seed(p)
    p.add_argument("--addr", type=_address, default=("127.0.0.1", 7070), metavar="HOST:PORT")
    _add_scales(p, device=False)
    p.set_defaults(func=cmd_serve_edge)

    p = sub.add_parser("run-device", help="send inference requests to a running edge server")
    _add_model(p)
    _add_seed(p)
    _add_net(p)
    p.add_argument("--split", type=int, required=True, metavar="N")
    p.add_argument("--variant", choices=("tl", "no-tl"), default="no-tl")
    p.add_argument("--addr", type=_address, default=("127.0.0.1", 7070), metavar="HOST:PORT")
    p.add_argument("--requests", type=int, default=30, metavar="N", help="requests (>= 30)")
    p.add_argument("--out", metavar="DIR", help="also write raw_log.csv and summary files")
    _add_scales(p, edge=False)
    p.set_defaults(func=cmd_run_device)

    p = sub.add_parser("experiment", help="bench, plan and run against an in-process edge server")
    _add_model(p)
    _add_seed(p)
    _add_net(p)
    _add_plan_filters(p)
    p.add_argument("--split", type=int, metavar="N", help="run this split instead of the best plans")
    p.add_argument("--reps", type=int, default=20, metavar="N", help="benchmark repetitions (>= 20)")
    p.add_argument("--requests", type=int, default=30, metavar="N", help="requests per plan (>= 30)")
    p.add_argument("--out", metavar="DIR", help="write the record file, plan and logs here")
    _add_scales(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="rebuild plan or run tables from saved files")
    p.add_argument("--bench", metavar="PATH")
    p.add_argument("--log", metavar="PATH", help="raw_log.csv from run-device or experiment")
    _add_net(p)
    _add_plan_filters(p)
    p.add_argument("--out", metavar="DIR", help="also write the CSV form")
    p.set_defaults(func=cmd_report)
    return parser


def _validate(args) -> None:
    reps = getattr(args, "reps", None)
    if reps is not None and reps < 20:
        raise UsageError(f"--reps must be >= 20, got {reps}")
    requests = getattr(args, "requests", None)
    if requests is not None and requests < 30:
        raise UsageError(f"--requests must be >= 30, got {requests}")
    if getattr(args, "net", None) is not None or args.command in ("plan", "run-device", "experiment"):
        _net(args)  # a bad profile fails before any work starts
    for flag in ("bench", "log", "model_file"):
        path = getattr(args, flag, None)
        if path and not Path(path).is_file():
            raise ParseError(f"--{flag.replace('_', '-')} {path}: no such file")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        _validate(args)
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"slicekit {args.command}: error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except SliceKitError as e:
        print(f"slicekit {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"slicekit {args.command}: error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
