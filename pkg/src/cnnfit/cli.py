"""Command line driver: parse, explore, build, emulate.

Exit codes: 0 success, 2 user/input error, 3 no feasible design option,
4 internal invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cost import CostModel, HardwareOption, get_target, load_catalog
from .dse import AgentConfig, Thresholds, brute_force, legal_space, rl_explore
from .emit import emit, load, make_bundle
from .errors import CnnfitError, NoFeasibleOption, ScheduleGap
from .ir import dump_ir, fuse_stages, lower
from .onnx_wire import decode_model, encode_model
from .quant import QuantSpec, QuantTable, load_quant_config
from .sim import choose_shifts, read_input, run_network, softmax, write_input
from .zoo import ChainBuilder, alexnet

EXIT_OK, EXIT_USER, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 2, 3, 4


def _load_graph(path: str):
    data = Path(path).read_bytes()
    graph = decode_model(data)
    return data, graph


def _stages(path: str):
    data, graph = _load_graph(path)
    return data, graph, fuse_stages(lower(graph))


def _thresholds(text: str | None) -> Thresholds:
    return Thresholds() if text is None else Thresholds.parse(text)


def _explore(stages, args, out) -> tuple[HardwareOption, dict]:
    target = get_target(args.target, load_catalog(args.catalog))
    th = _thresholds(args.thresholds)
    space = legal_space(stages)
    model = CostModel()
    strategies = ["bf", "rl"] if getattr(args, "compare", False) else [args.strategy]
    results = {}
    for name in strategies:
        if name == "bf":
            results[name] = brute_force(space, stages, target, th, model)
        else:
            results[name] = rl_explore(space, stages, target, th, AgentConfig(), args.seed, model)
    return results[strategies[0]].h_best, results


# --------------------------------------------------------------------------
# subcommands


def cmd_parse(args, out) -> int:
    _, graph = _load_graph(args.model)
    layers = lower(graph)
    out.write(dump_ir(layers))
    stages = fuse_stages(layers)
    out.write(f"# {len(layers)} layers, {len(stages)} pipeline stages\n")
    for diag in graph.diagnostics:
        out.write(f"# warning: {diag}\n")
    return EXIT_OK


def cmd_explore(args, out) -> int:
    _, _, stages = _stages(args.model)
    space = legal_space(stages)
    out.write(f"target {args.target.lower()}\n")
    out.write(f"space ni={list(space.ni_candidates)} nl={list(space.nl_candidates)} options={len(space)}\n")
    _, results = _explore(stages, args, out)
    for name, res in results.items():
        out.write(
            f"{name}: h_best {res.h_best} f_max {res.f_max:.3f} evaluations {res.evaluations} "
            f"steps {res.steps} evaluations_to_best {res.evaluations_to_best}\n"
        )
        if args.trace:
            path = Path(args.trace)
            if len(results) > 1:
                path = path.with_name(f"{path.stem}.{name}{path.suffix}")
            path.write_text(res.render_trace())
    if len(results) == 2:
        bf, rl = results["bf"], results["rl"]
        out.write(
            f"compare: evaluations rl/bf {rl.evaluations}/{bf.evaluations} = {rl.evaluations / bf.evaluations:.3f}; "
            f"to best rl/bf {rl.evaluations_to_best}/{bf.evaluations_to_best}; "
            f"agree {'yes' if rl.h_best == bf.h_best else 'no'}\n"
        )
    return EXIT_OK


def _quant_table(args, stages) -> QuantTable:
    if args.quant_config:
        return load_quant_config(args.quant_config, default_m=args.m, bias_bits=args.bias_bits)
    if args.calibrate:
        rng = np.random.default_rng(args.seed)
        c, h, w = stages[0].in_shape.c, stages[0].in_shape.h, stages[0].in_shape.w
        samples = [rng.standard_normal((c, h, w)) for _ in range(args.calibrate)]
        return choose_shifts(stages, samples, headroom=1.0, bias_bits=args.bias_bits, drift_safe=False)
    return QuantTable(QuantSpec.uniform(args.m, args.bias_bits))


def cmd_build(args, out) -> int:
    data, _, stages = _stages(args.model)
    if args.option:
        ni, nl = (int(v) for v in args.option.split(","))
        option = HardwareOption(ni, nl)
    elif args.target:
        option, _ = _explore(stages, args, out)
    else:
        raise CnnfitError("build needs --option ni,nl or --target to explore")
    quant = _quant_table(args, stages)
    bundle = make_bundle(data, stages, option, quant)
    path = emit(bundle, args.out)
    out.write(f"option ni={option.n_i} nl={option.n_l}\n")
    out.write(f"stages {len(stages)}\n")
    out.write(f"manifest {path}\n")
    return EXIT_OK


def cmd_emulate(args, out) -> int:
    bundle = load(args.bundle)
    x = read_input(args.input)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    logits, reports = run_network(bundle.stages, x, bundle.option, bundle.quant)
    out.write(f"option ni={bundle.option.n_i} nl={bundle.option.n_l}\n")
    out.write(f"{'stage':>5} {'kind':<5} {'macs':>12} {'passes':>7} {'saturations':>11}\n")
    for r in reports:
        out.write(f"{r.stage:>5} {r.kind:<5} {r.mac_count:>12} {r.passes:>7} {r.saturation_events:>11}\n")
    out.write(f"total macs {sum(r.mac_count for r in reports)}\n")
    vals = logits.values.ravel()
    out.write(f"logits m={logits.m} " + " ".join(str(int(v)) for v in vals) + "\n")
    probs = softmax(logits)
    order = np.argsort(-vals.astype(np.int64), kind="stable")[: args.top_k]
    for rank, cls in enumerate(order, 1):
        out.write(f"top{rank} class={cls} logit={vals[cls] * 2.0 ** -logits.m:.4f} p={probs[cls]:.4f}\n")
    return EXIT_OK


def cmd_make_model(args, out) -> int:
    if args.arch == "alexnet":
        builder = alexnet(args.input_size)
    else:
        s = args.input_size
        builder = (
            ChainBuilder((3, s, s)).conv(8, 3, p=1).maxpool(2).conv(16, 3, p=1).maxpool(2).flatten().gemm(10)
        )
    graph = builder.graph(seed=args.seed, dtype=args.dtype)
    Path(args.out).write_bytes(encode_model(graph))
    out.write(f"wrote {args.out}: {args.arch} input 3x{args.input_size}x{args.input_size}\n")
    return EXIT_OK


def cmd_make_input(args, out) -> int:
    dims = tuple(int(v) for v in args.shape.split(","))
    rng = np.random.default_rng(args.seed)
    x = np.zeros(dims) if args.zero else rng.standard_normal(dims)
    write_input(args.out, x)
    out.write(f"wrote {args.out}: dims {' '.join(map(str, dims))}\n")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cnnfit", description="CNN to FPGA pipeline configuration toolchain")
    p.add_argument("--version", action="version", version=f"cnnfit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("parse", help="decode and lower a model, print the IR")
    sp.add_argument("model")
    sp.set_defaults(func=cmd_parse)

    def explore_flags(sp, required_target):
        sp.add_argument("--target", required=required_target, help="board name from the target catalog")
        sp.add_argument("--thresholds", help="utilization limits in percent: T or l,d,m,r")
        sp.add_argument("--strategy", choices=("bf", "rl"), default="bf")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--catalog", help="target catalog file (default: $CNNFIT_TARGETS or built in)")

    sp = sub.add_parser("explore", help="search the (n_i, n_l) design space")
    sp.add_argument("model")
    explore_flags(sp, True)
    sp.add_argument("--compare", action="store_true", help="run both strategies and compare")
    sp.add_argument("--trace", help="write the per-step exploration trace here")
    sp.set_defaults(func=cmd_explore)

    sp = sub.add_parser("build", help="quantize and write the design artifact")
    sp.add_argument("model")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--option", help="fixed design option ni,nl (skips exploration)")
    explore_flags(sp, False)
    sp.add_argument("--quant-config", help="per-layer shift table")
    sp.add_argument("--m", type=int, default=6, help="uniform shift when no table is given")
    sp.add_argument("--bias-bits", type=int, choices=(8, 32), default=8)
    sp.add_argument("--calibrate", type=int, default=0, metavar="N",
                    help="pick per-layer shifts from N random float runs")
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("emulate", help="run a built design on an input file")
    sp.add_argument("bundle")
    sp.add_argument("input")
    sp.add_argument("--top-k", type=int, default=5)
    sp.set_defaults(func=cmd_emulate)

    sp = sub.add_parser("make-model", help="write a random-weight ONNX model")
    sp.add_argument("out")
    sp.add_argument("--arch", choices=("alexnet", "small"), default="alexnet")
    sp.add_argument("--input-size", type=int, default=224)
    sp.add_argument("--dtype", choices=("float32", "int8"), default="float32")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_model)

    sp = sub.add_parser("make-input", help="write a raw float32 input file")
    sp.add_argument("out")
    sp.add_argument("--shape", default="3,224,224", help="C,H,W")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--zero", action="store_true")
    sp.set_defaults(func=cmd_make_input)
    return p


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=err)
    try:
        return args.func(args, out)
    except NoFeasibleOption as exc:
        err.write(f"does not fit: {exc}\n")
        return EXIT_INFEASIBLE
    except ScheduleGap as exc:
        err.write(f"internal error: {exc}\n")
        return EXIT_INTERNAL
    except (CnnfitError, OSError, ValueError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        err.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
