"""Command-line entry point: ``dropbp <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import baselines
from .cost import cost_report, measured_block_ratio
from .mechanism import sample_decisions, uniform_rates
from .model import Model, ModelConfig, forward_backward, load_checkpoint
from .sensitivity import added_sensitivity, allocate
from .tensor import FlopsMeter, NumericError, Rng
from .train import Diverged, compare_logs, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-units", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=256)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--mode", choices=("full", "peft"), default="full")
    p.add_argument("--adapter-rank", type=int, default=0)


def _model_config(a) -> ModelConfig:
    rank = a.adapter_rank or (8 if a.mode == "peft" else 0)
    return ModelConfig(a.n_units, a.d_model, a.d_ff, a.n_heads, a.vocab_size, a.seq_len, a.mode, rank)


def cmd_train(a) -> int:
    overrides = list(a.override)
    for flag, key in (("method", "method"), ("p_avg", "p_avg"), ("seed", "seed"), ("log", "log_path")):
        value = getattr(a, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    cfg = load_config(a.config, overrides)
    result = train(cfg)
    print(f"final val loss {result.final_val_loss:.6f}; "
          f"flops fw {result.meter.forward} bw {result.meter.backward}")
    return EXIT_OK


def cmd_cost_report(a) -> int:
    cfg = _model_config(a)
    n = cfg.n_layers
    rates = uniform_rates(n, a.p_avg, grid=None)
    measured = None
    if a.measure:
        small = cfg.replace(seq_len=a.measure_seq_len)
        model = Model.init(small, Rng(a.seed))
        rng = Rng(a.seed)
        tokens = rng.stream("tokens").integers(0, small.vocab_size, (a.batch_size, small.seq_len))
        base = FlopsMeter()
        forward_backward(model, tokens, tokens, meter=base)
        meter = FlopsMeter()
        for it in range(a.measure):
            d = sample_decisions(rates, it, rng).dropped
            forward_backward(model, tokens, tokens, decisions=d, meter=meter)
        measured = measured_block_ratio(meter, base, a.measure)
    print(cost_report(cfg, rates, a.batch_size, measured).table())
    return EXIT_OK


def _read_table(path) -> tuple[list[float], list[float]]:
    """Whitespace- or comma-separated rows of ``S F``; '#' starts a comment."""
    S, F = [], []
    fh = sys.stdin if path == "-" else open(path)
    with fh:
        for line in fh:
            line = line.split("#", 1)[0].replace(",", " ").split()
            if not line:
                continue
            if len(line) != 2:
                raise ValueError(f"expected two columns (S F), got {line}")
            S.append(float(line[0]))
            F.append(float(line[1]))
    return S, F


def cmd_allocate(a) -> int:
    S, F = _read_table(a.table)
    rates = allocate(S, F, a.p_avg)
    print("layer\tS\tF\trate")
    for i, (s, f, p) in enumerate(zip(S, F, rates.rates)):
        print(f"{i}\t{s:g}\t{f:g}\t{p:.1f}")
    keep = sum((1 - p) * f for p, f in zip(rates.rates, F))
    print(f"# budget {(1 - a.p_avg) * sum(F):g} kept {keep:g} added_sensitivity {added_sensitivity(rates, S):g}")
    return EXIT_OK


def cmd_analyze_paths(a) -> int:
    if a.checkpoint:
        model = load_checkpoint(a.checkpoint)
    else:
        model = Model.init(_model_config(a), Rng(a.seed).stream("model"))
    cfg = model.config
    rng = Rng(a.seed)
    tokens = rng.stream("paths-batch").integers(0, cfg.vocab_size, (a.batch_size, cfg.seq_len + 1))
    k_values = None if a.k is None else [int(k) for k in a.k.split(",")]
    report = baselines.path_gradient_analysis(model, tokens[:, :-1], tokens[:, 1:], k_values, a.reps, rng)
    print(f"# blocks {report.n_blocks} reps {a.reps} batch seed {a.seed}")
    print("k\tmean_norm\tweight\tweighted_total")
    for r in report.rows():
        print(f"{r['k']}\t{r['mean_norm']:.6e}\t{r['weight']:.6e}\t{r['weighted_total']:.6e}")
    return EXIT_OK


def cmd_count_submodules(a) -> int:
    exact = a.n_layers * (1 - a.p)
    depth = baselines.submodule_depth(a.n_layers, a.p)
    if abs(exact - depth) > 1e-9:
        print(f"# n_layers*(1-p) = {exact:g} floored to {depth}", file=sys.stderr)
    methods = ("freeze", "dropbp") if a.method == "both" else (a.method,)
    for m in methods:
        print(f"{m}\t{baselines.submodule_count(a.n_layers, a.p, m)}")
    return EXIT_OK


def cmd_compare_logs(a) -> int:
    diffs = compare_logs(a.log_a, a.log_b)
    if diffs:
        print(f"logs differ at lines {diffs[:10]}{' ...' if len(diffs) > 10 else ''}")
        return EXIT_USAGE
    print("logs identical (timestamps ignored)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dropbp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--method", choices=("baseline", "dropbp", "freeze", "layerdrop", "pld"))
    p.add_argument("--p-avg", dest="p_avg", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="JSON-lines log path")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cost-report", help="theoretical and measured FLOPs/memory ratios")
    _model_args(p)
    p.add_argument("--p-avg", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--measure", type=int, default=0, metavar="ITERS",
                   help="also meter this many sampled iterations on a short sequence")
    p.add_argument("--measure-seq-len", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cost_report)

    p = sub.add_parser("allocate", help="allocate drop rates from an S/F table")
    p.add_argument("table", help="file of 'S F' rows, or - for stdin")
    p.add_argument("--p-avg", type=float, required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("analyze-paths", help="input-gradient norm per path length")
    _model_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--k", help="comma-separated path lengths (default: all)")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze_paths)

    p = sub.add_parser("count-submodules", help="exact number of trainable submodules")
    p.add_argument("--n-layers", type=int, required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--method", choices=("freeze", "dropbp", "both"), default="both")
    p.set_defaults(func=cmd_count_submodules)

    p = sub.add_parser("compare-logs", help="compare two run logs ignoring timestamps")
    p.add_argument("log_a")
    p.add_argument("log_b")
    p.set_defaults(func=cmd_compare_logs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericError, Diverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
