"""Command line entry point: ``fediac run | compare | analyze``."""

import argparse
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    BoundInputs,
    InfeasibleSettingError,
    energy_head,
    expected_uploads,
    fit_power_law,
    gamma,
    min_bits,
    sample_probs,
    upload_probs,
    vote_prob,
)
from .compression import make_quant_config
from .experiment import ConfigError, load_config, run_experiment
from .report import SchemaError, format_table, read_metrics, summarize, write_summary

INFEASIBLE_HINT = ("raise 'max_bits', set 'bits' explicitly, or use smaller values in "
                   "'threshold' or 'candidates'")


def cmd_run(args):
    config = load_config(args.config)
    out = Path(args.out)
    try:
        paths = run_experiment(config, out)
    except InfeasibleSettingError as exc:
        raise InfeasibleSettingError(f"{exc}\nhint: {INFEASIBLE_HINT}") from exc
    runs = [read_metrics(p) for p in paths]
    write_summary(out / "summary.csv", runs, config.target_accuracy)
    print(format_table(summarize(runs, config.target_accuracy), config.target_accuracy))
    return 0


def cmd_compare(args):
    runs = [read_metrics(p) for p in args.csv]
    print(format_table(summarize(runs, args.target, args.reference), args.target))
    return 0


def read_magnitudes(path):
    values = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(abs(float(text)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a number: {text!r}") from None
    if len(values) < 2:
        raise ValueError(f"{path}: need at least 2 magnitudes")
    return np.sort(np.array(values))[::-1]


def cmd_analyze(args):
    mags = read_magnitudes(args.updates)
    dim = mags.size
    fit = fit_power_law(energy_head(mags, args.energy_frac))
    votes = args.votes or max(1, int(round(args.vote_frac * dim)))
    max_abs = args.max_abs or float(mags[0])
    inputs = BoundInputs(dim, votes, args.clients, args.threshold, fit)
    b_min = min_bits(inputs, max_abs)
    bits = args.bits or b_min
    quant = make_quant_config(bits, args.clients, max_abs)
    g = gamma(BoundInputs(dim, votes, args.clients, args.threshold, fit, quant))
    p = sample_probs(fit, dim)
    q = vote_prob(p, votes)
    r = upload_probs(inputs)
    out = sys.stdout
    out.write(f"# alpha={fit.alpha!r} phi={fit.phi!r} d={dim} k={votes} N={args.clients} "
              f"a={args.threshold} m={max_abs!r}\n")
    out.write(f"# b_min={b_min} bits={bits} gamma={g!r} "
              f"expected_uploads={expected_uploads(inputs)!r}\n")
    out.write("rank,magnitude,p,q,r\n")
    for i in range(dim):
        out.write(f"{i + 1},{float(mags[i])!r},{float(p[i])!r},{float(q[i])!r},"
                  f"{float(r[i])!r}\n")
    if not 0.0 < g < 1.0:
        print(f"warning: gamma={g:.4g} is outside (0, 1)", file=sys.stderr)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fediac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="summarise metrics CSVs per algorithm")
    compare.add_argument("csv", nargs="+")
    compare.add_argument("--target", type=float, default=None,
                         help="accuracy whose first crossing sets the traffic column")
    compare.add_argument("--reference", default=None,
                         help="algorithm the reductions are computed for")
    compare.set_defaults(func=cmd_compare)

    analyze = sub.add_parser("analyze", help="probabilities and bounds for a magnitude file")
    analyze.add_argument("--updates", required=True, help="one float per line")
    analyze.add_argument("--clients", type=int, default=20)
    analyze.add_argument("--threshold", type=int, default=3)
    analyze.add_argument("--votes", type=int, default=None)
    analyze.add_argument("--vote-frac", type=float, default=0.05)
    analyze.add_argument("--max-abs", type=float, default=None)
    analyze.add_argument("--bits", type=int, default=None)
    analyze.add_argument("--energy-frac", type=float, default=1.0,
                         help="fit only the head holding this share of squared mass")
    analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, InfeasibleSettingError, NotImplementedError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
