"""Command-line front ends.

    sweep run --config sweep.json --out results/ [--jobs N]
    sweep report --in results/
    sweep analyze --in results/ [--feature-probe N]
    adapter init --weights w.smx --start S --rank R [--alpha A] --out dir/
    analyze delta --before w0.smx --after wft.smx --out report.csv
"""

import argparse
import json
import os
import sys

from .adapter import SliceSpec, init_slice_adapter, save_adapter
from .matio import read_matrix
from .spectral import param_space_delta, write_delta_csv, write_summary_json
from .sweep import (
    analyze_checkpoints,
    load_config_from_manifest,
    load_sweep_config,
    read_results_csv,
    run_sweep,
    ushape_report,
)


def sweep_main(argv=None):
    parser = argparse.ArgumentParser(prog="sweep",
                                     description="run and inspect adapter sweeps")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a sweep config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--jobs", type=int, default=1)

    p_rep = sub.add_parser("report", help="U-shape report from results.csv")
    p_rep.add_argument("--in", dest="in_dir", required=True)

    p_ana = sub.add_parser("analyze", help="spectral analysis of checkpoints")
    p_ana.add_argument("--in", dest="in_dir", required=True)
    p_ana.add_argument("--feature-probe", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "run":
        cfg = load_sweep_config(args.config, out_dir=args.out)
        rows, _ = run_sweep(cfg, jobs=args.jobs)
        print(f"wrote {len(rows)} rows to {os.path.join(args.out, 'results.csv')}")
    elif args.command == "report":
        rows = read_results_csv(os.path.join(args.in_dir, "results.csv"))
        report = ushape_report(rows)
        with open(os.path.join(args.in_dir, "ushape.json"), "w") as f:
            json.dump(report, f, indent=2)
            f.write("\n")
        for s, mf, ms in zip(report["starts"], report["mean_forgetting"],
                             report["mean_acc_sum"]):
            print(f"s={s:>5}  forgetting={mf:.4f}  acc_sum={ms:.4f}")
        print(f"interior minimum at s={report['interior_min_start']}, "
              f"gap={report['gap']:.4f}, p_first={report['p_vs_first']:.4g}, "
              f"p_last={report['p_vs_last']:.4g}")
        print("U-shape detected" if report["ushape_detected"]
              else "U-shape not detected")
    elif args.command == "analyze":
        cfg = load_config_from_manifest(args.in_dir)
        analyze_checkpoints(cfg, feature_probe=args.feature_probe)
        print(f"analysis written under {os.path.join(args.in_dir, 'analysis')}")
    return 0


def adapter_main(argv=None):
    parser = argparse.ArgumentParser(prog="adapter",
                                     description="slice-adapter utilities")
    sub = parser.add_subparsers(dest="command", required=True)
    p_init = sub.add_parser("init", help="initialize an adapter from a weight file")
    p_init.add_argument("--weights", required=True)
    p_init.add_argument("--start", type=int, required=True)
    p_init.add_argument("--rank", type=int, required=True)
    p_init.add_argument("--alpha", type=float, default=None)
    p_init.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    w = read_matrix(args.weights)
    state = init_slice_adapter(w, SliceSpec(args.start, args.rank, args.alpha))
    save_adapter(state, args.out)
    print(f"adapter for window [{args.start}, {args.start + args.rank}) "
          f"written to {args.out}")
    return 0


def analyze_main(argv=None):
    parser = argparse.ArgumentParser(prog="analyze",
                                     description="standalone spectral analysis")
    sub = parser.add_subparsers(dest="command", required=True)
    p_delta = sub.add_parser("delta", help="parameter-space delta of two weights")
    p_delta.add_argument("--before", required=True)
    p_delta.add_argument("--after", required=True)
    p_delta.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    delta = param_space_delta(read_matrix(args.before), read_matrix(args.after))
    write_delta_csv(args.out, delta)
    summary_path = os.path.splitext(args.out)[0] + ".json"
    payload = write_summary_json(summary_path, delta)
    print(f"diag_sum={payload['diag_sum']:.6g} "
          f"offdiag_sum={payload['offdiag_sum']:.6g} (unweighted), k={payload['k']}")
    return 0


if __name__ == "__main__":
    sys.exit(sweep_main())
