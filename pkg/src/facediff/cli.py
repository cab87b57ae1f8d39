"""Command-line surface for the reconstruction pipeline.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .gradcore import NonFiniteError
from .pipeline import (
    ConfigError,
    RunConfig,
    cmd_baseline_flame,
    cmd_evaluate,
    cmd_export_mesh,
    cmd_reconstruct,
    cmd_synth_data,
    cmd_train,
    write_rank_report,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser():
    p = argparse.ArgumentParser(prog="facediff",
                                description="Multi-hypothesis coefficient-space face reconstruction")
    p.add_argument("--config", metavar="PATH", help="run config JSON")
    p.add_argument("--seed", type=int, metavar="U64", help="master seed override")
    p.add_argument("--out", metavar="DIR", help="output directory override")
    p.add_argument("--n-samples", type=int, metavar="N", help="hypotheses per input (default 100)")
    p.add_argument("--steps", type=int, metavar="T", help="diffusion steps at inference")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", help="write synthetic assets and dataset")

    tp = sub.add_parser("train", help="train one network")
    tp.add_argument("network", choices=["idgen", "expgen", "idrank"])

    rp = sub.add_parser("reconstruct", help="full sample-rank-select-express flow")
    rp.add_argument("--inputs", nargs="*", help="validation input indices (default: all)")

    rr = sub.add_parser("rank-report", help="per-input ranking outcome CSV")
    rr.add_argument("--pool", choices=["model", "prior", "mixed"], default="model")
    rr.add_argument("--max-inputs", type=int)

    ep = sub.add_parser("evaluate", help="score reconstructions")
    ep.add_argument("protocol", choices=["now_style", "co545_style"])
    ep.add_argument("--max-inputs", type=int)

    bp = sub.add_parser("baseline-flame", help="coefficient-prior baseline draws")
    bp.add_argument("--max-inputs", type=int)

    xp = sub.add_parser("export-mesh", help="export one mesh as OBJ")
    xp.add_argument("output", help="OBJ path to write")
    xp.add_argument("--coeffs", help="coefficient JSON (beta/psi/theta)")
    return p


def load_config(args) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.n_samples is not None:
        overrides["n_samples"] = args.n_samples
    if args.steps is not None:
        overrides["step_count"] = args.steps
    return dataclasses.replace(config, **overrides) if overrides else config


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        if args.command == "synth-data":
            cmd_synth_data(config)
            print(f"wrote assets and dataset under {config.out_dir}")
        elif args.command == "train":
            cmd_train(args.network, config)
            print(f"wrote {config.ckpt_path(args.network)}")
        elif args.command == "reconstruct":
            results = cmd_reconstruct(config, args.inputs or None)
            print(f"wrote {len(results)} reconstruction sets under {config.out_dir}/reconstructions")
        elif args.command == "rank-report":
            path, rows = write_rank_report(config, args.pool, args.max_inputs)
            print(f"wrote {path} ({len(rows)} rows)")
        elif args.command == "evaluate":
            report, csv_path, json_path = cmd_evaluate(args.protocol, config, args.max_inputs)
            s = report.summary()
            print(f"{args.protocol}: median {s['median']:.4f} mean {s['mean']:.4f} "
                  f"std {s['std']:.4f} mm over {s['count']} pairs")
            print(f"wrote {csv_path} and {json_path}")
        elif args.command == "baseline-flame":
            path, rows = cmd_baseline_flame(config, args.max_inputs)
            print(f"wrote {path} ({len(rows)} rows)")
        elif args.command == "export-mesh":
            cmd_export_mesh(config, args.output, args.coeffs)
            print(f"wrote {args.output}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
