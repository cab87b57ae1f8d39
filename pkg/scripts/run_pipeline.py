"""Run the full desk-scale pipeline end to end.

Generates synthetic assets and data, trains the three networks, reconstructs
the validation split, and prints both evaluation protocols. Scale knobs are
exposed as flags; the defaults finish in a few minutes on a laptop CPU.

    python3 scripts/run_pipeline.py --out out/demo --seed 7
"""

import argparse
import sys

from facediff import headmodel, synthdata
from facediff.pipeline import (
    NetTrainConfig,
    RankTrainConfig,
    RunConfig,
    cmd_evaluate,
    cmd_reconstruct,
    cmd_synth_data,
    cmd_train,
    write_rank_report,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/demo")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--identities", type=int, default=24)
    ap.add_argument("--samples-per-identity", type=int, default=4)
    ap.add_argument("--train-steps", type=int, default=800)
    ap.add_argument("--rank-steps", type=int, default=150)
    ap.add_argument("--n-samples", type=int, default=20)
    ap.add_argument("--diffusion-T", type=int, default=100)
    ap.add_argument("--infer-steps", type=int, default=25)
    args = ap.parse_args()

    net = NetTrainConfig(steps=args.train_steps, batch=64, lr=3e-4,
                         channels=(16, 32, 64), T=args.diffusion_T)
    config = RunConfig(
        out_dir=args.out, seed=args.seed, n_samples=args.n_samples,
        step_count=args.infer_steps,
        assets=headmodel.SynthAssetConfig(seed=args.seed),
        data=synthdata.SynthConfig(n_identities=args.identities,
                                   samples_per_identity=args.samples_per_identity,
                                   occlusion_rate=0.5, seed=args.seed),
        idgen=net, expgen=net,
        idrank=RankTrainConfig(steps=args.rank_steps, n_candidates=16,
                               resample_every=4, sample_steps=args.infer_steps),
    )

    print("writing assets and dataset", flush=True)
    cmd_synth_data(config)
    for network in ("idgen", "expgen", "idrank"):
        print(f"training {network}", flush=True)
        cmd_train(network, config)
    print("reconstructing validation inputs", flush=True)
    results = cmd_reconstruct(config)
    print(f"wrote {len(results)} reconstruction sets")
    path, rows = write_rank_report(config, "model")
    mean_sel = sum(r["selected_distance"] for r in rows) / len(rows)
    mean_avg = sum(r["mean_distance"] for r in rows) / len(rows)
    print(f"rank report: selected {mean_sel:.5f} vs pool average {mean_avg:.5f} ({path})")
    for protocol in ("now_style", "co545_style"):
        report, _, _ = cmd_evaluate(protocol, config)
        s = report.summary()
        print(f"{protocol}: median {s['median']:.3f} mean {s['mean']:.3f} "
              f"std {s['std']:.3f} mm over {s['count']} pairs")
    return 0


if __name__ == "__main__":
    sys.exit(main())
