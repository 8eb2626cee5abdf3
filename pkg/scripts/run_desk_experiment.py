#!/usr/bin/env python3
"""Full desk-scale sweep: every heuristic x keep fraction x pooling, before
and after fine-tuning, averaged over seeds.

Produces, under --out:
  seed<N>/                    per-seed pipeline results (metrics.csv, models,
                              per-point layer reports)
  summary.csv                 seed-averaged mAP / recall@4 per sweep point
  layer_fractions.csv         per-layer remaining fraction for the h1 sweep
                              (seed 0), one row per (keep fraction, layer)

Runtime grows linearly in heuristics x fractions x poolings x seeds x epochs;
the default full sweep (4 x 5 x 2 x 3, 20 epochs) is a multi-hour run, so
trimmed sweeps are the normal way to use this, e.g.:

  python scripts/run_desk_experiment.py --out results/quick \
      --heuristics h1,h3 --keep 0.5,0.2 --poolings sqp --seeds 0 --epochs 5
"""

import argparse
import csv
import json
import sys
import time
from collections import defaultdict
from pathlib import Path

from convprune.cli import ExperimentConfig, run_pipeline
from convprune.dataset import RetrievalDataset, generate_dataset
from convprune.finetune import FinetuneConfig, train_baseline
from convprune.network import save_model, tinynet_architecture


def parse_args():
    p = argparse.ArgumentParser(description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default="", help="existing dataset dir (default: generate)")
    p.add_argument("--instances", type=int, default=40)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--heuristics", default="h1,h2,h3,h4")
    p.add_argument("--keep", default="0.5,0.4,0.3,0.2,0.1")
    p.add_argument("--poolings", default="sqp,rmac")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=20)
    return p.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]

    if args.data:
        data_dir = Path(args.data)
        RetrievalDataset.load(data_dir)
    else:
        data_dir = out / "data"
        if not (data_dir / "manifest.json").exists():
            print(f"generating dataset ({args.instances}x{args.images}) at {data_dir}")
            generate_dataset(data_dir, instances=args.instances,
                             images_per_instance=args.images, seed=0)
    dataset = RetrievalDataset.load(data_dir)

    # accumulate rows keyed by sweep point, then average over seeds
    acc = defaultdict(list)
    for seed in seeds:
        seed_dir = out / f"seed{seed}"
        baseline_path = seed_dir / "baseline"
        if not (baseline_path / "manifest.json").exists():
            t0 = time.time()
            model = train_baseline(tinynet_architecture(), dataset,
                                   FinetuneConfig(epochs=args.epochs, seed=seed))
            save_model(model, str(baseline_path))
            print(f"seed {seed}: baseline trained in {time.time() - t0:.0f}s")
        cfg = ExperimentConfig(
            heuristics=args.heuristics.split(","),
            keep_fractions=[float(t) for t in args.keep.split(",")],
            poolings=args.poolings.split(","),
            epochs=args.epochs, seed=seed,
            data=str(data_dir), model=str(baseline_path), out=str(seed_dir))
        t0 = time.time()
        run_pipeline(cfg)
        print(f"seed {seed}: sweep finished in {time.time() - t0:.0f}s")
        with open(seed_dir / "metrics.csv") as fh:
            for row in csv.DictReader(fh):
                key = (row["heuristic"], row["keep_fraction"], row["pooling"], row["phase"])
                acc[key].append((float(row["map"]), float(row["recall4"] or "nan")))

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["heuristic", "keep_fraction", "pooling", "phase",
                         "map_mean", "recall4_mean", "seeds"])
        for key in sorted(acc):
            vals = acc[key]
            map_mean = sum(v[0] for v in vals) / len(vals)
            r4_mean = sum(v[1] for v in vals) / len(vals)
            writer.writerow([*key, f"{map_mean:.6f}", f"{r4_mean:.6f}", len(vals)])
    print(f"wrote {out / 'summary.csv'}")

    # per-layer remaining fractions for the h1 sweep (seed 0), plot-ready
    h1_rows = []
    for keep in args.keep.split(","):
        report_path = Path(out / f"seed{seeds[0]}" / "reports" /
                           f"prune_h1_t{float(keep):g}_{args.poolings.split(',')[0]}.json")
        if not report_path.exists():
            continue
        payload = json.loads(report_path.read_text())
        for layer_row in payload["layers"]:
            h1_rows.append([keep, layer_row["layer"], layer_row["total"],
                            layer_row["remaining"], f"{layer_row['fraction']:.6f}"])
    if h1_rows:
        with open(out / "layer_fractions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["keep_fraction", "layer", "total", "remaining", "fraction"])
            writer.writerows(h1_rows)
        print(f"wrote {out / 'layer_fractions.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
