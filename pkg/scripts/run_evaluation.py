#!/usr/bin/env python3
"""Desk-scale rerun of the full evaluation design.

Executes the four process models as choreographies over the simulator:
verification-less baselines, verified runs in non-greedy and greedy mode,
and a fault-injection sweep. Prints table-style summaries plus the headline
ratios (greedy speedup, confirmation-wait share, detection rate).

Usage: python scripts/run_evaluation.py [--seeds N] [--block-mean SECS]
"""

import argparse
import statistics
from collections import defaultdict

from chorchain import harness as H


def run_group(model_id, variant, verify, greedy, seeds, block_mean, fault_step=None):
    runs = []
    for seed in seeds:
        config = H.ScenarioConfig(
            model_id=model_id,
            variant=variant,
            verify=verify,
            greedy=greedy,
            fault_step=fault_step,
            seed=seed,
            block_interval_mean=block_mean,
        )
        runs.extend(H.run_scenario(config).runs)
    return runs


def table(title, rows, columns):
    print(f"\n== {title}")
    widths = [max(len(str(r[i])) for r in [columns] + rows) for i in range(len(columns))]
    for row in [columns] + rows:
        print("  ".join(str(c).rjust(w) for c, w in zip(row, widths)))


def fmt(x, digits=3):
    return f"{x:.{digits}f}"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=20, help="seeds per configuration")
    parser.add_argument("--block-mean", type=float, default=6.0)
    args = parser.parse_args()
    seeds = range(args.seeds)

    model_variants = [(1, "0"), (2, "0"), (2, "1"), (3, "0"), (4, "0"), (4, "1")]

    rows = []
    for model_id, variant in model_variants:
        runs = run_group(model_id, variant, False, False, seeds, args.block_mean)
        durations = [r.duration for r in runs]
        rows.append(
            [model_id, variant, len(runs), fmt(statistics.fmean(durations)),
             fmt(statistics.pstdev(durations), 4)]
        )
    table("Baseline (verification off)", rows,
          ["model", "variant", "runs", "mean dur [s]", "sigma"])

    stats = defaultdict(list)
    for greedy in (False, True):
        rows = []
        for model_id, variant in model_variants:
            runs = run_group(model_id, variant, True, greedy, seeds, args.block_mean)
            durations = [r.duration for r in runs]
            waits = [w for r in runs for w in r.confirmation_waits]
            fees = sum(r.total_fees for r in runs)
            stats["greedy" if greedy else "nongreedy"].extend(runs)
            rows.append(
                [model_id, variant, len(runs), runs[0].tx_count,
                 fmt(statistics.fmean(durations)), fmt(statistics.pstdev(durations)),
                 fmt(statistics.median(waits)), fees]
            )
        table(
            f"Verified runs ({'greedy' if greedy else 'non-greedy'} mode)", rows,
            ["model", "variant", "runs", "txs", "mean dur [s]", "sigma",
             "median confirm [s]", "fees [sat]"],
        )

    fault_rows = []
    detected = total = 0
    for model_id, variant in model_variants:
        plan = H.build_plan(H.builtin_model(model_id), [int(v) for v in variant.split(",")])
        n_handovers = len(H.planned_handovers(plan))
        hits = 0
        for step in range(1, n_handovers + 1):
            run = run_group(model_id, variant, True, False, [900 + step], args.block_mean,
                            fault_step=step)[0]
            hits += run.detection == "detected"
        detected += hits
        total += n_handovers
        fault_rows.append([model_id, variant, n_handovers, hits])
    table("Fault injection (one corrupted handover per run)", fault_rows,
          ["model", "variant", "faults", "detected"])

    ng = stats["nongreedy"]
    g = stats["greedy"]
    speedup = statistics.fmean(r.duration for r in ng) / statistics.fmean(r.duration for r in g)
    confirm_share = sum(r.phase_seconds["confirm"] for r in ng) / sum(
        r.verification_overhead for r in ng
    )
    mean_fee = statistics.fmean(r.total_fees / (r.tx_count - 1) for r in ng)
    print("\n== Headlines")
    print(f"  greedy speedup (all models pooled): {speedup:.2f}x")
    print(f"  confirmation share of non-greedy verification overhead: {confirm_share:.2%}")
    print(f"  mean fee per enriched transaction: {mean_fee:.0f} sat")
    print(f"  fault detection: {detected}/{total}")
    conserved = all(r.start_budget - r.end_residual == r.total_fees for r in ng + g)
    print(f"  value conservation exact in all verified runs: {conserved}")


if __name__ == "__main__":
    main()
