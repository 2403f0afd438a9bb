"""Nodes join a network one by one; compare joint and incremental updates.

The joint solver (BTS) re-derives every position from all mutual bearings and
RSSI values after each join. The incremental one (ISU) freezes existing
positions and only places the newcomer, so early mistakes are inherited.

    python demos/network_joins.py [trials]
"""

import sys

from wideaoa.experiments import ExperimentConfig, run_selfloc_benchmark, summarize_selfloc


def main(trials=20):
    config = ExperimentConfig(trials=trials, seed=1, end_to_end=False)
    summary = summarize_selfloc(run_selfloc_benchmark(config))
    print(f"{trials} trials, {config.initial_nodes} initial nodes, {config.joins} joins, "
          f"{config.selfloc_aoa_sigma} deg AOA noise, {config.selfloc_shadowing} dB shadowing")
    print("join   BTS mean   ISU mean   (meters, after rigid alignment)")
    for join in summary["bts"]["per_join"]:
        b = summary["bts"]["per_join"][join]["mean"]
        i = summary["isu"]["per_join"][join]["mean"]
        print(f"{join:>4}   {b:8.2f}   {i:8.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
