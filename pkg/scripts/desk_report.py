"""Turn cached desk results into 3-seed median tables and charts.

Usage: python scripts/desk_report.py [--desk results/desk] [--seeds 0 1 2]

Writes sweep.csv (mode, depth, n, median mIoU, MACs/frame), ablation.csv,
curves.svg and pareto.svg next to the per-seed directories.
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from fusionseg.bench import SWEEP_COLUMNS, TABLE_COLUMNS, mac_count, write_csv
from fusionseg.experiment import DeskConfig, median_over_seeds
from fusionseg.nets import DEPTHS
from fusionseg.pipeline import PipelineConfig
from fusionseg.plots import sweep_plots


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--desk", default="results/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a = ap.parse_args()

    desk = Path(a.desk)
    results = [json.loads((desk / f"seed{s}" / "results.json").read_text()) for s in a.seeds]
    net = DeskConfig().net
    # results.json stores keys sorted as strings
    depths = [d for d in DEPTHS if d in results[0]["single_frame"]]
    intervals = sorted(int(n) for n in results[0]["warp_only"])

    def macs(cfg, mode, n):
        return float(mac_count(cfg, PipelineConfig(n, mode)).blended(n))

    rows = []
    for n in intervals:
        rows.append({"mode": "warp_only", "depth": net.reference_depth, "n": n,
                     "miou": median_over_seeds(results, "warp_only", str(n)),
                     "macs_per_frame": macs(net, "warp_only", n), "s_per_frame": float("nan")})
    for d in depths:
        for n in intervals:
            rows.append({"mode": "accel", "depth": d, "n": n,
                         "miou": median_over_seeds(results, "accel", d, str(n)),
                         "macs_per_frame": macs(replace(net, update_depth=d), "accel", n),
                         "s_per_frame": float("nan")})
    for d in depths:
        for n in intervals:
            rows.append({"mode": "single_frame", "depth": d, "n": n,
                         "miou": median_over_seeds(results, "single_frame", d),
                         "macs_per_frame": macs(replace(net, reference_depth=d), "single_frame", n),
                         "s_per_frame": float("nan")})
    write_csv(desk / "sweep.csv", rows, SWEEP_COLUMNS, timing=False)
    sweep_plots([r for r in rows if r["mode"] != "single_frame" or r["n"] == 1], desk)

    table = []
    for d in depths:
        for branch in ("reference", "update", "both"):
            pipe = PipelineConfig(5, "accel", branch=branch)
            table.append({"row": f"{d}/{branch}", "miou": median_over_seeds(results, "ablation", d, branch),
                          "macs_per_frame": float(mac_count(replace(net, update_depth=d), pipe).blended(5))})
    write_csv(desk / "ablation.csv", table, TABLE_COLUMNS)
    print(f"wrote {desk / 'sweep.csv'}, {desk / 'ablation.csv'}, curves.svg, pareto.svg")


if __name__ == "__main__":
    main()
