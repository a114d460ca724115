"""Print the steady-value comparison table for both social cases.

    python3 scripts/reproduce_results.py [--set key=value ...]
"""

from __future__ import annotations

import argparse

from hps_sim.workflows import format_table, reproduce


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    rows, info = reproduce(overrides=args.set)
    print(format_table(rows))
    for case, d in info.items():
        m = d["metrics"]
        print(f"case {case}: terminal gap {d['terminal_gap']:.2e}, reduction {m['consumption_reduction_amps']:.2f} A"
              f" ({m['consumption_reduction_percent']:.2f}%), {d['seconds']:.2f} s")
    bad = sum(not r.passed for r in rows)
    print(f"{len(rows) - bad}/{len(rows)} entries within tolerance")


if __name__ == "__main__":
    main()
