"""Temporal convergence on the Verwer problem with a locally refined time
partition: halves dt four times for each temporal degree and fits the order."""
import sys

from stmaxwell.cli import load_preset, run_sweep

STEPS = ["0.125", "0.0625", "0.03125", "0.015625"]


def main(out="runs/demo_verwer"):
    status = 0
    for pt in (1, 2, 3):
        st, text = run_sweep(load_preset(f"verwer_pt{pt}"), "dt", STEPS, f"{out}/pt{pt}")
        print(f"p_t = {pt}  (expected L2 order {pt + 1}, nodal order {2 * pt})")
        print(text)
        status = max(status, st)
    return status


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
