"""Energy conservation of the lossless TM cavity mode on a mesh with mixed
temporal levels and temporal degrees.  Prints the energy trace and the drift."""
import sys
from pathlib import Path

from stmaxwell.cli import load_preset, run_experiment


def main(out="runs/demo_tm_energy"):
    cfg = load_preset("tm_energy")
    status, summ = run_experiment(cfg, Path(out))
    print((Path(out) / "energy.csv").read_text())
    print(f"slabs {summ['slabs']}, GMRES iterations {summ['iterations']}, "
          f"relative energy drift {summ['energy_drift']:.2e}")
    return status


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
