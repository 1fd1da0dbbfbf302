"""hp-adaptive solve of one Verwer slab against the reference-solution
estimator.  Prints eta, DOFs and the chosen refinement per round."""
import sys
import time

from stmaxwell.adaptivity import adapt_slab
from stmaxwell.fespace import DegreeVector, SpaceDescriptor, l2_project_nodal
from stmaxwell.mesh import build_mesh, set_temporal_levels
from stmaxwell.solver import SolverConfig
from stmaxwell.timeloop import make_verwer


def main(tol=1e-5):
    sol = make_verwer()

    def init(mesh, degrees):
        return l2_project_nodal(lambda x, y, z: sol.E(0, x, y, z),
                                lambda x, y, z: sol.H(0, x, y, z), mesh, degrees)

    mesh = build_mesh((1, 1, 1))
    start = SpaceDescriptor(mesh, set_temporal_levels(0.0, 0.5, [0]), [DegreeVector(1, 1, 0, 1)])
    t0 = time.perf_counter()
    res = adapt_slab(start, init, float(tol), theta=0.3, max_rounds=10, source=sol.J,
                     boundary=sol.g, config=SolverConfig(rtol=1e-12, restart=30, max_iter=5000))
    for row in res.log:
        print(f"round {row['round']:2d}  eta {row['eta']:.3e}  dofs {row['dofs']:5d}  {row['choices']}")
    print(f"final: {res.dofs} DOFs, eta {res.eta:.3e}, {time.perf_counter() - t0:.1f} s")
    return 0 if res.eta <= float(tol) else 1


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
