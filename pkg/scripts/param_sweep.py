"""tau or N sweep on one problem (BAL file or synth: spec), sharing the PCG baseline."""

import argparse
from pathlib import Path

from mcgba import bench
from mcgba.problem_io import load_problem


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", default="synth:np=100,nl=3000,d=1,noise=1,cam_noise=0.01,pt_noise=0.005")
    ap.add_argument("--sweep", choices=("tau", "subsets"), default="tau")
    ap.add_argument("--grid", default=None, help="default: 0.5..16 for tau, 1,2,5,10,20 for N")
    ap.add_argument("--tau", type=float, default=6.0)
    ap.add_argument("--num-subsets", type=int, default=None)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    grid = args.grid or ("0.5,1,2,4,8,16" if args.sweep == "tau" else "1,2,5,10,20")
    problem = load_problem(args.input)
    base = {"tau": args.tau, "n_subsets": args.num_subsets or bench.default_subsets(problem.n_cameras)}
    rows = []
    for value, seed, c in bench.sweep(problem, args.sweep, [float(v) for v in grid.split(",")], base):
        rows.append([args.sweep, value, seed] + c.row())
        print(f"{args.sweep}={value:g}: iteration ratio {c.iteration_ratio:.3f}, "
              f"solver time ratio {c.solver_runtime_ratio:.3f}, global {c.global_runtime_ratio:.3f}")
    bench.write_csv(args.out or Path(f"{args.sweep}_sweep.csv"), bench.SWEEP_COLUMNS, rows)


if __name__ == "__main__":
    main()
