"""MCG/PCG inner-iteration ratio against Schur density over seeded synthetic problems."""

import argparse
from pathlib import Path

import numpy as np

from mcgba import bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--np", type=int, default=50)
    ap.add_argument("--nl", type=int, default=1000)
    ap.add_argument("--densities", default="0.25,0.5,0.75,1.0")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--tau", type=float, default=6.0)
    ap.add_argument("--num-subsets", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("density_study.csv"))
    args = ap.parse_args()

    grid = [float(d) for d in args.densities.split(",")]
    source = f"synth:np={args.np},nl={args.nl},d=1,noise=1,cam_noise=0.01,pt_noise=0.005"
    n_sub = args.num_subsets or bench.default_subsets(args.np)
    rows, ratios = [], {d: [] for d in grid}
    for d, seed, c in bench.sweep(source, "density", grid, {"tau": args.tau, "n_subsets": n_sub}, list(range(args.seeds))):
        rows.append(["density", d, seed] + c.row())
        ratios[d].append(c.iteration_ratio)
        print(f"d={d:.2f} seed={seed}: iterations PCG {c.pcg.inner_iterations} MCG {c.mcg.inner_iterations} "
              f"ratio {c.iteration_ratio:.3f}, solver time ratio {c.solver_runtime_ratio:.3f}")
    bench.write_csv(args.out, bench.SWEEP_COLUMNS, rows)
    for d in grid:
        print(f"d={d:.2f}: mean iteration ratio {np.mean(ratios[d]):.3f}")


if __name__ == "__main__":
    main()
