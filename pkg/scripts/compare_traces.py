"""Per-LM-iteration cost of PCG- and MCG-driven runs side by side."""

import argparse

from mcgba import bench
from mcgba.problem_io import load_problem


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("input", help="BAL file or synth: spec")
    ap.add_argument("--tau", type=float, default=6.0)
    ap.add_argument("--num-subsets", type=int, default=None)
    args = ap.parse_args()

    problem = load_problem(args.input)
    n = args.num_subsets or bench.default_subsets(problem.n_cameras)
    c = bench.compare(problem, bench.lm_config("pcg", args.tau, n), bench.lm_config("mcg", args.tau, n))
    print(f"{problem.name}: {problem.n_cameras} poses, {problem.n_points} points, "
          f"{problem.n_observations} observations, density {c.mcg_report.density:.3f}")
    print(f"{'iter':>4} {'cost PCG':>22} {'cost MCG':>22} {'inner PCG':>9} {'inner MCG':>9}")
    for a, b, ca, cb in zip(c.pcg.iterations, c.mcg.iterations, c.pcg.cost_trace(), c.mcg.cost_trace()):
        print(f"{a.iteration:>4} {ca:>22.15e} {cb:>22.15e} {a.inner_iterations:>9} {b.inner_iterations:>9}")
    print(f"max relative divergence {c.max_cost_divergence:.2e}, iteration ratio {c.iteration_ratio:.3f}")


if __name__ == "__main__":
    main()
