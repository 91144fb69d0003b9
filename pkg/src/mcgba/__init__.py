"""Bundle adjustment with PCG and multidirectional CG on the reduced camera system."""

from .camera import DegenerateObservationError, project, residual, residual_jacobians, total_cost
from .lm import LmConfig, LmTrace, StateVector, optimize
from .mcg import McgConfig, Partition, make_partition, solve_mcg
from .normal_equations import (
    SchurMatrix,
    backsubstitute,
    block_jacobi,
    build_normal_blocks,
    compute_schur,
    spmm_structured,
    spmv,
)
from .pcg import CgConfig, CgStats, SolverBreakdown, solve_pcg
from .problem_io import (
    BAProblem,
    BalFormatError,
    Camera,
    SyntheticConfig,
    generate_synthetic,
    load_problem,
    parse_bal,
    read_bal,
    write_bal,
)

__version__ = "0.1.0"
