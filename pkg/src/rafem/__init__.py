"""Deterministic coupled-field FEM playground with swappable sparse solvers.

The package simulates Joule heating of tissue between two electrodes on
tetrahedral meshes: a quasi-static voltage field and an implicit-Euler
temperature field are corrected together each adaptive time step.  The
linear-algebra layer (CSR/COO kernels, RCM ordering, Givens-based
sparse QR, restarted GMRES, dense LU) is self-contained and built for
bit-reproducible results at any thread count.
"""

__version__ = "0.1.0"

from .fem import (
    MaterialParams,
    PhysicsRangeError,
    RegionMaterial,
    SimConfig,
    SimulationSummary,
    StepFailureError,
    run_simulation,
)
from .mesh import (
    MeshFormatError,
    MeshValidationError,
    TetMesh,
    generate_box_mesh,
    load_mesh,
    save_mesh,
)
from .metrics import psnr_series, psnr_step, slice_diff, slice_field
from .results import ResultFile, ResultWriter, StepRecord, read_result_file
from .solver import (
    GmresBreakdownError,
    ReuseRejectedError,
    SingularMatrixError,
    SizeCapError,
    SolveStats,
    SolverConfig,
    SolverError,
    SolverSession,
    solve,
)
from .sparse import CooMatrix, CsrMatrix, Permutation, coo_to_csr, rcm_ordering, spmv
from .trace import Region, TraceEvent, Tracer, region_scope, summarize, write_trace_csv

__all__ = [
    "CooMatrix",
    "CsrMatrix",
    "GmresBreakdownError",
    "MaterialParams",
    "MeshFormatError",
    "MeshValidationError",
    "Permutation",
    "PhysicsRangeError",
    "Region",
    "RegionMaterial",
    "ResultFile",
    "ResultWriter",
    "ReuseRejectedError",
    "SimConfig",
    "SimulationSummary",
    "SingularMatrixError",
    "SizeCapError",
    "SolveStats",
    "SolverConfig",
    "SolverError",
    "SolverSession",
    "StepFailureError",
    "StepRecord",
    "TetMesh",
    "TraceEvent",
    "Tracer",
    "coo_to_csr",
    "generate_box_mesh",
    "load_mesh",
    "psnr_series",
    "psnr_step",
    "rcm_ordering",
    "read_result_file",
    "region_scope",
    "run_simulation",
    "save_mesh",
    "slice_diff",
    "slice_field",
    "solve",
    "spmv",
    "summarize",
    "write_trace_csv",
    "__version__",
]
