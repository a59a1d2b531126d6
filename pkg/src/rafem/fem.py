"""Coupled voltage/temperature P1 finite elements on tet meshes.

Physics proxy
-------------
A quasi-static voltage field drives Joule heating of a temperature
field.  Per time step (implicit Euler in T, length ``dt``):

* voltage: ``div(sigma(T) grad V) = 0`` with Dirichlet values on the
  two electrode node sets (applied voltage and ground), insulated
  elsewhere;
* temperature: ``rho_c dT/dt = div(k grad T) + sigma(T) |grad V|^2``
  with Dirichlet boundary temperature on the outer surface;
* coupling: ``sigma(T) = sigma0 (1 + alpha (Tbar - T_ref))`` with
  ``Tbar`` the element's mean nodal temperature, lagged on the current
  iterate (Picard), and the Joule source built from the current
  voltage iterate.

Both fields are solved together in one structurally symmetric system of
dimension 2N, node ``i`` owning dof ``2i`` (V) and ``2i + 1`` (T).  The
V and T blocks have no cross terms; the coupling lives in the
coefficients and the right-hand side, which is what the nonlinear
corrector iterates on.

Because the two blocks carry very different physical scales, all
voltage equations are multiplied by one power-of-two factor chosen to
match the blocks' mean diagonal magnitudes.  The scaling is exact in
floating point and leaves the solution unchanged, but keeps the
assembled system well conditioned so that direct and iterative
backends agree tightly.

Time stepping is predictor-corrector with piecewise adaptation: grow
``dt`` by 1.5x after easy steps (at most 5 corrector iterations),
shrink by 0.75x after laborious ones (20 or more), halve and retry the
step when the corrector fails outright.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .mesh import TetMesh
from .results import StepRecord
from .solver import SolverConfig, SolverError, SolverSession, solve
from .sparse import CooMatrix, CsrMatrix, coo_to_csr
from .trace import Region, Tracer, region_scope

__all__ = [
    "AssembledSystem",
    "CorrectorOutcome",
    "ElementMatrices",
    "MaterialParams",
    "PhysicsRangeError",
    "RegionMaterial",
    "SimConfig",
    "SimState",
    "SimulationSummary",
    "StepFailureError",
    "assemble_global",
    "corrector_step",
    "element_matrices",
    "interleave_fields",
    "predictor",
    "run_simulation",
    "split_fields",
]


class PhysicsRangeError(RuntimeError):
    """A material law left its admissible range (e.g. sigma <= 0)."""


class StepFailureError(RuntimeError):
    """Corrector failed with the time step already at its floor."""

    def __init__(self, step: int, dt: float):
        self.step = step
        self.dt = dt
        super().__init__(f"step {step} failed to converge with dt already at the floor ({dt:g} s)")


@dataclass
class RegionMaterial:
    """Coefficients of one material region.

    Units: k in W/(mm K), rho_c in J/(mm^3 K), sigma0 in S/mm, alpha in
    1/K, t_ref in degrees C.
    """

    k: float = 0.5e-3
    rho_c: float = 3.6e-3
    sigma0: float = 0.2e-3
    alpha: float = 0.02
    t_ref: float = 37.0

    def __post_init__(self):
        if self.k <= 0.0 or self.rho_c <= 0.0 or self.sigma0 <= 0.0:
            raise ValueError("k, rho_c and sigma0 must be positive")


@dataclass
class MaterialParams:
    """Material coefficients per mesh region tag."""

    regions: dict[int, RegionMaterial] = field(default_factory=lambda: {0: RegionMaterial()})

    @classmethod
    def default(cls) -> "MaterialParams":
        return cls()

    def for_region(self, tag: int) -> RegionMaterial:
        try:
            return self.regions[tag]
        except KeyError:
            raise KeyError(f"no material defined for region tag {tag}") from None


@dataclass
class SimConfig:
    """Simulation controls; defaults describe a 15-minute heating run."""

    total_time: float = 900.0
    dt_init: float = 0.5
    dt_min: float = 1e-6
    dt_max: float = 10.0
    corrector_tol: float = 1e-4
    max_corrector_iters: int = 50
    applied_voltage: float = 25.0
    boundary_temp: float = 37.0
    initial_temp: float = 37.0
    threads: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.total_time <= 0.0:
            raise ValueError("total_time must be positive")
        if not (0.0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        if self.corrector_tol <= 0.0:
            raise ValueError("corrector_tol must be positive")
        if self.max_corrector_iters < 1:
            raise ValueError("max_corrector_iters must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")


@dataclass
class SimState:
    """Mutable state of a running simulation.

    ``step`` counts accepted steps; ``T``/``V`` are the latest accepted
    fields and ``T_prev`` the accepted field one step earlier (equal to
    ``T`` before the first acceptance).
    """

    step: int
    t: float
    dt: float
    dt_prev: float
    T: np.ndarray
    V: np.ndarray
    T_prev: np.ndarray
    corrector_iters_last: int = 0
    converged_last: bool = True


def initial_state(mesh: TetMesh, config: SimConfig) -> SimState:
    t0 = np.full(mesh.node_count, config.initial_temp)
    return SimState(
        step=0,
        t=0.0,
        dt=config.dt_init,
        dt_prev=config.dt_init,
        T=t0,
        V=np.zeros(mesh.node_count),
        T_prev=t0.copy(),
    )


def interleave_fields(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Pack nodal fields into the dof vector: node i -> (2i: V, 2i+1: T)."""
    x = np.empty(2 * v.size)
    x[0::2] = v
    x[1::2] = t
    return x


def split_fields(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unpack a dof vector into (V, T) nodal fields."""
    return x[0::2].copy(), x[1::2].copy()


# ---------------------------------------------------------------------------
# element quantities


@dataclass
class ElementMatrices:
    """Per-element 4x4 blocks and load vectors (vectorized over elements)."""

    k_sigma: np.ndarray  # (M, 4, 4) conduction, sigma(T) coefficient
    k_k: np.ndarray      # (M, 4, 4) conduction, thermal k coefficient
    mass: np.ndarray     # (M, 4, 4) consistent mass, no density factor
    f_joule: np.ndarray  # (M, 4) lumped Joule source
    volumes: np.ndarray  # (M,)
    sigma: np.ndarray    # (M,) sigma(Tbar) actually used


def _region_arrays(mesh: TetMesh, material: MaterialParams):
    k = np.empty(mesh.tet_count)
    rho_c = np.empty(mesh.tet_count)
    sigma0 = np.empty(mesh.tet_count)
    alpha = np.empty(mesh.tet_count)
    t_ref = np.empty(mesh.tet_count)
    for tag in np.unique(mesh.regions):
        rm = material.for_region(int(tag))
        sel = mesh.regions == tag
        k[sel] = rm.k
        rho_c[sel] = rm.rho_c
        sigma0[sel] = rm.sigma0
        alpha[sel] = rm.alpha
        t_ref[sel] = rm.t_ref
    return k, rho_c, sigma0, alpha, t_ref


def _basis_gradients(mesh: TetMesh, sel: slice):
    """Constant P1 gradients (M, 4, 3) and volumes (M,) for a tet range."""
    corners = mesh.nodes[mesh.tets[sel]]
    edges = corners[:, 1:, :] - corners[:, :1, :]
    det = np.linalg.det(edges)
    vol = det / 6.0
    inv = np.linalg.inv(edges)
    grads = np.empty((corners.shape[0], 4, 3))
    # basis i (i = 1..3) has gradient = column i-1 of edges^-1
    grads[:, 1:, :] = np.transpose(inv, (0, 2, 1))
    grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
    return grads, vol


# consistent P1 mass pattern: V_e * (1 + delta_ij) / 20
_MASS_PATTERN = (np.ones((4, 4)) + np.eye(4)) / 20.0


def element_matrices(
    mesh: TetMesh,
    material: MaterialParams,
    t_field: np.ndarray,
    v_field: np.ndarray,
    sel: slice = slice(None),
) -> ElementMatrices:
    """Element conduction/mass blocks and Joule loads for a tet range.

    ``K_c[i][j] = c * V_e * grad(phi_i) . grad(phi_j)`` with ``c`` either
    ``sigma(Tbar)`` (mean nodal T) or the thermal conductivity;
    ``M[i][j] = V_e (1 + delta_ij) / 20``; the element's Joule power
    ``sigma |grad V|^2 V_e`` is split equally over its four nodes.

    Raises :class:`PhysicsRangeError` when any element's sigma(Tbar)
    is not positive.
    """
    t_field = np.asarray(t_field, dtype=np.float64)
    v_field = np.asarray(v_field, dtype=np.float64)
    if t_field.shape != (mesh.node_count,) or v_field.shape != (mesh.node_count,):
        raise ValueError("field length does not match the mesh node count")
    k_e, _, sigma0_e, alpha_e, tref_e = (arr[sel] for arr in _region_arrays(mesh, material))
    tets = mesh.tets[sel]
    grads, vol = _basis_gradients(mesh, sel)

    tbar = t_field[tets].mean(axis=1)
    sigma = sigma0_e * (1.0 + alpha_e * (tbar - tref_e))
    if np.any(sigma <= 0.0):
        bad = int(np.flatnonzero(sigma <= 0.0)[0])
        raise PhysicsRangeError(
            f"sigma(T) = {sigma[bad]:.3g} S/mm <= 0 in element {bad} (mean T {tbar[bad]:.3g})"
        )

    gdot = np.einsum("mid,mjd->mij", grads, grads)
    base = vol[:, None, None] * gdot
    k_sigma = sigma[:, None, None] * base
    k_k = k_e[:, None, None] * base
    mass = vol[:, None, None] * _MASS_PATTERN

    grad_v = np.einsum("mj,mjd->md", v_field[tets], grads)
    power = sigma * np.einsum("md,md->m", grad_v, grad_v) * vol
    f_joule = np.repeat((power / 4.0)[:, None], 4, axis=1)

    return ElementMatrices(
        k_sigma=k_sigma, k_k=k_k, mass=mass, f_joule=f_joule, volumes=vol, sigma=sigma
    )


# ---------------------------------------------------------------------------
# global assembly


@dataclass
class AssembledSystem:
    matrix: CsrMatrix
    rhs: np.ndarray
    voltage_row_scale: float


def _chunk_triplets(mesh, material, t_iter, v_iter, t_prev, rho_c_dt, sel):
    """Triplets and rhs contributions for one contiguous element range."""
    em = element_matrices(mesh, material, t_iter, v_iter, sel)
    tets = mesh.tets[sel]
    rows4 = np.repeat(tets[:, :, None], 4, axis=2)
    cols4 = np.repeat(tets[:, None, :], 4, axis=1)
    v_rows = (2 * rows4).ravel()
    v_cols = (2 * cols4).ravel()
    v_vals = em.k_sigma.ravel()
    t_rows = (2 * rows4 + 1).ravel()
    t_cols = (2 * cols4 + 1).ravel()
    t_block = rho_c_dt[sel, None, None] * em.mass + em.k_k
    t_vals = t_block.ravel()
    m_tprev = np.einsum("mij,mj->mi", rho_c_dt[sel, None, None] * em.mass, t_prev[tets])
    rhs_idx = (2 * tets + 1).ravel()
    rhs_vals = (m_tprev + em.f_joule).ravel()
    return v_rows, v_cols, v_vals, t_rows, t_cols, t_vals, rhs_idx, rhs_vals


def assemble_global(
    mesh: TetMesh,
    material: MaterialParams,
    config: SimConfig,
    t_iter: np.ndarray,
    v_iter: np.ndarray,
    t_prev: np.ndarray,
    dt: float,
    apply_constraints: bool = True,
    equilibrate: bool = True,
    threads: int | None = None,
) -> AssembledSystem:
    """Assemble the interleaved 2N x 2N system for one corrector pass.

    V block: conduction with sigma(T iterate).  T block:
    ``(rho_c / dt) M + K_k``.  T rhs: ``(rho_c / dt) M T_prev`` plus the
    Joule load from the V iterate; V rhs is zero until constraints.

    Elements are processed in index order, split into one contiguous
    range per thread; per-range triplet buffers are merged in range
    order before compression, so the assembled matrix is bit-identical
    for every thread count.

    Dirichlet constraints (electrodes on V, outer boundary on T) are
    eliminated symmetrically: the dof's row and column are zeroed (the
    pattern keeps explicit zeros, so it is step-invariant), its diagonal
    becomes 1, its rhs the prescribed value, and former column entries
    move to the right-hand side.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    threads = config.threads if threads is None else threads
    if threads < 1:
        raise ValueError("threads must be at least 1")
    t_iter = np.asarray(t_iter, dtype=np.float64)
    v_iter = np.asarray(v_iter, dtype=np.float64)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    n = mesh.node_count
    ndof = 2 * n

    _, rho_c_e, *_ = _region_arrays(mesh, material)
    rho_c_dt = rho_c_e / dt

    nchunks = min(threads, max(mesh.tet_count, 1))
    bounds = np.linspace(0, mesh.tet_count, nchunks + 1).astype(np.int64)
    ranges = [slice(bounds[i], bounds[i + 1]) for i in range(nchunks)]

    def work(sel):
        return _chunk_triplets(mesh, material, t_iter, v_iter, t_prev, rho_c_dt, sel)

    if nchunks > 1:
        with ThreadPoolExecutor(max_workers=nchunks) as pool:
            parts = list(pool.map(work, ranges))
    else:
        parts = [work(ranges[0])]

    rows = np.concatenate([p[0] for p in parts] + [p[3] for p in parts])
    cols = np.concatenate([p[1] for p in parts] + [p[4] for p in parts])
    vals = np.concatenate([p[2] for p in parts] + [p[5] for p in parts])
    rhs_idx = np.concatenate([p[6] for p in parts])
    rhs_vals = np.concatenate([p[7] for p in parts])

    a = coo_to_csr(CooMatrix(ndof, ndof, rows, cols, vals))
    rhs = np.bincount(rhs_idx, weights=rhs_vals, minlength=ndof)

    scale = 1.0
    if equilibrate:
        diag = a.diagonal()
        sum_v = float(diag[0::2].sum())
        sum_t = float(diag[1::2].sum())
        if sum_v > 0.0 and sum_t > 0.0:
            scale = 2.0 ** round(np.log2(sum_t / sum_v))
        entry_rows = a.entry_rows()
        v_entries = entry_rows % 2 == 0
        a.vals[v_entries] *= scale
        rhs[0::2] *= scale

    if apply_constraints:
        constrained = np.zeros(ndof, dtype=bool)
        values = np.zeros(ndof)
        pos = mesh.node_sets["electrode_pos"]
        neg = mesh.node_sets["electrode_neg"]
        outer = mesh.node_sets["outer_boundary"]
        constrained[2 * pos] = True
        values[2 * pos] = config.applied_voltage
        constrained[2 * neg] = True
        values[2 * neg] = 0.0
        constrained[2 * outer + 1] = True
        values[2 * outer + 1] = config.boundary_temp

        entry_rows = a.entry_rows()
        row_con = constrained[entry_rows]
        col_con = constrained[a.col_idx]
        move = col_con & ~row_con
        if np.any(move):
            rhs -= np.bincount(
                entry_rows[move],
                weights=a.vals[move] * values[a.col_idx[move]],
                minlength=ndof,
            )
        a.vals[row_con | col_con] = 0.0
        on_diag = (entry_rows == a.col_idx) & row_con
        a.vals[on_diag] = 1.0
        rhs[constrained] = values[constrained]

    return AssembledSystem(matrix=a, rhs=rhs, voltage_row_scale=scale)


# ---------------------------------------------------------------------------
# predictor-corrector


def predictor(state: SimState, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Starting iterate for a step of length ``dt``.

    Temperature is extrapolated linearly through the last two accepted
    fields, ``T + (dt / dt_prev) (T - T_prev)``; before any history
    exists the accepted field is used as-is.  Voltage is quasi-static,
    so the accepted field carries over unchanged.
    """
    if state.step >= 1:
        t_pred = state.T + (dt / state.dt_prev) * (state.T - state.T_prev)
    else:
        t_pred = state.T.copy()
    return t_pred, state.V.copy()


@dataclass
class CorrectorOutcome:
    converged: bool
    iterations: int
    T: np.ndarray | None = None
    V: np.ndarray | None = None
    delta: float = np.inf
    solver_iterations: int = 0
    cause: str | None = None


def corrector_step(
    mesh: TetMesh,
    material: MaterialParams,
    config: SimConfig,
    state: SimState,
    dt: float,
    start: tuple[np.ndarray, np.ndarray] | None = None,
    session: SolverSession | None = None,
    tracer: Tracer | None = None,
) -> CorrectorOutcome:
    """Picard iteration on the coupled system for one step of ``dt``.

    Each pass reassembles with the current (V, T) iterate and solves;
    convergence is measured on the whole dof vector as
    ``max |x_new - x_old| / max(1, |x_old|)`` and compared against
    ``config.corrector_tol``.  Returns a failure outcome (rather than
    raising) when the iteration cap is hit or the solver gives up, so
    the time loop can shrink ``dt`` and retry.
    """
    if start is None:
        t_it, v_it = predictor(state, dt)
    else:
        t_it, v_it = start
    x_old = interleave_fields(v_it, t_it)
    step = state.step
    total_inner = 0

    for it in range(1, config.max_corrector_iters + 1):
        with region_scope(tracer, Region.ASSEMBLY, step, it):
            system = assemble_global(
                mesh, material, config, t_it, v_it, state.T, dt, threads=config.threads
            )
        with region_scope(tracer, Region.STAGE_IN, step, it):
            # copies model the staging of operands across the solver boundary
            rhs_staged = system.rhs.copy()
            x0_staged = x_old.copy()
        try:
            with region_scope(tracer, Region.SOLVE, step, it):
                x_new, stats = solve(
                    system.matrix,
                    rhs_staged,
                    x0=x0_staged,
                    config=config.solver,
                    session=session,
                    tracer=tracer,
                    trace_step=step,
                    trace_corrector_iter=it,
                )
        except SolverError as exc:
            return CorrectorOutcome(
                converged=False, iterations=it, solver_iterations=total_inner,
                cause=f"solver: {exc}",
            )
        total_inner += stats.iterations
        if not stats.converged:
            return CorrectorOutcome(
                converged=False, iterations=it, solver_iterations=total_inner,
                cause=(
                    f"solver stalled at relative residual {stats.final_relative_residual:.3e}"
                    + (" (stagnated)" if stats.stagnated else "")
                ),
            )
        with region_scope(tracer, Region.STAGE_OUT, step, it):
            x_new = x_new.copy()
        with region_scope(tracer, Region.CONVERGE, step, it):
            delta = float(np.max(np.abs(x_new - x_old) / np.maximum(1.0, np.abs(x_old))))
        v_it, t_it = split_fields(x_new)
        x_old = x_new
        if delta < config.corrector_tol:
            return CorrectorOutcome(
                converged=True, iterations=it, T=t_it, V=v_it, delta=delta,
                solver_iterations=total_inner,
            )

    return CorrectorOutcome(
        converged=False, iterations=config.max_corrector_iters, delta=delta,
        solver_iterations=total_inner, cause="corrector iteration cap reached",
    )


@dataclass
class SimulationSummary:
    state: SimState
    accepted_steps: int
    total_corrector_iters: int
    total_solver_iterations: int
    dt_halvings: int
    orderings_computed: int
    wall_ns: int


def run_simulation(
    mesh: TetMesh,
    material: MaterialParams,
    config: SimConfig,
    sink=None,
    tracer: Tracer | None = None,
    fault_hook=None,
) -> SimulationSummary:
    """Advance from t = 0 to ``config.total_time`` adaptively.

    Every accepted step is passed to ``sink`` (e.g. a result writer's
    ``append``) as a :class:`~rafem.results.StepRecord`.  The final step
    is clamped so the last accepted time equals ``total_time`` exactly.
    On corrector failure the step is retried with ``dt`` halved (floored
    at ``dt_min``); failing at the floor raises
    :class:`StepFailureError`.  ``fault_hook(step, attempt)`` may return
    True to force a failure, which exercises the retry path in tests.

    The run is deterministic: with a fixed configuration and thread
    count, recorded fields are bit-identical run over run.
    """
    t_wall = time.perf_counter_ns()
    state = initial_state(mesh, config)
    session = SolverSession()
    total_corr = 0
    total_inner = 0
    halvings = 0
    attempt = 0

    while state.t < config.total_time:
        remaining = config.total_time - state.t
        final = state.dt >= remaining
        dt = remaining if final else state.dt

        with region_scope(tracer, Region.PREDICTOR, state.step):
            start = predictor(state, dt)

        if fault_hook is not None and fault_hook(state.step, attempt):
            outcome = CorrectorOutcome(converged=False, iterations=0, cause="injected fault")
        else:
            outcome = corrector_step(
                mesh, material, config, state, dt,
                start=start, session=session, tracer=tracer,
            )
        total_corr += outcome.iterations
        total_inner += outcome.solver_iterations
        state.corrector_iters_last = outcome.iterations
        state.converged_last = outcome.converged

        if outcome.converged:
            state.T_prev = state.T
            state.T = outcome.T
            state.V = outcome.V
            state.dt_prev = dt
            state.t = config.total_time if final else state.t + dt
            record = StepRecord(
                step=state.step,
                time=state.t,
                dt=dt,
                corrector_iters=outcome.iterations,
                converged=True,
                T=state.T,
                V=state.V,
            )
            state.step += 1
            attempt = 0
            if sink is not None:
                with region_scope(tracer, Region.IO, record.step):
                    sink(record)
            if outcome.iterations <= 5:
                state.dt = min(dt * 1.5, config.dt_max)
            elif outcome.iterations >= 20:
                state.dt = max(dt * 0.75, config.dt_min)
            else:
                state.dt = dt
        else:
            if dt <= config.dt_min:
                raise StepFailureError(state.step, dt)
            state.dt = max(dt * 0.5, config.dt_min)
            halvings += 1
            attempt += 1

    return SimulationSummary(
        state=state,
        accepted_steps=state.step,
        total_corrector_iters=total_corr,
        total_solver_iterations=total_inner,
        dt_halvings=halvings,
        orderings_computed=session.orderings_computed,
        wall_ns=time.perf_counter_ns() - t_wall,
    )
