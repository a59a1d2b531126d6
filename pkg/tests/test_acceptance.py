"""Acceptance gate: one test per shipping criterion.

Each test measures its own wall clock against the stated budget and
emits a single ``[criterion NN] PASS/FAIL`` line (collected by
conftest.py and replayed in the terminal summary).
"""

import math
import time

import numpy as np
import pytest

from rafem.fem import (
    MaterialParams,
    RegionMaterial,
    SimConfig,
    StepFailureError,
    assemble_global,
    corrector_step,
    initial_state,
    run_simulation,
)
from rafem.mesh import TetMesh, generate_box_mesh
from rafem.metrics import noise_control, psnr_series, psnr_step, write_psnr_csv
from rafem.results import ResultFile, ResultWriter, read_result_file
from rafem.solver import SolverConfig, solve
from rafem.sparse import CooMatrix, coo_to_csr, is_structurally_symmetric, spmv
from rafem.trace import Region, Tracer

from conftest import ACCEPTANCE_LINES
from oracles import brute_force_system, random_sparse_system


class criterion:
    """Times a criterion body and records its one-line verdict."""

    def __init__(self, num, limit_s, title):
        self.num = num
        self.limit_s = limit_s
        self.title = title
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc is None and elapsed > self.limit_s:
            exc = AssertionError(f"took {elapsed:.1f}s, budget {self.limit_s:g}s")
        if exc is None:
            line = (f"[criterion {self.num:02d}] PASS ({elapsed:.1f}s <= "
                    f"{self.limit_s:g}s): {self.title}: {self.detail}")
        else:
            line = (f"[criterion {self.num:02d}] FAIL ({elapsed:.1f}s, budget "
                    f"{self.limit_s:g}s): {self.title}: {exc}")
        ACCEPTANCE_LINES.append(line)
        print(line)
        if exc is not None and exc_type is None:
            raise exc
        return False


def _csr(rows, cols, vals, n):
    return coo_to_csr(CooMatrix(n, n, np.asarray(rows), np.asarray(cols),
                                np.asarray(vals)))


def _rel_inf(x, ref):
    return float(np.max(np.abs(x - ref)) / np.max(np.abs(ref)))


def _run(mesh, config, material=None, tracer=None, fault_hook=None):
    records = []
    summary = run_simulation(mesh, material or MaterialParams.default(), config,
                             sink=records.append, tracer=tracer,
                             fault_hook=fault_hook)
    return ResultFile(mesh.node_count, records), summary


def _single_tet_mesh():
    return TetMesh(
        nodes=np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        tets=np.array([[0, 1, 2, 3]]),
        regions=np.zeros(1, dtype=np.int64),
        node_sets={
            "outer_boundary": np.array([2]),
            "electrode_pos": np.array([0]),
            "electrode_neg": np.array([1]),
        },
    )


def _assembled_systems():
    """Constrained global systems from a 5x5x5 box at two iterates."""
    mesh = generate_box_mesh(5, 5, 5)
    config = SimConfig()
    material = MaterialParams.default()
    state = initial_state(mesh, config)
    out = []
    sys0 = assemble_global(mesh, material, config, state.T, state.V,
                           state.T, 0.5)
    out.append((sys0.matrix, sys0.rhs))
    step = corrector_step(mesh, material, config, state, 0.5)
    sys1 = assemble_global(mesh, material, config, step.T, step.V,
                           state.T, 0.5)
    out.append((sys1.matrix, sys1.rhs))
    return out


def test_criterion_01_solution_accuracy():
    with criterion(1, 30.0, "direct and iterative solutions match dense LU") as c:
        rng = np.random.default_rng(1001)
        qr_cfg = SolverConfig(backend="qr")
        gm_cfg = SolverConfig(backend="gmres", tolerance=1e-10, restart_m=30)
        worst = 0.0
        solves = 0
        for _ in range(20):
            n = int(rng.integers(20, 301))
            rows, cols, vals, dense, b = random_sparse_system(rng, n)
            a = _csr(rows, cols, vals, n)
            x_ref = np.linalg.solve(dense, b)
            for cfg in (qr_cfg, gm_cfg):
                x, _ = solve(a, b, config=cfg)
                worst = max(worst, _rel_inf(x, x_ref))
                solves += 1
        for a, rhs in _assembled_systems():
            x_ref = np.linalg.solve(a.toarray(), rhs)
            for cfg in (qr_cfg, gm_cfg):
                x, _ = solve(a, rhs, config=cfg)
                worst = max(worst, _rel_inf(x, x_ref))
                solves += 1
        assert worst <= 1e-8
        c.detail = f"max inf-norm relative error {worst:.2e} over {solves} solves"


def test_criterion_02_residual_contract():
    with criterion(2, 60.0, "gmres residual reporting is honest") as c:
        rng = np.random.default_rng(1002)
        tols = (1e-6, 1e-8, 1e-10)
        pres = ("none", "jacobi")
        worst_ratio = 0.0
        cycles_checked = 0
        for i in range(200):
            n = int(rng.integers(10, 151))
            rows, cols, vals, dense, b = random_sparse_system(rng, n)
            a = _csr(rows, cols, vals, n)
            tol = tols[i % 3]
            cfg = SolverConfig(backend="gmres", tolerance=tol,
                               restart_m=int(rng.integers(5, 41)),
                               precondition=pres[i % 2])
            x, stats = solve(a, b, config=cfg)
            rel = float(np.linalg.norm(b - spmv(a, x)) / np.linalg.norm(b))
            assert rel <= 10.0 * tol, f"system {i}: residual {rel:.3e} vs tol {tol:g}"
            for cycle in stats.residual_history:
                arr = np.asarray(cycle)
                assert np.all(np.diff(arr) <= 0.0), f"system {i}: cycle not monotone"
                cycles_checked += 1
            worst_ratio = max(worst_ratio, rel / tol)
        c.detail = (f"200 systems, worst residual/tol {worst_ratio:.2f}, "
                    f"{cycles_checked} monotone restart cycles")


def test_criterion_03_psnr_exactness(tmp_path):
    with criterion(3, 1.0, "psnr algebra is exact on constructed fields") as c:
        n = 7
        zero = np.zeros(n)
        assert psnr_step(zero, np.full(n, 1e-5), 1.0) == 100.0
        assert psnr_step(zero, np.full(n, 1e-12), 1.0) == 240.0
        assert psnr_step(zero, zero.copy(), 1.0) == math.inf
        assert noise_control(1.0, 1e-12) - noise_control(1.0, 1e-5) == 140.0

        peak = np.zeros(n)
        peak[0] = 1.0  # fixes the reference maximum at exactly one

        def rec(i, t, v):
            from rafem.results import StepRecord
            return StepRecord(step=i, time=0.5 * (i + 1), dt=0.5,
                              corrector_iters=1, converged=True, T=t, V=v)

        ref = ResultFile(n, [rec(0, peak, peak), rec(1, zero, zero),
                             rec(2, zero, zero), rec(3, zero, zero)])
        test = ResultFile(n, [rec(0, peak.copy(), peak.copy()),
                              rec(1, np.full(n, 1e-5), np.full(n, 1e-5)),
                              rec(2, np.full(n, 1e-12), np.full(n, 1e-12)),
                              rec(3, zero.copy(), zero.copy())])
        series = psnr_series(ref, test, (1e-5, 1e-12))
        assert series.peak_t == 1.0 and series.peak_v == 1.0
        assert series.psnr_t[0] == math.inf and series.psnr_t[3] == math.inf
        assert series.psnr_t[1] == 100.0 and series.psnr_v[1] == 100.0
        assert series.psnr_t[2] == 240.0 and series.psnr_v[2] == 240.0
        assert np.all(series.control_t[0] == 100.0)
        assert np.all(series.control_t[1] == 240.0)
        assert np.all(series.control_t[1] - series.control_t[0] == 140.0)

        path = tmp_path / "psnr.csv"
        write_psnr_csv(series, path)
        lines = path.read_text().splitlines()
        assert lines[1].split(",")[2] == "inf"
        assert lines[2].split(",")[2] == "100"
        c.detail = "100 dB / 240 dB / 140 dB gap / inf all bit-exact, csv spells inf"


def test_criterion_04_backend_agreement_psnr():
    with criterion(4, 300.0, "solver choice stays above the noise floor") as c:
        mesh = generate_box_mesh(8, 8, 8)
        base = dict(total_time=60.0, dt_init=0.5)
        ref, _ = _run(mesh, SimConfig(solver=SolverConfig(backend="qr"), **base))
        g10, _ = _run(mesh, SimConfig(
            solver=SolverConfig(backend="gmres", tolerance=1e-10), **base))
        g6, _ = _run(mesh, SimConfig(
            solver=SolverConfig(backend="gmres", tolerance=1e-6), **base))

        s10 = psnr_series(ref, g10, (1e-5,))
        margin_t = float(np.min(s10.psnr_t - s10.control_t[0]))
        margin_v = float(np.min(s10.psnr_v - s10.control_v[0]))
        assert np.all(s10.psnr_t > s10.control_t[0])
        assert np.all(s10.psnr_v > s10.control_v[0])

        s6 = psnr_series(ref, g6)
        assert s6.psnr_t[-1] <= s10.psnr_t[-1]
        assert s6.psnr_v[-1] <= s10.psnr_v[-1]
        c.detail = (f"{len(s10)} steps; tight-tolerance margins above control "
                    f"T {margin_t:.1f} dB, V {margin_v:.1f} dB; loose tolerance "
                    f"ranks at or below tight on the final step")


def test_criterion_05_failure_handling():
    with criterion(5, 60.0, "halving on failure, exact final time, iteration cap") as c:
        mesh = generate_box_mesh(3, 3, 3)

        # a) one injected failure: dt halves exactly once, run still ends
        #    bitwise on the requested horizon
        result, summary = _run(
            mesh, SimConfig(total_time=3.0, dt_init=0.5),
            fault_hook=lambda step, attempt: step == 1 and attempt == 0)
        assert summary.dt_halvings == 1
        assert result.steps[1].dt == result.steps[0].dt * 1.5 * 0.5
        assert result.steps[-1].time == 3.0
        assert summary.state.t == 3.0

        # b) the default corrector cap is 50 and is actually enforced:
        #    a thermally unstable configuration never contracts
        assert SimConfig().max_corrector_iters == 50
        hot = MaterialParams({0: RegionMaterial(alpha=0.4)})
        cfg = SimConfig(total_time=10.0, dt_init=10.0, dt_max=10.0,
                        applied_voltage=500.0)
        state = initial_state(mesh, cfg)
        outcome = corrector_step(mesh, hot, cfg, state, 10.0)
        assert not outcome.converged
        assert outcome.iterations == 50

        # c) persistent failure at the dt floor terminates the run
        attempts = []

        def always_fail(step, attempt):
            attempts.append((step, attempt))
            return True

        with pytest.raises(StepFailureError) as exc:
            _run(mesh, SimConfig(total_time=1.0, dt_init=4e-6, dt_min=1e-6),
                 fault_hook=always_fail)
        assert attempts == [(0, 0), (0, 1), (0, 2)]  # 4e-6 -> 2e-6 -> 1e-6
        assert exc.value.dt == 1e-6
        c.detail = ("injected failure halves dt exactly, final time bitwise "
                    "equal, cap of 50 reached and reported, floor raises")


def test_criterion_06_assembly_against_brute_force():
    with criterion(6, 10.0, "global system matches a dense brute-force build") as c:
        material = MaterialParams.default()
        config = SimConfig()
        mesh1 = _single_tet_mesh()
        rng = np.random.default_rng(1006)
        t = 37.0 + rng.uniform(0.0, 5.0, mesh1.node_count)
        v = rng.uniform(0.0, 25.0, mesh1.node_count)
        t_prev = 37.0 + rng.uniform(0.0, 5.0, mesh1.node_count)
        system = assemble_global(mesh1, material, config, t, v, t_prev, 0.5,
                                 apply_constraints=False)
        ref_a, ref_rhs = brute_force_system(mesh1, material, config, t, v,
                                            t_prev, 0.5)
        ref_a[0::2, :] *= system.voltage_row_scale
        ref_rhs[0::2] *= system.voltage_row_scale
        err_a = float(np.max(np.abs(system.matrix.toarray() - ref_a)))
        err_b = float(np.max(np.abs(system.rhs - ref_rhs)))
        assert err_a <= 1e-14
        assert err_b <= 1e-14

        dims_ok = []
        for mesh in (mesh1, generate_box_mesh(3, 3, 3),
                     generate_box_mesh(4, 3, 5), generate_box_mesh(6, 6, 6)):
            st = initial_state(mesh, config)
            sysm = assemble_global(mesh, material, config, st.T, st.V, st.T, 0.5)
            assert sysm.matrix.nrows == 2 * mesh.node_count
            assert sysm.matrix.ncols == 2 * mesh.node_count
            assert is_structurally_symmetric(sysm.matrix)
            dims_ok.append(mesh.node_count)
        c.detail = (f"single tet entrywise error {max(err_a, err_b):.1e}; "
                    f"dimension 2N and structural symmetry on meshes of "
                    f"{dims_ok} nodes")


def test_criterion_07_thread_determinism(tmp_path):
    with criterion(7, 120.0, "results do not depend on the thread count") as c:
        mesh = generate_box_mesh(6, 6, 6)

        def run_to_file(tag, threads):
            path = tmp_path / f"{tag}.rsf"
            config = SimConfig(total_time=30.0, dt_init=0.5, threads=threads,
                               solver=SolverConfig(backend="gmres",
                                                   tolerance=1e-10))
            with ResultWriter(path, mesh.node_count) as writer:
                run_simulation(mesh, MaterialParams.default(), config,
                               sink=writer.append)
            return path.read_bytes()

        one_a = run_to_file("t1a", 1)
        one_b = run_to_file("t1b", 1)
        four_a = run_to_file("t4a", 4)
        four_b = run_to_file("t4b", 4)
        assert one_a == one_b
        assert four_a == four_b

        config = SimConfig()
        state = initial_state(mesh, config)
        sys1 = assemble_global(mesh, MaterialParams.default(), config,
                               state.T, state.V, state.T, 0.5, threads=1)
        sys4 = assemble_global(mesh, MaterialParams.default(), config,
                               state.T, state.V, state.T, 0.5, threads=4)
        assert np.array_equal(sys1.matrix.vals, sys4.matrix.vals)
        assert np.array_equal(sys1.matrix.col_idx, sys4.matrix.col_idx)
        assert np.array_equal(sys1.matrix.row_ptr, sys4.matrix.row_ptr)
        assert np.array_equal(sys1.rhs, sys4.rhs)
        cross = "identical" if one_a == four_a else "distinct"
        c.detail = (f"repeat runs bit-identical at 1 and 4 threads "
                    f"({len(one_a)} bytes, cross-count files {cross}); "
                    f"assembly arrays bit-identical across counts")


def test_criterion_08_ordering_reuse():
    with criterion(8, 120.0, "ordering computed once under reuse, results unchanged") as c:
        mesh = generate_box_mesh(4, 4, 4)
        # hold dt fixed so the run spans enough steps to exercise reuse
        base = dict(total_time=12.0, dt_init=0.5, dt_max=0.5)
        tracer = Tracer()
        reuse, summary_r = _run(
            mesh, SimConfig(solver=SolverConfig(backend="qr",
                                                reuse_ordering=True), **base),
            tracer=tracer)
        orderings = sum(1 for e in tracer.events if e.region is Region.ORDERING)
        solves = sum(1 for e in tracer.events if e.region is Region.SOLVE)
        assert solves >= 20
        assert orderings == 1
        assert summary_r.orderings_computed == 1

        plain, _ = _run(
            mesh, SimConfig(solver=SolverConfig(backend="qr"), **base))
        assert len(plain.steps) == len(reuse.steps)
        for a, b in zip(plain.steps, reuse.steps):
            assert a.time == b.time and a.dt == b.dt
            assert np.array_equal(a.T, b.T)
            assert np.array_equal(a.V, b.V)
        c.detail = (f"1 ordering event across {solves} traced solves; "
                    f"all {len(plain.steps)} steps bit-identical to the "
                    f"recompute-every-time run")


def test_criterion_09_equilibrium_and_maximum_principle():
    with criterion(9, 30.0, "zero drive holds temperature, voltage stays bounded") as c:
        mesh = generate_box_mesh(5, 5, 5)
        idle, _ = _run(mesh, SimConfig(total_time=10.0, dt_init=0.5,
                                       applied_voltage=0.0))
        drift = max(float(np.max(np.abs(rec.T - 37.0))) for rec in idle.steps)
        assert drift <= 1e-10

        live, _ = _run(mesh, SimConfig(total_time=10.0, dt_init=0.5))
        v_min = min(float(rec.V.min()) for rec in live.steps)
        v_max = max(float(rec.V.max()) for rec in live.steps)
        assert v_min >= -1e-9
        assert v_max <= 25.0 + 1e-9
        c.detail = (f"temperature drift {drift:.1e} over {len(idle.steps)} idle "
                    f"steps; driven voltage within [{v_min:.2e}, {v_max:.6f}]")


def test_criterion_10_iteration_cost_scales_with_tolerance():
    with criterion(10, 300.0, "looser tolerance never costs more inner iterations") as c:
        mesh = generate_box_mesh(6, 6, 6)
        base = dict(total_time=30.0, dt_init=0.5)
        _, loose = _run(mesh, SimConfig(
            solver=SolverConfig(backend="gmres", tolerance=1e-6), **base))
        _, tight = _run(mesh, SimConfig(
            solver=SolverConfig(backend="gmres", tolerance=1e-10), **base))
        assert loose.total_solver_iterations <= tight.total_solver_iterations
        c.detail = (f"total inner iterations {loose.total_solver_iterations} "
                    f"(1e-6) vs {tight.total_solver_iterations} (1e-10)")
