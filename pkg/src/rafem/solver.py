"""Linear solvers for the assembled systems.

Three interchangeable backends sit behind :func:`solve`:

* ``qr``: row-oriented Givens QR in the style of George and Heath.
  Rows of the column-permuted matrix are folded into an upper
  triangular R one at a time; every rotation is logged so the action
  of Q^T can be replayed on any right-hand side.  The column
  permutation (reverse Cuthill-McKee by default) can be reused across
  solves with an unchanged sparsity pattern.
* ``gmres``: restarted GMRES with modified Gram-Schmidt Arnoldi and a
  Givens-updated Hessenberg least-squares problem, optional Jacobi
  (right) preconditioning.
* ``dense``: partial-pivoting LU on a densified copy, mainly a
  correctness oracle; guarded by a size cap.

All backends are deterministic: same matrix, vector and configuration
produce bit-identical solutions run over run.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .sparse import CsrMatrix, Permutation, pattern_fingerprint, rcm_ordering, spmv
from .trace import Region, Tracer, region_scope

__all__ = [
    "GmresBreakdownError",
    "QrFactors",
    "ReuseRejectedError",
    "SingularMatrixError",
    "SizeCapError",
    "SolverConfig",
    "SolverError",
    "SolverSession",
    "SolveStats",
    "dense_lu_solve",
    "gmres",
    "qr_factorize",
    "qr_solve",
    "replay_qr_rotations",
    "solve",
]

BACKENDS = ("qr", "gmres", "dense")
PRECONDITIONERS = ("none", "jacobi")
ORDERINGS = ("none", "rcm")

DENSE_SIZE_CAP = 3000


class SolverError(Exception):
    """Base class for solver failures."""


class SingularMatrixError(SolverError):
    """Matrix is singular to working precision at the given pivot."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix is singular at pivot {pivot}")


class ReuseRejectedError(SolverError):
    """Factors offered for reuse do not match the matrix pattern."""


class GmresBreakdownError(SolverError):
    """Arnoldi produced a zero vector before reaching the tolerance."""


class SizeCapError(SolverError):
    """Dense backend refused a matrix above its size cap."""


@dataclass
class SolverConfig:
    """Backend selection and tuning knobs.

    ``max_total_iters = None`` means 10 * n, resolved per solve.
    ``ordering`` picks the column permutation for the QR backend and is
    ignored by the others.
    """

    backend: str = "qr"
    restart_m: int = 30
    tolerance: float = 1e-10
    max_total_iters: int | None = None
    precondition: str = "none"
    reuse_ordering: bool = False
    ordering: str = "rcm"

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.restart_m < 1:
            raise ValueError("restart_m must be at least 1")
        if not (0.0 < self.tolerance < 1.0):
            raise ValueError("tolerance must lie in (0, 1)")
        if self.max_total_iters is not None and self.max_total_iters < 1:
            raise ValueError("max_total_iters must be positive when given")
        if self.precondition not in PRECONDITIONERS:
            raise ValueError(f"precondition must be one of {PRECONDITIONERS}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")


@dataclass
class SolveStats:
    """Observability record returned by every solve.

    ``iterations`` counts inner (Arnoldi) steps and is 0 for the direct
    backends.  ``residual_history`` holds, per restart cycle, the
    relative residual estimate after each inner iteration.
    """

    iterations: int = 0
    restarts: int = 0
    final_relative_residual: float = 0.0
    stagnated: bool = False
    factor_nnz: int = 0
    wall_ns: int = 0
    converged: bool = True
    ordering_ns: int = 0
    residual_history: list[list[float]] = field(default_factory=list)


@dataclass
class QrFactors:
    """Output of :func:`qr_factorize`.

    ``rotations`` (via the property) lists the Givens rotations in
    application order as ``(pivot_row, source_row, c, s)``: the rotation
    mixed triangular row ``pivot_row`` with the in-flight row that
    entered the factorization as matrix row ``source_row``.  Replaying
    them against the column-permuted matrix reproduces ``r``; replaying
    them against a right-hand side applies Q^T.
    """

    col_perm: Permutation
    r: CsrMatrix
    row_order: np.ndarray
    rot_slot: np.ndarray
    rot_c: np.ndarray
    rot_s: np.ndarray
    row_rot_ptr: np.ndarray
    install_slot: np.ndarray
    pattern_fingerprint: str
    ordering_ns: int = 0

    @property
    def rotations(self) -> list[tuple[int, int, float, float]]:
        out = []
        for k, src in enumerate(self.row_order):
            for t in range(self.row_rot_ptr[k], self.row_rot_ptr[k + 1]):
                out.append((int(self.rot_slot[t]), int(src), float(self.rot_c[t]), float(self.rot_s[t])))
        return out


@dataclass
class SolverSession:
    """Per-run cache: holds the latest QR factors for ordering reuse."""

    factors: QrFactors | None = None
    orderings_computed: int = 0


def _check_system(a: CsrMatrix, b: np.ndarray) -> np.ndarray:
    if a.nrows != a.ncols:
        raise ValueError(f"matrix must be square, got {a.nrows} x {a.ncols}")
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.nrows,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({a.nrows},)")
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side contains non-finite entries")
    return b


# ---------------------------------------------------------------------------
# sparse QR


def qr_factorize(
    a: CsrMatrix,
    config: SolverConfig | None = None,
    reuse: QrFactors | None = None,
    tracer: Tracer | None = None,
    trace_step: int = -1,
    trace_corrector_iter: int = -1,
) -> QrFactors:
    """Row-oriented Givens QR of the column-permuted matrix.

    Rows are processed in permutation order (good for banded patterns);
    each incoming row is rotated against the existing triangular rows
    until its leading entry lands in an empty slot, where it is
    installed.  R is mathematically independent of the processing
    order, so this matches a QR of ``A P^T`` column-permuted by
    ``config.ordering``.

    When ``reuse`` is given its column permutation is taken over without
    recomputing the ordering; the matrix must have the fingerprinted
    pattern, otherwise :class:`ReuseRejectedError` is raised.
    """
    config = config or SolverConfig()
    if a.nrows != a.ncols:
        raise ValueError(f"matrix must be square, got {a.nrows} x {a.ncols}")
    if not np.all(np.isfinite(a.vals)):
        raise ValueError("matrix contains non-finite entries")
    n = a.nrows
    fingerprint = pattern_fingerprint(a)
    ordering_ns = 0
    if reuse is not None:
        if reuse.pattern_fingerprint != fingerprint:
            raise ReuseRejectedError(
                "offered factors were computed for a different sparsity pattern"
            )
        perm = reuse.col_perm
    elif config.ordering == "rcm":
        t0 = time.perf_counter_ns()
        with region_scope(tracer, Region.ORDERING, trace_step, trace_corrector_iter):
            perm = rcm_ordering(a)
        ordering_ns = time.perf_counter_ns() - t0
    else:
        perm = Permutation.identity(n)
    inv = perm.inverse

    r_dense = np.zeros((n, n))
    has_row = np.zeros(n, dtype=bool)
    rot_slot: list[int] = []
    rot_c: list[float] = []
    rot_s: list[float] = []
    row_rot_ptr = np.zeros(n + 1, dtype=np.int64)
    install_slot = np.full(n, -1, dtype=np.int64)
    row_order = perm.perm

    w = np.zeros(n)
    for k in range(n):
        src = row_order[k]
        w[:] = 0.0
        s0, s1 = a.row_ptr[src], a.row_ptr[src + 1]
        w[inv[a.col_idx[s0:s1]]] = a.vals[s0:s1]
        lead = 0
        while True:
            nz = np.flatnonzero(w[lead:])
            if nz.size == 0:
                break
            j = lead + int(nz[0])
            if not has_row[j]:
                r_dense[j, j:] = w[j:]
                has_row[j] = True
                install_slot[k] = j
                break
            rjj = r_dense[j, j]
            wj = w[j]
            rad = math.hypot(rjj, wj)
            c = rjj / rad
            s = wj / rad
            tail = r_dense[j, j:]
            wt = w[j:]
            new_tail = c * tail + s * wt
            new_w = c * wt - s * tail
            new_w[0] = 0.0
            r_dense[j, j:] = new_tail
            w[j:] = new_w
            rot_slot.append(j)
            rot_c.append(c)
            rot_s.append(s)
            lead = j + 1
        row_rot_ptr[k + 1] = len(rot_slot)

    if not has_row.all():
        raise SingularMatrixError(int(np.flatnonzero(~has_row)[0]))

    entry_rows, entry_cols = np.nonzero(r_dense)
    row_counts = np.bincount(entry_rows, minlength=n)
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(row_counts, out=row_ptr[1:])
    r = CsrMatrix(n, n, row_ptr, entry_cols.astype(np.int64), r_dense[entry_rows, entry_cols])
    # a rotated-into row always keeps a nonzero diagonal (hypot grows it),
    # but installed rows must be checked once more after value drop-out
    diag = r.diagonal()
    if np.any(diag == 0.0):
        raise SingularMatrixError(int(np.flatnonzero(diag == 0.0)[0]))

    return QrFactors(
        col_perm=perm,
        r=r,
        row_order=row_order.copy(),
        rot_slot=np.asarray(rot_slot, dtype=np.int64),
        rot_c=np.asarray(rot_c),
        rot_s=np.asarray(rot_s),
        row_rot_ptr=row_rot_ptr,
        install_slot=install_slot,
        pattern_fingerprint=fingerprint,
        ordering_ns=ordering_ns,
    )


def qr_solve(f: QrFactors, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` from stored factors.

    Replays the rotation log on ``b`` (the action of Q^T), back
    substitutes through R and undoes the column permutation.
    """
    n = f.r.nrows
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (n,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({n},)")
    z = np.zeros(n)
    rot_slot = f.rot_slot
    rot_c = f.rot_c
    rot_s = f.rot_s
    ptr = f.row_rot_ptr
    for k in range(n):
        carry = b[f.row_order[k]]
        for t in range(ptr[k], ptr[k + 1]):
            j = rot_slot[t]
            zj = z[j]
            c = rot_c[t]
            s = rot_s[t]
            z[j] = c * zj + s * carry
            carry = c * carry - s * zj
        slot = f.install_slot[k]
        if slot >= 0:
            z[slot] = carry
    y = np.zeros(n)
    rp, ci, vv = f.r.row_ptr, f.r.col_idx, f.r.vals
    for i in range(n - 1, -1, -1):
        s0, s1 = rp[i], rp[i + 1]
        # upper triangular with sorted columns: entry s0 is the diagonal
        acc = z[i]
        if s1 - s0 > 1:
            acc -= np.dot(vv[s0 + 1:s1], y[ci[s0 + 1:s1]])
        y[i] = acc / vv[s0]
    x = np.empty(n)
    x[f.col_perm.perm] = y
    return x


def replay_qr_rotations(f: QrFactors, a: CsrMatrix) -> np.ndarray:
    """Rebuild R by applying the stored rotations to ``A P^T``.

    Uses only the logged (c, s) pairs and install slots, so it checks
    that the rotation log faithfully reproduces the factorization.
    """
    n = a.nrows
    inv = f.col_perm.inverse
    r_dense = np.zeros((n, n))
    w = np.zeros(n)
    for k in range(n):
        src = f.row_order[k]
        w[:] = 0.0
        s0, s1 = a.row_ptr[src], a.row_ptr[src + 1]
        w[inv[a.col_idx[s0:s1]]] = a.vals[s0:s1]
        for t in range(f.row_rot_ptr[k], f.row_rot_ptr[k + 1]):
            j = f.rot_slot[t]
            c = f.rot_c[t]
            s = f.rot_s[t]
            tail = r_dense[j, j:]
            wt = w[j:]
            new_tail = c * tail + s * wt
            new_w = c * wt - s * tail
            new_w[0] = 0.0
            r_dense[j, j:] = new_tail
            w[j:] = new_w
        slot = f.install_slot[k]
        if slot >= 0:
            r_dense[slot, slot:] = w[slot:]
    return r_dense


# ---------------------------------------------------------------------------
# GMRES


def gmres(a: CsrMatrix, b: np.ndarray, x0: np.ndarray | None, config: SolverConfig):
    """Restarted GMRES(m); returns ``(x, SolveStats)``.

    Arnoldi uses modified Gram-Schmidt; the Hessenberg least-squares
    problem is kept triangular with Givens rotations, whose trailing
    entry gives the per-iteration residual estimate recorded in
    ``stats.residual_history`` (non-increasing within a cycle by
    construction).  Jacobi preconditioning is applied from the right,
    so monitored residuals are true residuals of the original system.

    Termination: relative residual at or below ``config.tolerance``, or
    ``max_total_iters`` inner steps.  A cycle that shrinks the residual
    by less than 1e-3 relative is "weak"; three consecutive weak cycles
    latch the stagnation flag, reported when the solve ends
    unconverged.  An Arnoldi breakdown ends the solve: success if the
    recomputed residual meets the tolerance, otherwise
    :class:`GmresBreakdownError`.
    """
    b = _check_system(a, b)
    n = a.nrows
    if x0 is None:
        x = np.zeros(n)
    else:
        x = np.array(x0, dtype=np.float64)
        if x.shape != (n,):
            raise ValueError(f"initial guess has shape {x.shape}, expected ({n},)")
        if not np.all(np.isfinite(x)):
            raise ValueError("initial guess contains non-finite entries")
    m = config.restart_m
    tol = config.tolerance
    max_iters = config.max_total_iters if config.max_total_iters is not None else 10 * n

    minv = None
    if config.precondition == "jacobi":
        diag = a.diagonal()
        if np.any(diag == 0.0):
            raise ValueError("Jacobi preconditioning requires a zero-free diagonal")
        minv = 1.0 / diag

    stats = SolveStats()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        # zero data: the zero vector is the exact solution
        stats.converged = True
        return np.zeros(n), stats

    total = 0
    cycles = 0
    weak_streak = 0
    stagnated_latch = False
    prev_cycle_start: float | None = None
    converged = False
    rel = math.inf

    tiny = np.finfo(np.float64).tiny

    while True:
        r = b - spmv(a, x)
        rel = float(np.linalg.norm(r)) / bnorm
        if prev_cycle_start is not None:
            if rel > (1.0 - 1e-3) * prev_cycle_start:
                weak_streak += 1
                if weak_streak >= 3:
                    stagnated_latch = True
            else:
                weak_streak = 0
            prev_cycle_start = None
        if rel <= tol:
            converged = True
            break
        if total >= max_iters:
            break

        cycle_start = rel
        beta = rel * bnorm
        v = np.zeros((m + 1, n))
        v[0] = r / beta
        h = np.zeros((m + 1, m))
        g = np.zeros(m + 1)
        g[0] = beta
        cs = np.zeros(m)
        sn = np.zeros(m)
        cycle_hist: list[float] = []
        k_used = 0
        broke_down = False
        dead_direction = False

        for k in range(m):
            z = v[k] * minv if minv is not None else v[k]
            w = spmv(a, z)
            for i in range(k + 1):
                hik = float(np.dot(v[i], w))
                h[i, k] = hik
                w = w - hik * v[i]
            hk1 = float(np.linalg.norm(w))
            h[k + 1, k] = hk1
            total += 1
            for i in range(k):
                t = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = t
            rad = math.hypot(h[k, k], h[k + 1, k])
            if rad == 0.0:
                # column added nothing; drop it and stop the cycle
                dead_direction = True
                k_used = k
                break
            cs[k] = h[k, k] / rad
            sn[k] = h[k + 1, k] / rad
            h[k, k] = rad
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_used = k + 1
            rel_est = abs(g[k + 1]) / bnorm
            cycle_hist.append(rel_est)
            if hk1 < tiny:
                broke_down = True
                break
            v[k + 1] = w / hk1
            if rel_est <= tol or total >= max_iters:
                break

        if k_used > 0:
            y = np.zeros(k_used)
            for i in range(k_used - 1, -1, -1):
                y[i] = (g[i] - float(np.dot(h[i, i + 1:k_used], y[i + 1:k_used]))) / h[i, i]
            update = v[:k_used].T @ y
            if minv is not None:
                update = minv * update
            x = x + update
        stats.residual_history.append(cycle_hist)
        cycles += 1
        prev_cycle_start = cycle_start

        if broke_down or dead_direction:
            r = b - spmv(a, x)
            rel = float(np.linalg.norm(r)) / bnorm
            if rel <= tol:
                converged = True
                break
            raise GmresBreakdownError(
                f"Arnoldi breakdown with relative residual {rel:.3e} above tolerance {tol:.3e}"
            )

    stats.iterations = total
    stats.restarts = max(cycles - 1, 0)
    stats.final_relative_residual = rel
    stats.converged = converged
    stats.stagnated = stagnated_latch and not converged
    return x, stats


# ---------------------------------------------------------------------------
# dense LU


def dense_lu_solve(a: CsrMatrix, b: np.ndarray, size_cap: int = DENSE_SIZE_CAP) -> np.ndarray:
    """Partial-pivoting LU solve on a densified copy.

    Refuses matrices above ``size_cap`` rows.  A pivot below
    ``n * eps * max|A|`` raises :class:`SingularMatrixError` carrying
    the pivot's column index.
    """
    b = _check_system(a, b)
    n = a.nrows
    if n > size_cap:
        raise SizeCapError(f"dense backend capped at {size_cap} rows, got {n}")
    lu = a.toarray()
    if not np.all(np.isfinite(lu)):
        raise ValueError("matrix contains non-finite entries")
    rhs = b.copy()
    scale = float(np.max(np.abs(lu))) if n else 0.0
    piv_tol = n * np.finfo(np.float64).eps * scale
    for k in range(n):
        col = np.abs(lu[k:, k])
        p = k + int(np.argmax(col))
        if abs(lu[p, k]) <= piv_tol:
            raise SingularMatrixError(k)
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            rhs[k], rhs[p] = rhs[p], rhs[k]
        if k + 1 < n:
            mult = lu[k + 1:, k] / lu[k, k]
            lu[k + 1:, k + 1:] -= np.outer(mult, lu[k, k + 1:])
            rhs[k + 1:] -= mult * rhs[k]
    x = np.empty(n)
    for k in range(n - 1, -1, -1):
        acc = rhs[k]
        if k + 1 < n:
            acc -= float(np.dot(lu[k, k + 1:], x[k + 1:]))
        x[k] = acc / lu[k, k]
    return x


# ---------------------------------------------------------------------------
# unified entry point


def solve(
    a: CsrMatrix,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    config: SolverConfig | None = None,
    session: SolverSession | None = None,
    tracer: Tracer | None = None,
    trace_step: int = -1,
    trace_corrector_iter: int = -1,
):
    """Dispatch to the configured backend; returns ``(x, SolveStats)``.

    With ``config.reuse_ordering`` and a session, QR factors cached on
    the session supply the column permutation for later solves whose
    pattern fingerprint still matches; a changed pattern simply drops
    the stale cache and recomputes.
    """
    config = config or SolverConfig()
    b = _check_system(a, b)
    t0 = time.perf_counter_ns()
    stats: SolveStats

    if config.backend == "dense":
        x = dense_lu_solve(a, b)
        stats = SolveStats()
    elif config.backend == "qr":
        reuse = None
        if config.reuse_ordering and session is not None and session.factors is not None:
            if session.factors.pattern_fingerprint == pattern_fingerprint(a):
                reuse = session.factors
        factors = qr_factorize(
            a,
            config,
            reuse=reuse,
            tracer=tracer,
            trace_step=trace_step,
            trace_corrector_iter=trace_corrector_iter,
        )
        if session is not None:
            session.factors = factors
            if reuse is None:
                session.orderings_computed += 1
        x = qr_solve(factors, b)
        stats = SolveStats(factor_nnz=factors.r.nnz, ordering_ns=factors.ordering_ns)
    elif config.backend == "gmres":
        x, stats = gmres(a, b, x0, config)
    else:  # unreachable given config validation
        raise ValueError(f"unknown backend {config.backend!r}")

    if config.backend != "gmres":
        bnorm = float(np.linalg.norm(b))
        if bnorm > 0.0:
            stats.final_relative_residual = float(np.linalg.norm(b - spmv(a, x))) / bnorm
        else:
            stats.final_relative_residual = 0.0
    stats.wall_ns = time.perf_counter_ns() - t0
    return x, stats
