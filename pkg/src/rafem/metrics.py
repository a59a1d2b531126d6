"""Solution-quality metrics: per-step PSNR and planar slice extraction.

Two runs of the same mesh are compared step by step with the peak
signal-to-noise ratio ``20 log10(max_a / sqrt(MSE))``, where ``max_a``
is the reference run's global per-field maximum and MSE averages the
squared nodal differences.  Identical fields give an infinite PSNR,
reported as ``inf``.  Optional control lines state the PSNR a uniform
noise floor of a given amplitude would produce; these are analytic
(MSE is exactly the squared amplitude), so decade amplitudes yield
exact decibel values.

For qualitative inspection, nodal fields can be sampled on a regular
grid across an axis-aligned plane.  Sample points are located with a
spatial hash over element bounding boxes and evaluated by barycentric
interpolation, which is exact for the piecewise-linear fields produced
by the simulation.  Points outside the mesh are marked missing.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .mesh import TetMesh
from .results import ResultFile

__all__ = [
    "PsnrSeries",
    "SliceGrid",
    "psnr_series",
    "psnr_step",
    "slice_diff",
    "slice_field",
    "write_psnr_csv",
    "write_slice_csv",
]

_AXES = {"x": 0, "y": 1, "z": 2}
_BARY_EPS = 1e-10
_TIME_MATCH_TOL = 1e-9


def psnr_step(ref_field: np.ndarray, test_field: np.ndarray, max_a: float) -> float:
    """PSNR in decibels between two nodal fields.

    ``20 log10(max_a) - 10 log10(MSE)`` with
    ``MSE = mean((ref - test)^2)``; returns ``math.inf`` when the
    fields are identical.  The rearranged form keeps constant-noise
    cases exact: unit peak with a uniform 1e-5 offset gives 100 dB.
    """
    ref_field = np.asarray(ref_field, dtype=np.float64)
    test_field = np.asarray(test_field, dtype=np.float64)
    if ref_field.shape != test_field.shape or ref_field.ndim != 1 or ref_field.size == 0:
        raise ValueError("fields must be equal-length non-empty vectors")
    if not max_a > 0.0:
        raise ValueError("max_a must be positive")
    mse = float(np.mean((ref_field - test_field) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(max_a) - 10.0 * math.log10(mse)


def noise_control(max_a: float, amplitude: float) -> float:
    """PSNR of a hypothetical uniform noise floor of the given amplitude.

    A constant offset of ``amplitude`` at every node has MSE equal to
    ``amplitude**2`` exactly, so the control reduces to
    ``20 (log10(max_a) - log10(amplitude))``, exact for decade inputs.
    """
    if not max_a > 0.0 or not amplitude > 0.0:
        raise ValueError("max_a and amplitude must be positive")
    return 20.0 * (math.log10(max_a) - math.log10(amplitude))


@dataclass
class PsnrSeries:
    """Per-step PSNR of a test run against a reference run."""

    steps: np.ndarray
    times: np.ndarray
    psnr_t: np.ndarray
    psnr_v: np.ndarray
    control_amps: tuple[float, ...]
    control_t: np.ndarray  # (n_amps, n_steps)
    control_v: np.ndarray
    peak_t: float
    peak_v: float
    mismatched_steps: np.ndarray  # steps whose times differ beyond tolerance

    def __len__(self) -> int:
        return self.steps.size


def psnr_series(
    ref: ResultFile,
    test: ResultFile,
    noise_controls: tuple[float, ...] = (),
) -> PsnrSeries:
    """Compare two runs step by step, aligned by step index.

    The peak per field is the reference run's global maximum absolute
    nodal value over all steps.  When the runs have different step
    counts (adaptive stepping diverged), only the overlapping index
    range is compared and a warning is emitted; the same applies to
    aligned steps whose times differ by more than 1e-9 s.
    """
    if ref.node_count != test.node_count:
        raise ValueError(
            f"node-count mismatch: reference has {ref.node_count}, test has {test.node_count}"
        )
    if not ref.steps or not test.steps:
        raise ValueError("both runs must contain at least one step")
    count = min(len(ref.steps), len(test.steps))
    if len(ref.steps) != len(test.steps):
        warnings.warn(
            f"step-count mismatch ({len(ref.steps)} vs {len(test.steps)}); "
            f"comparing the first {count} steps",
            stacklevel=2,
        )

    peak_t = float(max(np.max(np.abs(r.T)) for r in ref.steps))
    peak_v = float(max(np.max(np.abs(r.V)) for r in ref.steps))
    if peak_t <= 0.0 or peak_v <= 0.0:
        raise ValueError("reference run has a zero field; PSNR peak is undefined")

    steps = np.empty(count, dtype=np.int64)
    times = np.empty(count)
    psnr_t = np.empty(count)
    psnr_v = np.empty(count)
    mismatched = []
    for i in range(count):
        r, s = ref.steps[i], test.steps[i]
        steps[i] = r.step
        times[i] = r.time
        if abs(r.time - s.time) > _TIME_MATCH_TOL:
            mismatched.append(r.step)
        psnr_t[i] = psnr_step(r.T, s.T, peak_t)
        psnr_v[i] = psnr_step(r.V, s.V, peak_v)
    if mismatched:
        shown = ", ".join(str(s) for s in mismatched[:20])
        extra = f" (+{len(mismatched) - 20} more)" if len(mismatched) > 20 else ""
        warnings.warn(f"step times differ by more than 1e-9 s at steps {shown}{extra}", stacklevel=2)

    amps = tuple(float(a) for a in noise_controls)
    control_t = np.empty((len(amps), count))
    control_v = np.empty((len(amps), count))
    for j, amp in enumerate(amps):
        control_t[j, :] = noise_control(peak_t, amp)
        control_v[j, :] = noise_control(peak_v, amp)

    return PsnrSeries(
        steps=steps,
        times=times,
        psnr_t=psnr_t,
        psnr_v=psnr_v,
        control_amps=amps,
        control_t=control_t,
        control_v=control_v,
        peak_t=peak_t,
        peak_v=peak_v,
        mismatched_steps=np.asarray(mismatched, dtype=np.int64),
    )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_psnr_csv(series: PsnrSeries, path) -> None:
    """Write a PSNR series as delimited text.

    Header: ``step,time,psnr_T,psnr_V`` followed by
    ``control_<amp>_T,control_<amp>_V`` per control amplitude.  Floats
    carry 17 significant digits; infinite PSNR is written as ``inf``.
    """
    header = ["step", "time", "psnr_T", "psnr_V"]
    for amp in series.control_amps:
        header += [f"control_{amp:g}_T", f"control_{amp:g}_V"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(series)):
            row = [
                str(int(series.steps[i])),
                _fmt(series.times[i]),
                _fmt(series.psnr_t[i]),
                _fmt(series.psnr_v[i]),
            ]
            for j in range(len(series.control_amps)):
                row += [_fmt(series.control_t[j, i]), _fmt(series.control_v[j, i])]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# planar slices


@dataclass
class SliceGrid:
    """Regular grid of samples on an axis-aligned plane.

    ``values[iu, iv]`` corresponds to in-plane coordinates
    ``(u[iu], v[iv])``; missing samples (outside the mesh) are NaN.
    """

    axis: str
    offset: float
    u_name: str
    v_name: str
    u: np.ndarray
    v: np.ndarray
    values: np.ndarray


class _TetLocator:
    """Point-in-tet lookup via a uniform spatial hash of element boxes."""

    def __init__(self, mesh: TetMesh):
        self.mesh = mesh
        corners = mesh.nodes[mesh.tets]
        edges = corners[:, 1:, :] - corners[:, :1, :]
        inv = np.linalg.inv(edges)
        # barycentric coordinate j (j = 1..3) of point p in element m is
        # grads[m, j] . (p - corner0); coordinate 0 completes the sum to 1
        self.grads = np.transpose(inv, (0, 2, 1))
        self.corner0 = corners[:, 0, :]
        box_lo = corners.min(axis=1)
        box_hi = corners.max(axis=1)
        self.lo = mesh.nodes.min(axis=0)
        self.hi = mesh.nodes.max(axis=0)
        span = np.maximum(self.hi - self.lo, 1e-300)
        nbins = max(1, min(64, int(round(mesh.tet_count ** (1.0 / 3.0)))))
        self.nbins = nbins
        self.inv_cell = nbins / span

        lo_bin = self._bin(box_lo - 1e-9)
        hi_bin = self._bin(box_hi + 1e-9)
        spans = hi_bin - lo_bin + 1
        counts = spans.prod(axis=1)
        tet_ids = np.repeat(np.arange(mesh.tet_count, dtype=np.int64), counts)
        # enumerate each box's covered cells in x-major order
        total = int(counts.sum())
        offs = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
        sy = np.repeat(spans[:, 1], counts)
        sz = np.repeat(spans[:, 2], counts)
        iz = offs % sz
        iy = (offs // sz) % sy
        ix = offs // (sz * sy)
        cx = np.repeat(lo_bin[:, 0], counts) + ix
        cy = np.repeat(lo_bin[:, 1], counts) + iy
        cz = np.repeat(lo_bin[:, 2], counts) + iz
        cell = (cx * nbins + cy) * nbins + cz
        order = np.lexsort((tet_ids, cell))
        self.pair_cells = cell[order]
        self.pair_tets = tet_ids[order]
        ncells = nbins ** 3
        self.cell_ptr = np.zeros(ncells + 1, dtype=np.int64)
        np.add.at(self.cell_ptr, self.pair_cells + 1, 1)
        np.cumsum(self.cell_ptr, out=self.cell_ptr)

    def _bin(self, pts: np.ndarray) -> np.ndarray:
        raw = np.floor((pts - self.lo) * self.inv_cell).astype(np.int64)
        return np.clip(raw, 0, self.nbins - 1)

    def locate(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing tet per point (-1 if none) and barycentric weights.

        Ties (points on shared faces) resolve to the lowest element
        index, so sampling is deterministic.
        """
        npts = pts.shape[0]
        bins = self._bin(pts)
        cell = (bins[:, 0] * self.nbins + bins[:, 1]) * self.nbins + bins[:, 2]
        starts = self.cell_ptr[cell]
        cnt = self.cell_ptr[cell + 1] - starts
        pid = np.repeat(np.arange(npts, dtype=np.int64), cnt)
        offs = np.arange(int(cnt.sum()), dtype=np.int64) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        cand = self.pair_tets[np.repeat(starts, cnt) + offs]

        rel = pts[pid] - self.corner0[cand]
        lam = np.empty((pid.size, 4))
        lam[:, 1:] = np.einsum("mjd,md->mj", self.grads[cand], rel)
        lam[:, 0] = 1.0 - lam[:, 1:].sum(axis=1)
        inside = np.all(lam >= -_BARY_EPS, axis=1)

        tet_of = np.full(npts, -1, dtype=np.int64)
        bary = np.full((npts, 4), np.nan)
        hit = np.flatnonzero(inside)
        if hit.size:
            # pairs are grouped by point with candidates in ascending tet
            # order, so the first hit per point is the lowest tet index
            _, first = np.unique(pid[hit], return_index=True)
            chosen = hit[first]
            tet_of[pid[chosen]] = cand[chosen]
            bary[pid[chosen]] = lam[chosen]
        return tet_of, bary


def _plane_points(mesh: TetMesh, plane: tuple[str, float], grid: tuple[int, int]):
    axis, offset = plane
    axis = str(axis).lower()
    if axis not in _AXES:
        raise ValueError(f"plane axis must be one of x, y, z, not {axis!r}")
    nu, nv = int(grid[0]), int(grid[1])
    if nu < 2 or nv < 2:
        raise ValueError("grid must be at least 2x2")
    offset = float(offset)
    ax = _AXES[axis]
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    if not (lo[ax] <= offset <= hi[ax]):
        raise ValueError(
            f"plane {axis}={offset:g} lies outside the mesh extent "
            f"[{lo[ax]:g}, {hi[ax]:g}]"
        )
    in_plane = [d for d in range(3) if d != ax]
    names = {v: k for k, v in _AXES.items()}
    u = np.linspace(lo[in_plane[0]], hi[in_plane[0]], nu)
    v = np.linspace(lo[in_plane[1]], hi[in_plane[1]], nv)
    pts = np.empty((nu * nv, 3))
    uu, vv = np.meshgrid(u, v, indexing="ij")
    pts[:, ax] = offset
    pts[:, in_plane[0]] = uu.ravel()
    pts[:, in_plane[1]] = vv.ravel()
    return axis, offset, names[in_plane[0]], names[in_plane[1]], u, v, pts


def _sample_fields(mesh: TetMesh, fields, plane, grid):
    axis, offset, u_name, v_name, u, v, pts = _plane_points(mesh, plane, grid)
    for f in fields:
        if np.asarray(f).shape != (mesh.node_count,):
            raise ValueError("field length does not match the mesh node count")
    locator = _TetLocator(mesh)
    tet_of, bary = locator.locate(pts)
    found = tet_of >= 0
    if not np.any(found):
        raise ValueError(f"plane {axis}={offset:g} does not intersect the mesh")
    grids = []
    nodes_of = mesh.tets[tet_of[found]]
    w = bary[found]
    for f in fields:
        vals = np.full(pts.shape[0], np.nan)
        vals[found] = np.einsum("mj,mj->m", w, np.asarray(f, dtype=np.float64)[nodes_of])
        grids.append(vals.reshape(u.size, v.size))
    return axis, offset, u_name, v_name, u, v, grids


def slice_field(
    mesh: TetMesh,
    field: np.ndarray,
    plane: tuple[str, float] = ("y", 0.0),
    grid: tuple[int, int] = (200, 200),
) -> SliceGrid:
    """Sample a nodal field on a regular grid across an axis plane.

    The grid spans the mesh bounding rectangle of the two in-plane axes
    (endpoints included).  Samples outside the mesh are NaN; a plane
    that misses the mesh entirely is an error.
    """
    axis, offset, u_name, v_name, u, v, grids = _sample_fields(mesh, [field], plane, grid)
    return SliceGrid(axis=axis, offset=offset, u_name=u_name, v_name=v_name,
                     u=u, v=v, values=grids[0])


def slice_diff(
    mesh: TetMesh,
    field_a: np.ndarray,
    field_b: np.ndarray,
    plane: tuple[str, float] = ("y", 0.0),
    grid: tuple[int, int] = (200, 200),
) -> SliceGrid:
    """Absolute difference of two fields sampled on the same plane grid."""
    axis, offset, u_name, v_name, u, v, grids = _sample_fields(
        mesh, [field_a, field_b], plane, grid
    )
    return SliceGrid(axis=axis, offset=offset, u_name=u_name, v_name=v_name,
                     u=u, v=v, values=np.abs(grids[0] - grids[1]))


def write_slice_csv(grid: SliceGrid, path, value_name: str = "value") -> None:
    """Write slice samples as ``u,v,<value_name>`` rows (NaN -> empty)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([grid.u_name, grid.v_name, value_name])
        for iu in range(grid.u.size):
            for iv in range(grid.v.size):
                val = grid.values[iu, iv]
                writer.writerow([
                    _fmt(grid.u[iu]),
                    _fmt(grid.v[iv]),
                    "" if math.isnan(val) else _fmt(val),
                ])
