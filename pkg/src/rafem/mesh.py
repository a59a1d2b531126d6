"""Tetrahedral meshes: in-memory type, text format, box generator.

The file format is a small whitespace-delimited text format with a
fixed magic line, written in a canonical form so that load followed by
save reproduces a canonical file byte for byte.

The generator produces a structured box filled with a 6-tet Kuhn split
per grid cell, plus the three node sets the simulation needs: the box
surface and two vertical electrode segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GEOM_EPS",
    "MESH_MAGIC",
    "MeshFormatError",
    "MeshValidationError",
    "TetMesh",
    "generate_box_mesh",
    "load_mesh",
    "save_mesh",
    "tet_volume",
    "tet_volumes",
]

MESH_MAGIC = "rafem-mesh v1"

# smallest admissible tet volume, in mm^3
GEOM_EPS = 1e-12

REQUIRED_SETS = ("outer_boundary", "electrode_pos", "electrode_neg")

# default box, mm
DEFAULT_EXTENT = ((-50.0, 50.0), (-50.0, 50.0), (0.0, 100.0))

# electrode segments: vertical lines at (x, y) = (+-15, 0), z in [40, 60] mm
ELECTRODE_X = (15.0, -15.0)
ELECTRODE_Y = 0.0
ELECTRODE_Z = (40.0, 60.0)

# the six axis orders of the Kuhn cube split, lexicographic
_KUHN_PERMS = (
    (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
)


class MeshFormatError(ValueError):
    """Raised for unparseable mesh files; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshValidationError(ValueError):
    """Raised when parsed or constructed mesh data violates an invariant."""


@dataclass
class TetMesh:
    """Tetrahedral mesh with named node sets.

    ``nodes`` holds coordinates in mm, ``tets`` four node indices per
    element and ``regions`` one material tag per element.  Construction
    validates index ranges and the required node sets, and canonicalizes
    element orientation: any tet with negative signed volume gets its
    second and third vertices swapped, so all stored tets have positive
    signed volume.
    """

    nodes: np.ndarray
    tets: np.ndarray
    regions: np.ndarray
    node_sets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.regions = np.ascontiguousarray(self.regions, dtype=np.int64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise MeshValidationError("nodes must be an (N, 3) array")
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshValidationError("tets must be an (M, 4) array")
        if self.regions.shape != (self.tets.shape[0],):
            raise MeshValidationError("regions must hold one tag per tet")
        if not np.all(np.isfinite(self.nodes)):
            raise MeshValidationError("node coordinates must be finite")
        n = self.node_count
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= n):
            bad = int(np.flatnonzero((self.tets < 0).any(axis=1) | (self.tets >= n).any(axis=1))[0])
            raise MeshValidationError(f"tet {bad} references a node outside 0..{n - 1}")
        self.node_sets = {
            name: np.unique(np.ascontiguousarray(ids, dtype=np.int64))
            for name, ids in self.node_sets.items()
        }
        for name, ids in self.node_sets.items():
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise MeshValidationError(f"node set {name!r} references a node outside 0..{n - 1}")
        for name in REQUIRED_SETS:
            if name not in self.node_sets:
                raise MeshValidationError(f"required node set {name!r} is missing")
        pos = self.node_sets["electrode_pos"]
        neg = self.node_sets["electrode_neg"]
        if pos.size == 0 or neg.size == 0:
            raise MeshValidationError("electrode node sets must be non-empty")
        if np.intersect1d(pos, neg).size:
            raise MeshValidationError("electrode_pos and electrode_neg must be disjoint")
        # orientation fix-up: make every signed volume positive
        signed = _signed_volumes(self.nodes, self.tets)
        flipped = signed < 0.0
        if np.any(flipped):
            self.tets[np.ix_(flipped, [1, 2])] = self.tets[np.ix_(flipped, [2, 1])]
            signed = _signed_volumes(self.nodes, self.tets)
        small = signed <= GEOM_EPS
        if np.any(small):
            bad = int(np.flatnonzero(small)[0])
            raise MeshValidationError(
                f"tet {bad} is degenerate (volume {signed[bad]:.3g} mm^3 <= {GEOM_EPS:g})"
            )

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    @property
    def tet_count(self) -> int:
        return self.tets.shape[0]


def _signed_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    corners = nodes[tets]
    edges = corners[:, 1:, :] - corners[:, :1, :]
    return np.linalg.det(edges) / 6.0


def tet_volumes(mesh: TetMesh) -> np.ndarray:
    """Volumes of all elements, in mm^3 (positive by construction)."""
    return _signed_volumes(mesh.nodes, mesh.tets)


def tet_volume(corners: np.ndarray) -> float:
    """Volume of one tet from its (4, 3) corner array.

    Raises :class:`MeshValidationError` when the tet is degenerate
    (volume at or below ``GEOM_EPS``).
    """
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape != (4, 3):
        raise ValueError("corners must be a (4, 3) array")
    edges = corners[1:] - corners[0]
    vol = abs(float(np.linalg.det(edges))) / 6.0
    if vol <= GEOM_EPS:
        raise MeshValidationError(f"degenerate tet (volume {vol:.3g} mm^3 <= {GEOM_EPS:g})")
    return vol


# ---------------------------------------------------------------------------
# text format


def load_mesh(path) -> TetMesh:
    """Parse a mesh file, reporting the line number of any defect."""
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.readlines()

    tokens: list[tuple[str, int]] = []
    magic_seen = False
    for lineno, raw in enumerate(raw_lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if not magic_seen:
            if text != MESH_MAGIC:
                raise MeshFormatError(f"expected magic {MESH_MAGIC!r}, got {text!r}", lineno)
            magic_seen = True
            continue
        for tok in text.split():
            tokens.append((tok, lineno))
    if not magic_seen:
        raise MeshFormatError("empty file, missing magic line", len(raw_lines) or 1)

    cursor = 0

    def peek():
        return tokens[cursor] if cursor < len(tokens) else (None, tokens[-1][1] if tokens else 1)

    def take(kind: str):
        nonlocal cursor
        tok, line = peek()
        if tok is None:
            raise MeshFormatError(f"unexpected end of file, expected {kind}", line)
        cursor += 1
        return tok, line

    def take_int(kind: str) -> tuple[int, int]:
        tok, line = take(kind)
        try:
            return int(tok), line
        except ValueError:
            raise MeshFormatError(f"expected {kind} (integer), got {tok!r}", line) from None

    def take_float(kind: str) -> tuple[float, int]:
        tok, line = take(kind)
        try:
            return float(tok), line
        except ValueError:
            raise MeshFormatError(f"expected {kind} (number), got {tok!r}", line) from None

    kw, line = take("'nodes'")
    if kw != "nodes":
        raise MeshFormatError(f"expected 'nodes', got {kw!r}", line)
    n_nodes, line = take_int("node count")
    if n_nodes < 0:
        raise MeshFormatError("node count must be nonnegative", line)
    nodes = np.empty((n_nodes, 3))
    for i in range(n_nodes):
        for axis in range(3):
            nodes[i, axis] = take_float(f"coordinate of node {i}")[0]

    kw, line = take("'tets'")
    if kw != "tets":
        raise MeshFormatError(f"expected 'tets', got {kw!r}", line)
    n_tets, line = take_int("tet count")
    if n_tets < 0:
        raise MeshFormatError("tet count must be nonnegative", line)
    tets = np.empty((n_tets, 4), dtype=np.int64)
    regions = np.empty(n_tets, dtype=np.int64)
    for i in range(n_tets):
        for v in range(4):
            tets[i, v] = take_int(f"node index of tet {i}")[0]
        regions[i] = take_int(f"region tag of tet {i}")[0]

    node_sets: dict[str, np.ndarray] = {}
    while cursor < len(tokens):
        kw, line = take("'nodeset'")
        if kw != "nodeset":
            raise MeshFormatError(f"expected 'nodeset', got {kw!r}", line)
        name, line = take("node set name")
        if name in node_sets:
            raise MeshFormatError(f"duplicate node set {name!r}", line)
        count, line = take_int(f"size of node set {name!r}")
        if count < 0:
            raise MeshFormatError(f"size of node set {name!r} must be nonnegative", line)
        ids = np.empty(count, dtype=np.int64)
        for i in range(count):
            ids[i] = take_int(f"member {i} of node set {name!r}")[0]
        node_sets[name] = ids

    return TetMesh(nodes=nodes, tets=tets, regions=regions, node_sets=node_sets)


def save_mesh(mesh: TetMesh, path) -> None:
    """Write the canonical text form of a mesh.

    Floats are written with 17 significant digits so coordinates
    round-trip exactly; node sets appear in a fixed order (the required
    three first, any extras sorted by name), each on a single id line.
    """
    names = [name for name in REQUIRED_SETS]
    names += sorted(name for name in mesh.node_sets if name not in REQUIRED_SETS)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MESH_MAGIC + "\n")
        fh.write(f"nodes {mesh.node_count}\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        fh.write(f"tets {mesh.tet_count}\n")
        for (a, b, c, d), region in zip(mesh.tets, mesh.regions):
            fh.write(f"{a} {b} {c} {d} {region}\n")
        for name in names:
            ids = mesh.node_sets[name]
            fh.write(f"nodeset {name} {ids.size}\n")
            fh.write(" ".join(str(i) for i in ids) + "\n")


# ---------------------------------------------------------------------------
# box generator


def _nearest_column(values: np.ndarray, target: float, prefer_high: bool) -> int:
    dist = np.abs(values - target)
    best = dist.min()
    candidates = np.flatnonzero(dist == best)
    return int(candidates[-1] if prefer_high else candidates[0])


def _electrode_nodes(xs, ys, zs, x_target):
    """Grid nodes nearest one electrode segment (column + z interval)."""
    prefer_high = x_target >= 0.0
    i = _nearest_column(xs, x_target, prefer_high)
    j = _nearest_column(ys, ELECTRODE_Y, prefer_high=False)
    lo, hi = ELECTRODE_Z
    ks = np.flatnonzero((zs >= lo) & (zs <= hi))
    if ks.size == 0:
        mid = 0.5 * (lo + hi)
        ks = np.array([_nearest_column(zs, mid, prefer_high=False)])
    return i, j, ks


def generate_box_mesh(nx: int, ny: int, nz: int, extent=DEFAULT_EXTENT) -> TetMesh:
    """Structured box mesh with 6 Kuhn tets per cell.

    ``nx, ny, nz`` are node counts per axis (each at least 2), giving
    ``nx*ny*nz`` nodes and ``6*(nx-1)*(ny-1)*(nz-1)`` tets.  Node index
    of grid point (i, j, k) is ``(i*ny + j)*nz + k``.  Every cell is
    split along its main diagonal into six tets, one per axis order,
    emitted in lexicographic order of the axis permutation.

    Electrode node sets pick the grid column nearest each electrode
    segment in (x, y), restricted to z layers inside the segment span
    (or the single layer nearest its midpoint if none fall inside).  If
    both segments select the same column, the positive one is shifted
    one column in +x (or the negative one in -x at the grid edge) to
    keep the sets disjoint.
    """
    if nx < 2 or ny < 2 or nz < 2:
        raise ValueError("generate_box_mesh requires nx, ny, nz >= 2")
    (x0, x1), (y0, y1), (z0, z1) = extent
    if not (x0 < x1 and y0 < y1 and z0 < z1):
        raise ValueError("extent bounds must be strictly increasing per axis")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    zs = np.linspace(z0, z1, nz)

    gi, gj, gk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    nodes = np.column_stack([xs[gi.ravel()], ys[gj.ravel()], zs[gk.ravel()]])

    def node_id(i, j, k):
        return (i * ny + j) * nz + k

    ci, cj, ck = np.meshgrid(
        np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij"
    )
    ci = ci.ravel()
    cj = cj.ravel()
    ck = ck.ravel()
    ncells = ci.size
    tets = np.empty((ncells, 6, 4), dtype=np.int64)
    for t, perm in enumerate(_KUHN_PERMS):
        offs = np.zeros((4, 3), dtype=np.int64)
        for v, axis in enumerate(perm, start=1):
            offs[v] = offs[v - 1]
            offs[v, axis] += 1
        for v in range(4):
            tets[:, t, v] = node_id(ci + offs[v, 0], cj + offs[v, 1], ck + offs[v, 2])
    tets = tets.reshape(-1, 4)
    regions = np.zeros(tets.shape[0], dtype=np.int64)

    on_surface = (
        (gi == 0) | (gi == nx - 1) | (gj == 0) | (gj == ny - 1) | (gk == 0) | (gk == nz - 1)
    )
    outer = np.flatnonzero(on_surface.ravel())

    ip, jp, kp = _electrode_nodes(xs, ys, zs, ELECTRODE_X[0])
    im, jm, km = _electrode_nodes(xs, ys, zs, ELECTRODE_X[1])
    if ip == im and jp == jm:
        if ip + 1 < nx:
            ip += 1
        else:
            im -= 1
    pos = np.array([node_id(ip, jp, k) for k in kp], dtype=np.int64)
    neg = np.array([node_id(im, jm, k) for k in km], dtype=np.int64)

    return TetMesh(
        nodes=nodes,
        tets=tets,
        regions=regions,
        node_sets={"outer_boundary": outer, "electrode_pos": pos, "electrode_neg": neg},
    )
