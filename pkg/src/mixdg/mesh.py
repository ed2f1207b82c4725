"""Structured triangulations of the unit square and their face skeleton."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

INTERIOR = 0
DIRICHLET = 1
NEUMANN = 2
LABEL_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet", NEUMANN: "neumann"}

SIDES = ("bottom", "right", "top", "left")


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryPartition:
    """Assignment of each side of the unit square to Dirichlet ('D') or Neumann ('N')."""

    bottom: str = "D"
    right: str = "N"
    top: str = "N"
    left: str = "N"

    def __post_init__(self):
        for side in SIDES:
            value = getattr(self, side)
            if value not in ("D", "N"):
                raise MeshError(f"side {side!r} must be 'D' or 'N', got {value!r}")
        if all(getattr(self, s) == "N" for s in SIDES):
            raise MeshError("at least one side must be Dirichlet")

    @classmethod
    def from_name(cls, name: str) -> "BoundaryPartition":
        """'bottom', 'left', 'top', 'right' (single Dirichlet side) or 'all-dirichlet'."""
        if name == "all-dirichlet":
            return cls("D", "D", "D", "D")
        if name not in SIDES:
            raise MeshError(
                f"unknown boundary partition {name!r}; expected one of "
                f"{', '.join(SIDES)}, all-dirichlet"
            )
        return cls(**{s: ("D" if s == name else "N") for s in SIDES})

    @property
    def name(self) -> str:
        dirichlet = [s for s in SIDES if getattr(self, s) == "D"]
        if len(dirichlet) == 4:
            return "all-dirichlet"
        if len(dirichlet) == 1:
            return dirichlet[0]
        return "+".join(dirichlet)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh with a fully classified face skeleton.

    Local face ``i`` of a triangle is the edge opposite its vertex ``i``.
    Face endpoints are stored in the counterclockwise order of the left
    element, and the unit normal points out of the left element. The right
    element (``-1`` on the boundary) sees the negated normal.
    """

    vertices: np.ndarray  # (V, 2)
    triangles: np.ndarray  # (T, 3), counterclockwise
    face_vertices: np.ndarray  # (F, 2)
    face_left: np.ndarray  # (F,)
    face_left_local: np.ndarray  # (F,)
    face_right: np.ndarray  # (F,), -1 on the boundary
    face_right_local: np.ndarray  # (F,), -1 on the boundary
    face_label: np.ndarray  # (F,) INTERIOR / DIRICHLET / NEUMANN
    normals: np.ndarray  # (F, 2)
    face_length: np.ndarray  # (F,)
    element_faces: np.ndarray  # (T, 3)
    element_diameter: np.ndarray  # (T,)
    N: int = 0
    partition: BoundaryPartition = field(default_factory=BoundaryPartition)
    pattern: str = ""

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def h(self) -> float:
        return float(self.element_diameter.max())

    @property
    def mesh_id(self) -> str:
        return f"square-N{self.N}-{self.pattern or 'custom'}-{self.partition.name}"

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def skeleton_faces(self) -> np.ndarray:
        """Indices of the faces carrying DG face terms (interior and Neumann)."""
        return np.flatnonzero(self.face_label != DIRICHLET)

    def faces_with_label(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.face_label == label)

    def to_dict(self) -> dict:
        faces = []
        for f in range(self.n_faces):
            right = int(self.face_right[f])
            faces.append(
                {
                    "vertices": [int(v) for v in self.face_vertices[f]],
                    "left": [int(self.face_left[f]), int(self.face_left_local[f])],
                    "right": None if right < 0 else [right, int(self.face_right_local[f])],
                    "label": LABEL_NAMES[int(self.face_label[f])],
                    "normal": [float(c) for c in self.normals[f]],
                    "length": float(self.face_length[f]),
                }
            )
        return {
            "N": self.N,
            "pattern": self.pattern,
            "partition": self.partition.name,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "faces": faces,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _side_of(midpoint: np.ndarray, tol: float = 1e-12) -> str:
    x, y = midpoint
    if abs(y) < tol:
        return "bottom"
    if abs(x - 1.0) < tol:
        return "right"
    if abs(y - 1.0) < tol:
        return "top"
    if abs(x) < tol:
        return "left"
    raise MeshError(f"boundary face midpoint {midpoint} is not on the unit square boundary")


def build_skeleton(
    vertices: np.ndarray,
    triangles: np.ndarray,
    partition: BoundaryPartition,
    N: int = 0,
    pattern: str = "",
) -> Mesh:
    """Derive faces, normals and labels for a counterclockwise triangulation of the unit square."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    n_tri = len(triangles)

    p = vertices[triangles]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    if np.any(signed <= 0):
        raise MeshError("triangles must be counterclockwise with positive area")

    owners: dict[tuple[int, int], int] = {}
    face_vertices, left, left_local = [], [], []
    right, right_local = [], []
    element_faces = np.empty((n_tri, 3), dtype=np.int64)
    for t in range(n_tri):
        tri = triangles[t]
        for i in range(3):
            a, b = int(tri[(i + 1) % 3]), int(tri[(i + 2) % 3])
            key = (a, b) if a < b else (b, a)
            f = owners.get(key)
            if f is None:
                f = len(face_vertices)
                owners[key] = f
                face_vertices.append((a, b))
                left.append(t)
                left_local.append(i)
                right.append(-1)
                right_local.append(-1)
            else:
                if right[f] != -1:
                    raise MeshError(f"edge {key} shared by more than two triangles")
                right[f] = t
                right_local[f] = i
            element_faces[t, i] = f

    face_vertices = np.array(face_vertices, dtype=np.int64)
    right = np.array(right, dtype=np.int64)
    d = vertices[face_vertices[:, 1]] - vertices[face_vertices[:, 0]]
    length = np.hypot(d[:, 0], d[:, 1])
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]

    labels = np.full(len(face_vertices), INTERIOR, dtype=np.int64)
    for f in np.flatnonzero(right < 0):
        mid = 0.5 * (vertices[face_vertices[f, 0]] + vertices[face_vertices[f, 1]])
        side = _side_of(mid)
        labels[f] = DIRICHLET if getattr(partition, side) == "D" else NEUMANN

    edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    diameter = np.hypot(edges[..., 0], edges[..., 1]).max(axis=1)

    return Mesh(
        vertices=vertices,
        triangles=triangles,
        face_vertices=face_vertices,
        face_left=np.array(left, dtype=np.int64),
        face_left_local=np.array(left_local, dtype=np.int64),
        face_right=right,
        face_right_local=np.array(right_local, dtype=np.int64),
        face_label=labels,
        normals=normals,
        face_length=length,
        element_faces=element_faces,
        element_diameter=diameter,
        N=N,
        partition=partition,
        pattern=pattern,
    )


PATTERNS = ("diamond", "cross")


def build_uniform_mesh(N: int, partition: BoundaryPartition | None = None, pattern: str = "diamond") -> Mesh:
    """N x N grid of squares, each cut by one diagonal, symmetric under x -> 1-x and y -> 1-y.

    ``pattern="diamond"``: in each quadrant the diagonals run perpendicular to
    the direction of the square's center, so they draw nested diamonds.
    ``pattern="cross"``: the diagonals point toward the center and draw an X.
    """
    if isinstance(N, bool) or not isinstance(N, (int, np.integer)):
        raise MeshError(f"N must be an integer, got {N!r}")
    if N < 1:
        raise MeshError(f"N must be a positive even integer, got N={N}")
    if N % 2:
        raise MeshError(f"N must be even for the symmetric diagonal pattern, got N={N}")
    if pattern not in PATTERNS:
        raise MeshError(f"unknown mesh pattern {pattern!r}; expected one of {PATTERNS}")
    N = int(N)
    partition = partition or BoundaryPartition()

    ticks = np.linspace(0.0, 1.0, N + 1)
    X, Y = np.meshgrid(ticks, ticks, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (N + 1) + j

    half = N // 2
    triangles = []
    for i in range(N):
        for j in range(N):
            p00, p10, p01, p11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            main = (i < half) == (j < half)
            if pattern == "diamond":
                main = not main
            if main:
                triangles.append((p00, p10, p11))
                triangles.append((p00, p11, p01))
            else:
                triangles.append((p00, p10, p01))
                triangles.append((p10, p11, p01))
    return build_skeleton(vertices, np.array(triangles), partition, N=N, pattern=pattern)


def face_quadrature_geometry(mesh: Mesh, face: int):
    """Return ``(endpoints, unit_normal, length)`` of one face; the normal points out of the left element."""
    if not 0 <= face < mesh.n_faces:
        raise IndexError(f"face index {face} out of range [0, {mesh.n_faces})")
    endpoints = mesh.vertices[mesh.face_vertices[face]]
    return endpoints.copy(), mesh.normals[face].copy(), float(mesh.face_length[face])


def element_neighbors(mesh: Mesh) -> np.ndarray:
    """(T, 3) array: element across local face i, or -1 on the boundary."""
    nb = np.full((mesh.n_triangles, 3), -1, dtype=np.int64)
    inner = mesh.face_right >= 0
    nb[mesh.face_left[inner], mesh.face_left_local[inner]] = mesh.face_right[inner]
    nb[mesh.face_right[inner], mesh.face_right_local[inner]] = mesh.face_left[inner]
    return nb


def nested_dissection_order(mesh: Mesh, leaf: int = 16) -> np.ndarray:
    """Element permutation by recursive coordinate bisection.

    Each set is split at the median centroid along its longest extent; the
    elements of the first half touching the second half form the separator
    and are numbered after both halves. Used to order DG block systems
    before sparse factorization.
    """
    T = mesh.n_triangles
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    nb = element_neighbors(mesh)
    in_b = np.zeros(T, dtype=bool)
    out = []
    stack = [(np.arange(T), False)]
    while stack:
        elems, is_separator = stack.pop()
        if is_separator or len(elems) <= leaf:
            out.append(elems)
            continue
        c = centroids[elems]
        axis = int(np.argmax(np.ptp(c, axis=0)))
        order = np.argsort(c[:, axis], kind="stable")
        half = len(elems) // 2
        a, b = elems[order[:half]], elems[order[half:]]
        in_b[b] = True
        nba = nb[a]
        sep = ((nba >= 0) & in_b[np.maximum(nba, 0)]).any(axis=1)
        in_b[b] = False
        # popped in reverse: first half, second half, then the separator
        stack.append((a[sep], True))
        stack.append((b, False))
        stack.append((a[~sep], False))
    return np.concatenate(out)
