"""Sparse assembly of the DG bilinear forms for mixed elasticity with weak symmetry.

The stress-stress part of ``A_h`` is split into pieces that do not depend on
the penalty parameter, so sweeping ``a_S`` only re-adds sparse matrices::

    A_h = divdiv + B + a_S * penalty - consistency

with ``penalty = sum_F h_F^-1 int_F [s].[t]`` and
``consistency = sum_F int_F ({div s}.[t] + {div t}.[s]) / rho`` over interior
and Neumann faces. Dirichlet faces carry no face terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite

from .mesh import DIRICHLET, INTERIOR, NEUMANN, Mesh
from .space import SKEW, DGSpacePair, make_quadrature

_TRACE = np.array([1.0, 0.0, 0.0, 1.0])
NU_TOL = 1e-14


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialModel:
    E: float
    nu: float
    rho: float = 1.0

    @property
    def incompressible(self) -> bool:
        return abs(self.nu - 0.5) <= NU_TOL

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        if self.incompressible:
            return float("inf")
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    def compliance_matrix(self) -> np.ndarray:
        """4x4 matrix of C^-1 acting on flattened tensors (11, 12, 21, 22)."""
        mu = self.mu
        dev = np.eye(4) - 0.5 * np.outer(_TRACE, _TRACE)
        C = dev / (2.0 * mu)
        if not self.incompressible:
            # 1 / (n (n lam + 2 mu)) with n = 2
            C = C + np.outer(_TRACE, _TRACE) / (4.0 * (self.lam + mu))
        return C

    def as_dict(self) -> dict:
        return {
            "E": self.E,
            "nu": self.nu,
            "rho": self.rho,
            "lambda": None if self.incompressible else self.lam,
            "mu": self.mu,
            "incompressible": self.incompressible,
        }


def material_from_E_nu(E: float = 1.0, nu: float = 0.35, rho: float = 1.0) -> MaterialModel:
    """Isotropic material from Young modulus and Poisson ratio; nu = 1/2 is the incompressible limit."""
    if not E > 0:
        raise AssemblyError(f"Young modulus E must be positive, got {E}")
    if not rho > 0:
        raise AssemblyError(f"mass density rho must be positive, got {rho}")
    if not nu > 0:
        raise AssemblyError(f"Poisson ratio nu must lie in (0, 1/2], got {nu}")
    if nu > 0.5 + NU_TOL:
        raise AssemblyError(f"Poisson ratio nu must lie in (0, 1/2], got {nu}")
    if abs(nu - 0.5) <= NU_TOL:
        nu = 0.5
    return MaterialModel(float(E), float(nu), float(rho))


def compliance_pairing(sigma, tau, material: MaterialModel) -> float:
    """Pointwise C^-1 sigma : tau for 2x2 tensors."""
    s = np.asarray(sigma, dtype=float).reshape(4)
    t = np.asarray(tau, dtype=float).reshape(4)
    return float(s @ material.compliance_matrix() @ t)


@dataclass
class FormParts:
    """Penalty-independent pieces of the discrete forms, all on the full dof set."""

    spaces: DGSpacePair
    material: MaterialModel
    compliance: sp.csr_matrix  # M_C, stress block only
    coupling: sp.csr_matrix  # D: rotation rows, stress columns (shape n_rot x n_stress)
    divdiv: sp.csr_matrix
    penalty: sp.csr_matrix
    consistency: sp.csr_matrix
    exactness: int
    penalty_length: str = "face"

    def B(self) -> sp.csr_matrix:
        return sp.bmat(
            [[self.compliance, self.coupling.T], [self.coupling, None]], format="csr"
        )

    def stress_block(self, aS: float) -> sp.csr_matrix:
        return (self.divdiv + self.compliance + aS * self.penalty - self.consistency).tocsr()

    def A(self, aS: float) -> sp.csr_matrix:
        K = self.divdiv + aS * self.penalty - self.consistency
        return (_embed(K, self.spaces.ndof) + self.B()).tocsr()


def _embed(stress_matrix, ndof: int) -> sp.csr_matrix:
    n = stress_matrix.shape[0]
    return sp.bmat([[stress_matrix, None], [None, sp.csr_matrix((ndof - n, ndof - n))]], format="csr")




def _div_operator(grads):
    """Map stress dofs (4, d) to div(sigma) (2,) given physical scalar gradients (..., d, 2)."""
    shape = grads.shape[:-2]
    d = grads.shape[-2]
    out = np.zeros(shape + (2, 4, d))
    for r in range(2):
        for col in range(2):
            out[..., r, 2 * r + col, :] = grads[..., col]
    return out.reshape(shape + (2, 4 * d))


def _normal_trace_operator(phi, n):
    """Map stress dofs (4, d) to sigma n (2,) given scalar values (..., d) and normals (..., 2)."""
    shape = phi.shape[:-1]
    d = phi.shape[-1]
    out = np.zeros(shape + (2, 4, d))
    for r in range(2):
        for col in range(2):
            out[..., r, 2 * r + col, :] = phi * n[..., col, None]
    return out.reshape(shape + (2, 4 * d))


def _scatter(rows_dofs, cols_dofs, local, shape):
    """COO triplets for a batch of dense local matrices."""
    nb, m = rows_dofs.shape
    n = cols_dofs.shape[1]
    r = np.broadcast_to(rows_dofs[:, :, None], (nb, m, n)).ravel()
    c = np.broadcast_to(cols_dofs[:, None, :], (nb, m, n)).ravel()
    return sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()


class _FaceData:
    """Traces of the stress basis on the skeleton faces, vectorised over faces."""

    def __init__(self, spaces: DGSpacePair, faces: np.ndarray, exactness: int):
        mesh = spaces.mesh
        q = make_quadrature("edge", exactness)
        v0, _, Jinv, _ = spaces.geometry()
        P = mesh.vertices[mesh.face_vertices[faces]]  # (F, 2, 2)
        x = P[:, None, 0, :] + q.points[None, :, None] * (P[:, None, 1, :] - P[:, None, 0, :])
        self.weights = q.weights[None, :] * mesh.face_length[faces, None]  # (F, nq)
        self.h = mesh.face_length[faces]
        self.normals = mesh.normals[faces]
        self.faces = faces
        self.points = x

        def side(elements):
            xi = np.einsum("fij,fqj->fqi", Jinv[elements], x - v0[elements][:, None, :])
            flat = xi.reshape(-1, 2)
            phi = spaces.basis.eval(flat).reshape(len(faces), len(q), -1)
            g = spaces.basis.grad(flat).reshape(len(faces), len(q), -1, 2)
            # grad_x phi = J^-T grad_xi phi
            g = np.einsum("fba,fqib->fqia", Jinv[elements], g)
            n = np.broadcast_to(self.normals[:, None, :], phi.shape[:2] + (2,))
            return _normal_trace_operator(phi, n), _div_operator(g)

        self.left = mesh.face_left[faces]
        self.right = mesh.face_right[faces]
        self.trace_left, self.div_left = side(self.left)
        interior = self.right >= 0
        self.interior = interior
        if interior.any():
            self.trace_right, self.div_right = side(np.where(interior, self.right, self.left))
        else:
            self.trace_right, self.div_right = self.trace_left, self.div_left


def _face_operators(spaces: DGSpacePair, faces: np.ndarray, exactness: int):
    """Per-face jump and average operators on the combined (left, right) stress dofs.

    Returns (jump, avg, dofs, weights, h): jump/avg have shape (F, nq, 2, 8d);
    on boundary faces the right half is zero and the one-sided convention applies.
    """
    fd = _FaceData(spaces, faces, exactness)
    nd = 4 * spaces.d
    F = len(faces)
    nq = fd.weights.shape[1]
    jump = np.zeros((F, nq, 2, 2 * nd))
    avg = np.zeros((F, nq, 2, 2 * nd))
    jump[..., :nd] = fd.trace_left
    inter = fd.interior
    # interior: [s] = s_K n_K + s_K' n_K' = (s_K - s_K') n_K ; {div s} = mean
    jump[inter, :, :, nd:] = -fd.trace_right[inter]
    avg[inter, :, :, :nd] = 0.5 * fd.div_left[inter]
    avg[inter, :, :, nd:] = 0.5 * fd.div_right[inter]
    avg[~inter, :, :, :nd] = fd.div_left[~inter]
    sd = spaces.stress_dofs.reshape(spaces.mesh.n_triangles, nd)
    right = np.where(inter, fd.right, fd.left)
    dofs = np.concatenate([sd[fd.left], sd[right]], axis=1)
    return jump, avg, dofs, fd.weights, fd.h, inter


PENALTY_LENGTHS = ("face", "cell-average")


def penalty_lengths(mesh: Mesh, faces: np.ndarray, kind: str = "face") -> np.ndarray:
    """Length scale h_F in the penalty weight a_S / h_F.

    ``"face"`` is the edge length; ``"cell-average"`` is the mean diameter of
    the elements sharing the face (the element diameter on boundary faces).
    """
    if kind == "face":
        return mesh.face_length[faces]
    if kind == "cell-average":
        left = mesh.element_diameter[mesh.face_left[faces]]
        right_idx = mesh.face_right[faces]
        right = np.where(right_idx >= 0, mesh.element_diameter[np.maximum(right_idx, 0)], left)
        return 0.5 * (left + right)
    raise AssemblyError(f"unknown penalty length {kind!r}; expected one of {PENALTY_LENGTHS}")


def assemble_parts(
    mesh: Mesh,
    spaces: DGSpacePair,
    material: MaterialModel,
    exactness: int | None = None,
    penalty_length: str = "face",
) -> FormParts:
    """Assemble every penalty-independent piece of B and A_h."""
    if spaces.mesh is not mesh:
        if spaces.mesh.n_triangles != mesh.n_triangles or spaces.mesh.n_faces != mesh.n_faces:
            raise AssemblyError("spaces were built on a different mesh")
    k = spaces.k
    if exactness is None:
        exactness = 2 * k
    q = make_quadrature("triangle", exactness)
    T = mesh.n_triangles
    d, dq = spaces.d, spaces.dq
    nd = 4 * d
    ns = spaces.n_stress
    _, _, Jinv, det = spaces.geometry()
    area_scale = np.abs(det)

    phi = spaces.basis.eval(q.points)  # (nq, d)
    gref = spaces.basis.grad(q.points)  # (nq, d, 2)
    sd = spaces.stress_dofs.reshape(T, nd)
    rd = spaces.rotation_dofs - ns

    # compliance mass: kron(C, scalar mass) per element
    mass_ref = np.einsum("q,qi,qj->ij", q.weights, phi, phi)
    Cmat = material.compliance_matrix()
    local_mc = area_scale[:, None, None] * np.kron(Cmat, mass_ref)[None]
    compliance = _scatter(sd, sd, local_mc, (ns, ns))

    # weak-symmetry coupling: int psi_a (tau_12 - tau_21)
    psi = phi[:, :dq]
    skew_ref = np.einsum("q,qa,qi->ai", q.weights, psi, phi)
    local_d = area_scale[:, None, None] * np.kron(SKEW[None, :], skew_ref)[None]
    coupling = _scatter(rd, sd, local_d, (spaces.n_rotation, ns))

    # broken divergence
    g = np.einsum("tba,qib->tqia", Jinv, gref)  # (T, nq, d, 2)
    dv = _div_operator(g)  # (T, nq, 2, nd)
    local_dd = np.einsum("q,tqri,tqrj->tij", q.weights, dv, dv) * (area_scale / material.rho)[:, None, None]
    divdiv = _scatter(sd, sd, local_dd, (ns, ns))

    faces = mesh.skeleton_faces()
    if len(faces):
        jump, avg, dofs, w, _, _ = _face_operators(spaces, faces, exactness)
        h = penalty_lengths(mesh, faces, penalty_length)
        local_pen = np.einsum("fq,fqri,fqrj->fij", w / h[:, None], jump, jump)
        local_con = np.einsum("fq,fqri,fqrj->fij", w, avg, jump) / material.rho
        local_con = local_con + local_con.transpose(0, 2, 1)
        penalty = _scatter(dofs, dofs, local_pen, (ns, ns))
        consistency = _scatter(dofs, dofs, local_con, (ns, ns))
    else:
        penalty = sp.csr_matrix((ns, ns))
        consistency = sp.csr_matrix((ns, ns))

    return FormParts(
        spaces=spaces,
        material=material,
        compliance=compliance,
        coupling=coupling,
        divdiv=divdiv,
        penalty=penalty,
        consistency=consistency,
        exactness=exactness,
        penalty_length=penalty_length,
    )


@dataclass(eq=False)
class AssembledPencil:
    """The matrix pair (A, B) of the generalized eigenproblem A x = kappa B x."""

    A: sp.csr_matrix
    B: sp.csr_matrix
    aS: float | None = None
    k: int | None = None
    material: MaterialModel | None = None
    mesh_id: str | None = None
    parts: FormParts | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def structured(self) -> bool:
        return self.parts is not None

    @classmethod
    def from_matrices(cls, A, B) -> "AssembledPencil":
        A = sp.csr_matrix(A, dtype=float)
        B = sp.csr_matrix(B, dtype=float)
        if A.shape != B.shape or A.shape[0] != A.shape[1]:
            raise AssemblyError(f"pencil matrices must be square and equal-sized, got {A.shape}, {B.shape}")
        return cls(A=A, B=B)

    def metadata(self) -> dict:
        return {
            "dim": self.dim,
            "aS": self.aS,
            "k": self.k,
            "mesh": self.mesh_id,
            "material": None if self.material is None else self.material.as_dict(),
        }

    def export_matrix_market(self, prefix: str) -> tuple[str, str]:
        """Write A and B as MatrixMarket coordinate files ``<prefix>_A.mtx`` and ``<prefix>_B.mtx``."""
        pa, pb = f"{prefix}_A.mtx", f"{prefix}_B.mtx"
        mmwrite(pa, self.A, comment=f"A_h  {self.metadata()}")
        mmwrite(pb, self.B, comment=f"B  {self.metadata()}")
        return pa, pb


def assemble_B(mesh: Mesh, spaces: DGSpacePair, material: MaterialModel, exactness: int | None = None) -> sp.csr_matrix:
    return assemble_parts(mesh, spaces, material, exactness).B()


def assemble_Ah(mesh: Mesh, spaces: DGSpacePair, material: MaterialModel, aS: float, exactness: int | None = None) -> sp.csr_matrix:
    _check_aS(aS)
    return assemble_parts(mesh, spaces, material, exactness).A(aS)


def _check_aS(aS):
    if not (isinstance(aS, (int, float, np.floating, np.integer)) and aS > 0 and np.isfinite(aS)):
        raise AssemblyError(f"stabilization parameter aS must be a positive finite number, got {aS!r}")


def assemble_pencil(mesh: Mesh, spaces: DGSpacePair, material: MaterialModel, aS: float, parts: FormParts | None = None) -> AssembledPencil:
    _check_aS(aS)
    if parts is None:
        parts = assemble_parts(mesh, spaces, material)
    return AssembledPencil(
        A=parts.A(aS),
        B=parts.B(),
        aS=float(aS),
        k=spaces.k,
        material=material,
        mesh_id=mesh.mesh_id,
        parts=parts,
    )


def jump_operator(spaces: DGSpacePair, faces=None, exactness: int | None = None) -> sp.csr_matrix:
    """Sparse map from dofs to quadrature-weighted normal jumps on the given faces.

    ``||J x||^2`` equals ``sum_F int_F |[sigma]|^2``. Defaults to the
    interior and Neumann faces.
    """
    mesh = spaces.mesh
    if faces is None:
        faces = mesh.skeleton_faces()
    faces = np.asarray(faces, dtype=np.int64)
    if exactness is None:
        exactness = 2 * spaces.k
    if len(faces) == 0:
        return sp.csr_matrix((0, spaces.ndof))
    jump, _, dofs, w, _, _ = _face_operators(spaces, faces, exactness)
    F, nq, _, m = jump.shape
    vals = np.sqrt(w)[:, :, None, None] * jump
    rows = np.arange(F * nq * 2).reshape(F, nq, 2)
    r = np.broadcast_to(rows[..., None], vals.shape).ravel()
    c = np.broadcast_to(dofs[:, None, None, :], vals.shape).ravel()
    return sp.coo_matrix((vals.ravel(), (r, c)), shape=(F * nq * 2, spaces.ndof)).tocsr()


def assemble_conforming_A(mesh: Mesh, spaces: DGSpacePair, material: MaterialModel, fields, parts: FormParts | None = None, tol: float = 1e-12) -> np.ndarray:
    """Conforming form A on the span of the given coefficient vectors (columns of ``fields``).

    Every field must have zero normal jumps across interior and Neumann
    faces; A then has no face contributions at all.
    """
    X = np.asarray(fields, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != spaces.ndof:
        raise AssemblyError(f"fields have {X.shape[0]} rows, expected {spaces.ndof}")
    J = jump_operator(spaces)
    jumps = np.linalg.norm(J @ X, axis=0)
    scale = np.maximum(1.0, np.linalg.norm(X, axis=0))
    bad = np.flatnonzero(jumps > tol * scale)
    if len(bad):
        raise AssemblyError(
            f"fields {bad.tolist()} have nonzero normal jumps (max {jumps[bad].max():.3e}); "
            "the conforming form is only defined on H(div) fields with sigma n = 0 on the Neumann boundary"
        )
    if parts is None:
        parts = assemble_parts(mesh, spaces, material)
    Aconf = _embed(parts.divdiv, spaces.ndof) + parts.B()
    return X.T @ (Aconf @ X)


def dg_norm(parts: FormParts, x, starred: bool = False) -> float:
    """Diagnostic DG norm of a (stress, rotation) coefficient vector.

    ``||div_h s||^2 + ||h^-1/2 [s]||^2 + ||s||^2 + ||r||^2`` over interior and
    Neumann faces; ``starred`` adds ``||h^1/2 {div s}||^2``.
    """
    spaces = parts.spaces
    x = np.asarray(x, dtype=float)
    ns = spaces.n_stress
    s, r = x[:ns], x[ns:]
    _, _, _, det = spaces.geometry()
    # orthonormal basis: L2 norms are |det J|-weighted coefficient sums
    area = np.repeat(np.abs(det), 4 * spaces.d)
    area_r = np.repeat(np.abs(det), spaces.dq)
    total = s @ (parts.divdiv @ s) * parts.material.rho + s @ (parts.penalty @ s)
    total += np.sum(area * s * s) + 2.0 * np.sum(area_r * r * r)
    if starred:
        faces = spaces.mesh.skeleton_faces()
        if len(faces):
            _, avg, dofs, w, h, _ = _face_operators(spaces, faces, parts.exactness)
            vals = np.einsum("fqri,fi->fqr", avg, s[dofs])
            total += np.sum(w * h[:, None] * np.sum(vals**2, axis=-1))
    return float(np.sqrt(total))


__all__ = [
    "AssembledPencil",
    "AssemblyError",
    "FormParts",
    "MaterialModel",
    "assemble_Ah",
    "assemble_B",
    "assemble_conforming_A",
    "assemble_parts",
    "assemble_pencil",
    "compliance_pairing",
    "dg_norm",
    "jump_operator",
    "material_from_E_nu",
    "penalty_lengths",
    "PENALTY_LENGTHS",
    "DIRICHLET",
    "INTERIOR",
    "NEUMANN",
]
