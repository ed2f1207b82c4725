"""Polynomial bases, quadrature and degree-of-freedom maps for the DG stress/rotation pair.

Reference triangle: vertices (0, 0), (1, 0), (0, 1). Tensor components are
numbered ``c = 2*row + col``, i.e. (11, 12, 21, 22). A rotation dof carries
the scalar ``s`` of the skew tensor ``s * [[0, 1], [-1, 0]]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil, factorial

import mpmath
import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Mesh

MAX_DEGREE = 10
MAX_EXACTNESS = 25
# rotation skew tensor s*J with J = [[0, 1], [-1, 0]], flattened like the stress components
SKEW = np.array([0.0, 1.0, -1.0, 0.0])


def dim_P(k: int) -> int:
    """Dimension of the polynomials of total degree <= k in two variables."""
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


def monomial_exponents(k: int) -> list[tuple[int, int]]:
    return [(n - j, j) for n in range(k + 1) for j in range(n + 1)]


def triangle_monomial_integral(a: int, b: int) -> float:
    """Exact integral of x^a y^b over the reference triangle."""
    return factorial(a) * factorial(b) / factorial(a + b + 2)


@lru_cache(maxsize=None)
def _orthonormal_coefficients(k: int) -> np.ndarray:
    # Cholesky of the exact monomial Gram matrix in extended precision: the
    # float Gram matrix is too ill-conditioned beyond k ~ 6.
    exps = monomial_exponents(k)
    d = len(exps)
    with mpmath.workdps(60):
        gram = mpmath.matrix(d, d)
        for i, (a1, b1) in enumerate(exps):
            for j, (a2, b2) in enumerate(exps):
                a, b = a1 + a2, b1 + b2
                gram[i, j] = mpmath.mpf(factorial(a) * factorial(b)) / factorial(a + b + 2)
        L = mpmath.cholesky(gram)
        Linv = mpmath.inverse(L)
        coeffs = np.array([[float(Linv[i, j]) for j in range(d)] for i in range(d)])
    return coeffs


class ScalarBasis:
    """Orthonormal basis of P_k on the reference triangle.

    Gram-Schmidt of the monomials ordered by total degree, so the first
    ``dim_P(m)`` functions span P_m for every m <= k.
    """

    def __init__(self, k: int):
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 0 <= k <= MAX_DEGREE:
            raise ValueError(f"basis degree must be an integer in [0, {MAX_DEGREE}], got {k!r}")
        self.k = int(k)
        self.exponents = np.array(monomial_exponents(self.k), dtype=np.int64)
        self.coeffs = _orthonormal_coefficients(self.k)

    @property
    def dim(self) -> int:
        return len(self.exponents)

    def _monomials(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x, y = pts[:, 0:1], pts[:, 1:2]
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        return x, y, a, b

    def eval(self, pts) -> np.ndarray:
        """Values at reference points, shape (n_points, dim)."""
        x, y, a, b = self._monomials(pts)
        return (x**a * y**b) @ self.coeffs.T

    def grad(self, pts) -> np.ndarray:
        """Reference gradients, shape (n_points, dim, 2)."""
        x, y, a, b = self._monomials(pts)
        dx = np.where(a > 0, a * x ** np.maximum(a - 1, 0), 0.0) * y**b
        dy = x**a * np.where(b > 0, b * y ** np.maximum(b - 1, 0), 0.0)
        return np.stack([dx @ self.coeffs.T, dy @ self.coeffs.T], axis=-1)


def make_scalar_basis(k: int) -> ScalarBasis:
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_DEGREE:
        raise ValueError(f"polynomial degree k must be in [1, {MAX_DEGREE}], got {k!r}")
    return ScalarBasis(k)


@dataclass(frozen=True)
class QuadratureRule:
    domain: str  # "triangle" or "edge"
    points: np.ndarray  # (n, 2) on the reference triangle, (n,) on [0, 1]
    weights: np.ndarray
    exactness: int

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def _rule(domain: str, exactness: int) -> QuadratureRule:
    n = max(1, ceil((exactness + 1) / 2))
    t, w = roots_legendre(n)
    u, wu = 0.5 * (t + 1.0), 0.5 * w
    if domain == "edge":
        return QuadratureRule("edge", u, wu, exactness)
    # collapsed (conical product) rule: Gauss-Jacobi(1, 0) absorbs the Duffy Jacobian
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    v, wv = 0.5 * (tj + 1.0), 0.25 * wj
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    return QuadratureRule("triangle", pts, W.ravel(), exactness)


def make_quadrature(domain: str, exactness: int) -> QuadratureRule:
    """Positive-weight rule on the reference triangle or [0, 1] exact up to ``exactness``.

    Edge rules are Gauss-Legendre with ceil((exactness+1)/2) points; triangle
    rules are the collapsed Gauss-Legendre x Gauss-Jacobi product.
    """
    if domain not in ("triangle", "edge"):
        raise ValueError(f"quadrature domain must be 'triangle' or 'edge', got {domain!r}")
    if isinstance(exactness, bool) or not isinstance(exactness, (int, np.integer)):
        raise ValueError(f"exactness must be an integer, got {exactness!r}")
    if not 0 <= exactness <= MAX_EXACTNESS:
        raise ValueError(f"unsupported quadrature exactness {exactness} (allowed 0..{MAX_EXACTNESS})")
    return _rule(domain, int(exactness))


class DGSpacePair:
    """Global dof maps for W_h = P_k(T_h)^{2x2} and the skew space Q_h of degree k-1.

    Stress dofs come first, element by element, component by component;
    rotation dofs follow.
    """

    def __init__(self, mesh: Mesh, k: int):
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
            raise ValueError(f"polynomial degree k must be >= 1, got {k!r}")
        self.mesh = mesh
        self.k = int(k)
        self.basis = make_scalar_basis(self.k)
        self.d = dim_P(self.k)
        self.dq = dim_P(self.k - 1)
        T = mesh.n_triangles
        self.n_stress = 4 * T * self.d
        self.n_rotation = T * self.dq
        self.stress_dofs = np.arange(self.n_stress, dtype=np.int64).reshape(T, 4, self.d)
        self.rotation_dofs = self.n_stress + np.arange(self.n_rotation, dtype=np.int64).reshape(
            T, self.dq
        )
        self._geometry = None

    @property
    def ndof(self) -> int:
        return self.n_stress + self.n_rotation

    def stress_index(self, element: int, component: int, i: int) -> int:
        return int(self.stress_dofs[element, component, i])

    def rotation_index(self, element: int, i: int) -> int:
        return int(self.rotation_dofs[element, i])

    def element_dofs(self, element: int) -> np.ndarray:
        return np.concatenate([self.stress_dofs[element].ravel(), self.rotation_dofs[element]])

    def geometry(self):
        """Affine maps x = v0 + J xi per element: returns (v0, J, Jinv, detJ)."""
        if self._geometry is None:
            p = self.mesh.vertices[self.mesh.triangles]
            v0 = p[:, 0]
            J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            Jinv = np.empty_like(J)
            Jinv[:, 0, 0] = J[:, 1, 1] / det
            Jinv[:, 0, 1] = -J[:, 0, 1] / det
            Jinv[:, 1, 0] = -J[:, 1, 0] / det
            Jinv[:, 1, 1] = J[:, 0, 0] / det
            self._geometry = (v0, J, Jinv, det)
        return self._geometry

    def to_reference(self, element: int, x) -> np.ndarray:
        v0, _, Jinv, _ = self.geometry()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x - v0[element]) @ Jinv[element].T

    def interpolate_stress(self, func, exactness: int | None = None) -> np.ndarray:
        """Element-wise L2 projection of a tensor field onto W_h.

        ``func`` maps an (n, 2) array of points to an (n, 2, 2) array.
        Polynomial fields of degree <= k are reproduced exactly.
        """
        q = make_quadrature("triangle", exactness if exactness is not None else min(2 * self.k + 4, MAX_EXACTNESS))
        phi = self.basis.eval(q.points)  # (nq, d)
        v0, J, _, det = self.geometry()
        x = v0[:, None, :] + np.einsum("tij,qj->tqi", J, q.points)
        vals = np.asarray(func(x.reshape(-1, 2)), dtype=float).reshape(len(v0), len(q), 4)
        # orthonormal reference basis: the element mass matrix is |det J| * I
        coef = np.einsum("q,qi,tqc->tci", q.weights, phi, vals)
        out = np.zeros(self.ndof)
        out[: self.n_stress] = coef.ravel()
        return out

    def interpolate_rotation(self, func, exactness: int | None = None) -> np.ndarray:
        """Element-wise L2 projection of the scalar ``s`` (r = s J) onto P_{k-1}."""
        q = make_quadrature("triangle", exactness if exactness is not None else min(2 * self.k + 4, MAX_EXACTNESS))
        psi = self.basis.eval(q.points)[:, : self.dq]
        v0, J, _, _ = self.geometry()
        x = v0[:, None, :] + np.einsum("tij,qj->tqi", J, q.points)
        vals = np.asarray(func(x.reshape(-1, 2)), dtype=float).reshape(len(v0), len(q))
        out = np.zeros(self.ndof)
        out[self.n_stress :] = np.einsum("q,qi,tq->ti", q.weights, psi, vals).ravel()
        return out

    def evaluate_stress(self, coeffs, element: int, ref_points) -> np.ndarray:
        """Stress tensor of a coefficient vector at reference points of one element, shape (n, 2, 2)."""
        phi = self.basis.eval(ref_points)
        c = np.asarray(coeffs)[self.stress_dofs[element]]  # (4, d)
        return (phi @ c.T).reshape(-1, 2, 2)


def build_spaces(mesh: Mesh, k: int) -> DGSpacePair:
    return DGSpacePair(mesh, k)
