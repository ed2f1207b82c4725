"""Generalized eigensolvers for the pencil (A, B) and mode classification.

Structured pencils (those assembled by :mod:`mixdg.forms`) are solved on the
weakly-symmetric stress subspace ``ker D``. With ``K = A - B`` restricted to
the stress block, every eigenpair with ``kappa != 1`` satisfies ``D sigma = 0``
and ``Z^T K Z y = omega^2 Z^T M_C Z y`` with ``sigma = Z y``. ``Z`` is
block-diagonal, so the reduced matrices keep the DG sparsity and ``Z^T M_C Z``
is symmetric positive definite for compressible materials. Rotation-only
vectors ``(0, s)`` satisfy ``A x = B x`` exactly and are appended to the
kernel cluster without a solve.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import AssembledPencil
from .mesh import nested_dissection_order

log = logging.getLogger(__name__)

KERNEL = "kernel"
PHYSICAL = "physical"
TRACE_NULL = "trace-null"
UNRESOLVED = "unresolved"

DENSE_MAX_DIM = 20000
# relative size of theta = 1/kappa below which a mode counts as B-null (kappa = inf)
TRACE_NULL_THETA = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass
class Mode:
    kappa: float
    omega: float
    cls: str
    residual: float
    index: int = 0


@dataclass
class ModeSet:
    """Classified eigenpairs, sorted by kappa ascending (infinite kappa last).

    ``residual`` is ``||A x - kappa B x|| / (||A||_1 ||x||)`` (for B-null modes,
    ``||B x|| / (||B||_1 ||x||)``). ``vectors`` holds eigenvectors as columns,
    aligned with ``modes`` when they were kept.
    """

    modes: list[Mode]
    method: str
    shift: float | None = None
    tol: float | None = None
    vectors: np.ndarray | None = field(default=None, repr=False)
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.modes)

    def of_class(self, cls: str) -> list[Mode]:
        return [m for m in self.modes if m.cls == cls]

    @property
    def kappas(self) -> np.ndarray:
        return np.array([m.kappa for m in self.modes])

    def physical(self) -> list[Mode]:
        return self.of_class(PHYSICAL)

    def frequencies(self, m: int | None = None) -> np.ndarray:
        """Smallest ``m`` physical frequencies."""
        w = np.array([mode.omega for mode in self.physical()])
        return w if m is None else w[:m]

    def counts(self) -> dict:
        out = {c: 0 for c in (KERNEL, PHYSICAL, TRACE_NULL, UNRESOLVED)}
        for mode in self.modes:
            out[mode.cls] += 1
        return out

    def vector(self, i: int) -> np.ndarray:
        if self.vectors is None:
            raise ValueError("eigenvectors were not kept for this solve")
        return self.vectors[:, i]

    def to_rows(self):
        return [
            {
                "index": i,
                "kappa": m.kappa,
                "omega": m.omega,
                "class": m.cls,
                "residual": m.residual,
            }
            for i, m in enumerate(self.modes)
        ]

    def to_csv(self, path=None, classes=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "kappa", "omega", "class", "residual"])
        for row in self.to_rows():
            if classes is not None and row["class"] not in classes:
                continue
            writer.writerow(
                [row["index"], _fmt(row["kappa"]), _fmt(row["omega"]), row["class"], f"{row['residual']:.3e}"]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "shift": self.shift,
            "tol": self.tol,
            "counts": self.counts(),
            "info": self.info,
            "modes": [
                {**row, "kappa": _json_float(row["kappa"])} for row in self.to_rows()
            ],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _fmt(x: float) -> str:
    return "inf" if np.isinf(x) else f"{x:.7g}"


def _json_float(x):
    return "inf" if np.isinf(x) else float(x)


@dataclass
class SolveRequest:
    m: int = 10
    strategy: str = "shift-invert"
    shift: float = 1.3
    tol: float = 1e-10
    maxiter: int = 5000
    ncv: int | None = None
    # "above": the m eigenvalues nearest the shift from above (skips the kappa = 1 cluster
    # when 1 < shift); "nearest": the m nearest on either side.
    side: str = "above"

    def __post_init__(self):
        if not isinstance(self.m, (int, np.integer)) or self.m < 1:
            raise ValueError(f"mode count m must be >= 1, got {self.m!r}")
        if not self.tol > 0:
            raise ValueError(f"tolerance must be positive, got {self.tol}")
        if self.strategy not in ("dense", "shift-invert"):
            raise ValueError(f"strategy must be 'dense' or 'shift-invert', got {self.strategy!r}")
        if self.side not in ("above", "nearest"):
            raise ValueError(f"side must be 'above' or 'nearest', got {self.side!r}")


# ---------------------------------------------------------------- classification


def classify_modes(raw, kernel_tol: float = 1e-6, positivity_tol: float = 1e-6, method: str = "raw") -> ModeSet:
    """Classify ``(kappa, residual)`` pairs.

    ``|kappa - 1| <= kernel_tol`` is the kernel cluster, ``kappa > 1 +
    positivity_tol`` is a physical mode with ``omega = sqrt(kappa - 1)``,
    infinite kappa is a B-null (trace-null) mode and everything else is
    unresolved.
    """
    modes = []
    for item in raw:
        kappa, residual = (item, 0.0) if np.isscalar(item) else (item[0], item[1])
        kappa = float(kappa)
        if np.isinf(kappa):
            cls, omega = TRACE_NULL, 0.0
        elif abs(kappa - 1.0) <= kernel_tol:
            cls, omega = KERNEL, 0.0
        elif kappa > 1.0 + positivity_tol:
            cls, omega = PHYSICAL, float(np.sqrt(kappa - 1.0))
        else:
            cls, omega = UNRESOLVED, 0.0
        modes.append(Mode(kappa=kappa, omega=omega, cls=cls, residual=float(residual)))
    order = sorted(range(len(modes)), key=lambda i: (np.isinf(modes[i].kappa), modes[i].kappa))
    modes = [modes[i] for i in order]
    for i, mode in enumerate(modes):
        mode.index = i
    ms = ModeSet(modes=modes, method=method)
    ms.info["order"] = order
    return ms


def _build_modeset(kappas, residuals, vectors, method, kernel_tol, positivity_tol, shift=None, tol=None, info=None):
    ms = classify_modes(zip(kappas, residuals), kernel_tol, positivity_tol, method=method)
    order = ms.info.pop("order")
    if vectors is not None:
        ms.vectors = vectors[:, order]
    ms.shift, ms.tol = shift, tol
    ms.info.update(info or {})
    return ms


# ---------------------------------------------------------------- residuals


def _norm1(M) -> float:
    return float(abs(M).sum(axis=0).max()) if M.nnz else 0.0


def pencil_residuals(pencil: AssembledPencil, X: np.ndarray, kappas, chunk: int = 512) -> np.ndarray:
    """``||A x - kappa B x|| / (||A||_1 ||x||)`` per column; B-null columns use ``||B x|| / (||B||_1 ||x||)``."""
    A, B = pencil.A, pencil.B
    nA, nB = _norm1(A) or 1.0, _norm1(B) or 1.0
    kappas = np.asarray(kappas, dtype=float)
    out = np.empty(len(kappas))
    for s in range(0, len(kappas), chunk):
        Xc = X[:, s : s + chunk]
        kc = kappas[s : s + chunk]
        BX = B @ Xc
        xn = np.linalg.norm(Xc, axis=0)
        inf = np.isinf(kc)
        R = A @ Xc - BX * np.where(inf, 0.0, kc)
        res = np.linalg.norm(R, axis=0) / (nA * xn)
        res[inf] = np.linalg.norm(BX[:, inf], axis=0) / (nB * xn[inf])
        out[s : s + chunk] = res
    return out


# ---------------------------------------------------------------- weak-symmetry reduction


class _Reduction:
    """Null-space basis of the weak-symmetry coupling and the reduced stress matrices."""

    def __init__(self, pencil: AssembledPencil):
        parts = pencil.parts
        spaces = parts.spaces
        T = spaces.mesh.n_triangles
        nd, dq = 4 * spaces.d, spaces.dq
        self.spaces = spaces
        self.parts = parts
        self.aS = pencil.aS
        D = parts.coupling.tocsr()
        sd = spaces.stress_dofs.reshape(T, nd)
        # D is block diagonal: rotation dofs of element e only see stresses of e
        Dc = D.tocoo()
        r_e, r_loc = np.divmod(Dc.row, dq)
        c_e, c_loc = np.divmod(Dc.col, nd)
        if np.any(r_e != c_e):
            raise SolverError("weak-symmetry coupling is not element-local")
        blocks = np.zeros((T, dq, nd))
        np.add.at(blocks, (r_e, r_loc, c_loc), Dc.data)
        _, svals, Vt = np.linalg.svd(blocks)
        rank = dq
        if dq and svals[:, -1].min() <= 1e-12 * svals[:, 0].max():
            raise SolverError("weak-symmetry coupling is rank deficient")
        Zloc = np.transpose(Vt[:, rank:, :], (0, 2, 1))  # (T, nd, nd - dq), orthonormal columns
        nz = nd - rank
        rows = np.broadcast_to(sd[:, :, None], (T, nd, nz)).ravel()
        cols = np.broadcast_to((np.arange(T)[:, None] * nz + np.arange(nz)[None, :])[:, None, :], (T, nd, nz)).ravel()
        self.Z = sp.csr_matrix((Zloc.ravel(), (rows, cols)), shape=(spaces.n_stress, T * nz))
        self.K = (parts.divdiv + pencil.aS * parts.penalty - parts.consistency).tocsr()
        self.M = parts.compliance.tocsr()
        Zt = self.Z.T.tocsr()
        self.KZ = (Zt @ self.K @ self.Z).tocsr()
        self.MZ = (Zt @ self.M @ self.Z).tocsr()
        self.KZ = 0.5 * (self.KZ + self.KZ.T)
        self.MZ = 0.5 * (self.MZ + self.MZ.T)
        self.D = D
        self._DDt = None

    def full_vectors(self, Y: np.ndarray, omega2: np.ndarray, null_tol: float) -> np.ndarray:
        """Lift reduced eigenvectors to (sigma, s); s solves D^T s = (K - w2 M) sigma / w2 in least squares."""
        sig = self.Z @ Y
        X = np.zeros((self.spaces.ndof, Y.shape[1]))
        X[: self.spaces.n_stress] = sig
        if self.spaces.n_rotation == 0:
            return X
        if self._DDt is None:
            self._DDt = spla.splu((self.D @ self.D.T).tocsc())
        finite = np.isfinite(omega2) & (np.abs(omega2) > null_tol)
        if finite.any():
            idx = np.flatnonzero(finite)
            R = (self.K @ sig[:, idx] - self.M @ sig[:, idx] * omega2[idx]) / omega2[idx]
            X[self.spaces.n_stress :, idx] = self._DDt.solve(np.asarray(self.D @ R))
        return X


def _rotation_kernel(pencil: AssembledPencil, keep_vectors: bool):
    spaces = pencil.parts.spaces
    q = spaces.n_rotation
    X = None
    if keep_vectors:
        X = np.zeros((spaces.ndof, q))
        X[spaces.n_stress + np.arange(q), np.arange(q)] = 1.0
    # A and B share the rotation columns exactly, so A x - B x = 0 for x = (0, s)
    diff = (pencil.A - pencil.B)[:, spaces.n_stress :]
    res = np.zeros(q)
    if diff.nnz:
        res = np.sqrt(np.asarray(diff.multiply(diff).sum(axis=0)).ravel()) / (_norm1(pencil.A) or 1.0)
    return np.ones(q), res, X


# ---------------------------------------------------------------- dense solver


def solve_dense(
    pencil: AssembledPencil,
    kernel_tol: float = 1e-6,
    positivity_tol: float = 1e-6,
    keep_vectors: bool = False,
) -> ModeSet:
    """All finite eigenvalues of (A, B) with eigenvectors; B-null modes come back as trace-null."""
    n = pencil.dim
    if n > DENSE_MAX_DIM:
        raise SolverError(f"pencil dimension {n} exceeds the dense-solver limit {DENSE_MAX_DIM}")
    if pencil.structured:
        return _solve_dense_structured(pencil, kernel_tol, positivity_tol, keep_vectors)
    return _solve_dense_generic(pencil, kernel_tol, positivity_tol, keep_vectors)


def _solve_dense_generic(pencil, kernel_tol, positivity_tol, keep_vectors):
    A = pencil.A.toarray()
    B = pencil.B.toarray()
    method = "dense-qz"
    try:
        la.cholesky(B, lower=True)
        kappas, X = la.eigh(A, B)
        method = "dense-eigh"
    except la.LinAlgError:
        alpha, beta, X = la.eig(A, B, homogeneous_eigvals=True)
        scale = np.maximum(np.abs(alpha), np.abs(beta))
        scale[scale == 0] = 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            kappas = np.where(np.abs(beta) <= 1e-13 * scale, np.inf, alpha / beta)
        if np.any(np.abs(np.imag(kappas[np.isfinite(kappas)])) > 1e-8 * np.maximum(1, np.abs(kappas[np.isfinite(kappas)]))):
            log.warning("pencil has complex eigenvalues; imaginary parts are discarded")
        kappas = np.real(np.where(np.isinf(kappas), np.inf, kappas))
        X = np.real(X)
    if np.any(np.abs(kappas) < 1e-12):
        raise SolverError("A is numerically singular")
    res = pencil_residuals(pencil, X, kappas)
    return _build_modeset(kappas, res, X if keep_vectors else None, method, kernel_tol, positivity_tol)


def _solve_dense_structured(pencil, kernel_tol, positivity_tol, keep_vectors):
    red = _Reduction(pencil)
    KZ = red.KZ.toarray()
    MZ = red.MZ.toarray()
    incompressible = pencil.material is not None and pencil.material.incompressible
    info = {"reduced_dim": KZ.shape[0], "rotation_dim": red.spaces.n_rotation}
    if not incompressible:
        try:
            omega2, Y = la.eigh(KZ, MZ)
        except la.LinAlgError as exc:
            raise SolverError(f"reduced compliance matrix is not positive definite: {exc}") from exc
        kappas = 1.0 + omega2
    else:
        try:
            theta, Y = la.eigh(MZ, KZ + MZ)
        except la.LinAlgError as exc:
            raise SolverError(
                "A is not positive definite on the weakly symmetric stresses; "
                f"aS={pencil.aS} is likely below the stability threshold ({exc})"
            ) from exc
        with np.errstate(divide="ignore"):
            kappas = np.where(theta <= TRACE_NULL_THETA, np.inf, 1.0 / np.where(theta == 0, 1, theta))
        omega2 = kappas - 1.0
    if np.any(np.abs(kappas) < 1e-10):
        raise SolverError(f"A is numerically singular (aS={pencil.aS} below the stability threshold?)")
    X = red.full_vectors(Y, omega2, null_tol=kernel_tol)
    res = pencil_residuals(pencil, X, kappas)
    k_rot, r_rot, X_rot = _rotation_kernel(pencil, keep_vectors)
    kappas = np.concatenate([kappas, k_rot])
    res = np.concatenate([res, r_rot])
    vectors = np.hstack([X, X_rot]) if keep_vectors else None
    # the kappa = 1 eigenvalue is defective on the full pencil: dim Q_h of its
    # algebraic copies have no eigenvector of their own and are not listed
    info["defective_kernel_copies"] = red.spaces.n_rotation
    return _build_modeset(kappas, res, vectors, "dense-reduced", kernel_tol, positivity_tol, info=info)


# ---------------------------------------------------------------- shift-invert solver


def solve_shift_invert(
    pencil: AssembledPencil,
    request: SolveRequest | None = None,
    kernel_tol: float = 1e-6,
    positivity_tol: float = 1e-6,
    keep_vectors: bool = False,
) -> ModeSet:
    """The ``request.m`` eigenvalues closest to the shift via implicitly restarted Krylov iteration.

    The spectral transformation uses a sparse LU factorization of
    ``A - kappa0 B`` (or its weakly-symmetric reduction). With
    ``side="above"`` only eigenvalues larger than the shift are returned;
    for ``1 < kappa0`` this skips the huge kappa = 1 cluster.
    """
    request = request or SolveRequest()
    if request.m > max(1, pencil.dim // 4) and pencil.dim > 16:
        raise SolverError(f"requested {request.m} modes exceeds dimension/4 = {pencil.dim // 4}")
    if pencil.structured:
        return _shift_invert_structured(pencil, request, kernel_tol, positivity_tol, keep_vectors)
    return _shift_invert_generic(pencil, request, kernel_tol, positivity_tol, keep_vectors)


def _factorize(M, what):
    try:
        lu = spla.splu(M.tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SolverError(f"factorization of {what} failed ({exc}); perturb the shift") from exc
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= 1e-14 * diag.max():
        raise SolverError(f"{what} is numerically singular; the shift hit an eigenvalue, perturb it")
    return lu


class _OrderedFactor:
    """Symmetric-mode LU of a DG block matrix in a nested-dissection element order.

    Diagonal pivoting keeps the fill of the ordering; if the factor fails a
    residual check, the matrix is refactored with threshold pivoting.
    """

    def __init__(self, M, element_order, block, what):
        self.perm = (element_order[:, None] * block + np.arange(block)[None, :]).ravel()
        P = M.tocsr()[self.perm][:, self.perm].tocsc()
        self.lu = None
        try:
            lu = spla.splu(P, permc_spec="NATURAL", options=dict(SymmetricMode=True), diag_pivot_thresh=0.0)
            probe = _start_vector(P.shape[0])
            r = np.linalg.norm(P @ lu.solve(probe) - probe) / np.linalg.norm(probe)
            if np.isfinite(r) and r <= 1e-6:
                self.lu = lu
            else:
                log.info("unpivoted factor of %s inaccurate (residual %.1e); pivoting", what, r)
        except RuntimeError:
            log.info("unpivoted factor of %s failed; pivoting", what)
        if self.lu is None:
            self.lu = _factorize(P, what)

    def solve(self, b):
        x = np.empty_like(b)
        x[self.perm] = self.lu.solve(b[self.perm])
        return x


def _pick(nu, m, side):
    nu = np.real(nu)
    order = np.argsort(-nu) if side == "above" else np.argsort(-np.abs(nu))
    if side == "above":
        order = order[nu[order] > 0]
    return order[:m]


def _start_vector(n):
    # fixed start vector: ARPACK's default is random, which breaks bit-identical reruns
    return np.random.default_rng(12345).standard_normal(n)


def _ncv(request, n):
    ncv = request.ncv or max(2 * request.m + 1, 40)
    return min(ncv, n - 1)


def _shift_invert_generic(pencil, request, kernel_tol, positivity_tol, keep_vectors):
    A, B = pencil.A.tocsc(), pencil.B.tocsc()
    n = pencil.dim
    k0 = request.shift
    S = (A - k0 * B).tocsc()
    lu = _factorize(S, f"A - {k0} B")
    if n <= max(4 * request.m + 4, 64):
        OP = lu.solve(B.toarray())
        nu, V = la.eig(OP)
    else:
        op = spla.LinearOperator((n, n), matvec=lambda x: lu.solve(B @ x), dtype=float)
        which = "LR" if request.side == "above" else "LM"
        try:
            nu, V = spla.eigs(
                op, k=request.m, which=which, tol=request.tol, maxiter=request.maxiter,
                ncv=_ncv(request, n), v0=_start_vector(n),
            )
        except spla.ArpackNoConvergence as exc:
            raise SolverError(f"Arnoldi iteration did not converge in {request.maxiter} iterations") from exc
    sel = _pick(nu, request.m, request.side)
    V = np.real(V[:, sel])
    kappas = k0 + 1.0 / np.real(nu[sel])
    xb = np.einsum("ij,ij->j", V, B @ V)
    ok = np.abs(xb) > 1e-12 * np.einsum("ij,ij->j", V, V) * (_norm1(B) or 1.0)
    kappas[ok] = np.einsum("ij,ij->j", V[:, ok], A @ V[:, ok]) / xb[ok]
    res = pencil_residuals(pencil, V, kappas)
    return _build_modeset(
        kappas, res, V if keep_vectors else None, "shift-invert", kernel_tol, positivity_tol,
        shift=k0, tol=request.tol,
    )


def _shift_invert_structured(pencil, request, kernel_tol, positivity_tol, keep_vectors):
    red = _Reduction(pencil)
    k0 = request.shift
    sigma = k0 - 1.0
    n = red.KZ.shape[0]
    S = red.KZ - sigma * red.MZ
    order = nested_dissection_order(red.spaces.mesh)
    lu = _OrderedFactor(S, order, n // red.spaces.mesh.n_triangles, f"reduced A - {k0} B")
    del S
    if n <= max(4 * request.m + 4, 64):
        OP = lu.solve(red.MZ.toarray())
        nu, Y = la.eig(OP)
        nu, Y = np.real(nu), np.real(Y)
    else:
        # Lanczos in the reduced compliance inner product (semi-definite when incompressible)
        opinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
        which = "LA" if request.side == "above" else "LM"
        try:
            w, Y = spla.eigsh(
                red.KZ, k=request.m, M=red.MZ, sigma=sigma, which=which, OPinv=opinv,
                tol=request.tol, maxiter=request.maxiter, ncv=_ncv(request, n), mode="normal",
                v0=_start_vector(n),
            )
        except spla.ArpackNoConvergence as exc:
            raise SolverError(f"Lanczos iteration did not converge in {request.maxiter} iterations") from exc
        nu = 1.0 / (w - sigma)
    sel = _pick(nu, request.m, request.side)
    Y = Y[:, sel]
    omega2 = sigma + 1.0 / nu[sel]
    # Rayleigh quotients are accurate to the squared residual
    my = np.einsum("ij,ij->j", Y, red.MZ @ Y)
    ok = my > 1e-14 * np.einsum("ij,ij->j", Y, Y)
    omega2[ok] = np.einsum("ij,ij->j", Y[:, ok], red.KZ @ Y[:, ok]) / my[ok]
    kappas = 1.0 + omega2
    X = red.full_vectors(Y, omega2, null_tol=kernel_tol)
    res = pencil_residuals(pencil, X, kappas)
    bad = res > max(request.tol, 1e-8) * 10
    if bad.any():
        log.warning("%d shift-invert modes have residual above tolerance (max %.2e)", bad.sum(), res.max())
    return _build_modeset(
        kappas, res, X if keep_vectors else None, "shift-invert-reduced", kernel_tol, positivity_tol,
        shift=k0, tol=request.tol, info={"reduced_dim": n},
    )


def solve(pencil: AssembledPencil, request: SolveRequest | None = None, **kw) -> ModeSet:
    request = request or SolveRequest()
    if request.strategy == "dense":
        return solve_dense(pencil, **kw)
    return solve_shift_invert(pencil, request, **kw)
