import json

import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp

from mixdg.forms import AssembledPencil
from mixdg.spectral import (
    KERNEL,
    PHYSICAL,
    TRACE_NULL,
    UNRESOLVED,
    SolveRequest,
    SolverError,
    classify_modes,
    pencil_residuals,
    solve,
    solve_dense,
    solve_shift_invert,
)
from mixdg.study import RunConfig, Runner


@pytest.fixture(scope="module")
def runner():
    return Runner()


def diag_pencil():
    return AssembledPencil.from_matrices(sp.diags([2.0, 3.0]), sp.identity(2))


def test_diagonal_pencil_dense():
    ms = solve_dense(diag_pencil())
    assert np.allclose(ms.kappas, [2.0, 3.0], atol=1e-14)
    assert ms.counts()[PHYSICAL] == 2
    assert ms.frequencies() == pytest.approx([1.0, np.sqrt(2.0)])


def test_diagonal_pencil_shift_invert():
    ms = solve_shift_invert(diag_pencil(), SolveRequest(m=1, shift=1.9))
    assert len(ms) == 1
    assert ms.modes[0].kappa == pytest.approx(2.0, abs=1e-12)


def test_singular_shift_rejected():
    with pytest.raises(SolverError):
        solve_shift_invert(diag_pencil(), SolveRequest(m=1, shift=2.0))


def test_classification_examples():
    phys = 1.0 + 0.6804472**2  # 1.463008...
    ms = classify_modes([1 + 1e-12, phys, 0.97, np.inf])
    by_kappa = {m.kappa: m for m in ms.modes}
    assert by_kappa[1 + 1e-12].cls == KERNEL
    assert by_kappa[phys].cls == PHYSICAL
    assert by_kappa[phys].omega == pytest.approx(0.6804472, abs=1e-12)
    assert by_kappa[0.97].cls == UNRESOLVED
    assert by_kappa[np.inf].cls == TRACE_NULL
    assert [m.kappa for m in ms.modes][:3] == sorted([1 + 1e-12, phys, 0.97])


def test_request_validation():
    for bad in ({"m": 0}, {"tol": 0.0}, {"strategy": "qr"}, {"side": "below"}, {"m": 2.5}):
        with pytest.raises(ValueError):
            SolveRequest(**bad)


def test_too_many_modes_rejected(runner):
    pencil = runner.pencil(RunConfig(N=2, k=1))
    with pytest.raises(SolverError):
        solve_shift_invert(pencil, SolveRequest(m=pencil.dim // 4 + 1))


def test_kernel_cluster_coarse(runner):
    ms = runner.solve(RunConfig(N=2, k=1, solver="dense"))
    kernel = ms.of_class(KERNEL)
    assert len(kernel) >= 8
    assert all(abs(m.kappa - 1.0) <= 1e-9 for m in kernel)
    assert ms.counts()[UNRESOLVED] == 0


@pytest.mark.parametrize("N,k,nu", [(2, 1, 0.35), (2, 2, 0.35), (2, 1, 0.5), (4, 1, 0.35)])
def test_reduced_dense_matches_full_qz(runner, N, k, nu):
    """The kernel-reduced symmetric solve agrees with a QZ solve of the full pencil."""
    pencil = runner.pencil(RunConfig(N=N, k=k, nu=nu, aS=80.0))
    reduced = solve_dense(pencil)
    A, B = pencil.A.toarray(), pencil.B.toarray()
    alpha, beta = la.eig(A, B, right=False, homogeneous_eigvals=True)
    finite = np.abs(beta) > 1e-10 * np.maximum(np.abs(alpha), 1.0)
    kappa = np.real(alpha[finite] / beta[finite])
    qz = np.sort(kappa[kappa > 1.0 + 1e-4])
    ours = np.sort([m.kappa for m in reduced.physical()])
    assert len(ours) == len(qz)
    assert np.allclose(ours, qz, rtol=1e-8)
    # every full-pencil finite eigenvalue is kernel or physical
    assert np.all(np.abs(kappa[kappa <= 1.0 + 1e-4] - 1.0) < 1e-4)
    if nu == 0.5:
        assert reduced.counts()[TRACE_NULL] > 0 and np.any(~finite)


def test_residual_certificate_dense(runner):
    pencil = runner.pencil(RunConfig(N=4, k=2, aS=80.0))
    ms = solve_dense(pencil, keep_vectors=True)
    phys = [i for i, m in enumerate(ms.modes) if m.cls == PHYSICAL]
    assert max(ms.modes[i].residual for i in phys) <= 1e-8
    res = pencil_residuals(pencil, ms.vectors[:, phys[:5]], [ms.modes[i].kappa for i in phys[:5]])
    assert np.all(res <= 1e-8)
    w = ms.frequencies()
    assert np.all(np.diff(w) >= 0)


@pytest.mark.parametrize("nu", [0.35, 0.5])
def test_shift_invert_subset_of_dense(runner, nu):
    cfg = RunConfig(N=4, k=2, nu=nu, aS=80.0, m=6, shift=1.3)
    pencil = runner.pencil(cfg)
    dense = solve_dense(pencil).frequencies()
    si = solve_shift_invert(pencil, SolveRequest(m=6, shift=1.3))
    w = si.frequencies()
    assert len(w) == 6
    expected = dense[dense**2 + 1 > 1.3][:6]
    assert np.allclose(w, expected, rtol=1e-8)
    assert max(m.residual for m in si.modes) <= 1e-8


def test_incompressible_has_trace_null_modes(runner):
    ms = runner.solve(RunConfig(N=2, k=2, nu=0.5, aS=80.0, solver="dense"))
    assert ms.counts()[TRACE_NULL] >= 1
    assert ms.counts()[UNRESOLVED] == 0
    assert np.all(np.isfinite(ms.frequencies()))


def test_dispatch_and_outputs(runner, tmp_path):
    pencil = runner.pencil(RunConfig(N=2, k=1))
    dense = solve(pencil, SolveRequest(strategy="dense"))
    assert dense.method == "dense-reduced"
    text = dense.to_csv(tmp_path / "m.csv")
    lines = text.strip().splitlines()
    assert lines[0] == "index,kappa,omega,class,residual"
    assert len(lines) == len(dense) + 1
    doc = json.loads(dense.to_json(tmp_path / "m.json"))
    assert doc["counts"] == dense.counts()
    assert len(doc["modes"]) == len(dense)
    with pytest.raises(ValueError):
        dense.vector(0)


def test_shift_invert_deterministic(runner):
    cfg = RunConfig(N=8, k=2, m=5, solver="shift-invert")
    a = runner.solve(cfg).to_csv()
    b = runner.solve(cfg).to_csv()
    assert a == b


@pytest.mark.slow
def test_fine_mesh_fundamental(runner):
    """k=2 on the 32x32 mesh with a penalty of 1000 and a shift of 1.4."""
    cfg = RunConfig(N=32, k=2, aS=1000.0, m=3, shift=1.4, solver="shift-invert")
    w = runner.solve(cfg).frequencies()
    assert abs(w[0] - 0.6807467) <= 2e-4


def test_penalty_insensitive_above_threshold(runner):
    base = RunConfig(N=8, k=3, m=5, solver="dense")
    w40 = runner.solve(base.replace(aS=40.0)).frequencies(5)
    w80 = runner.solve(base.replace(aS=80.0)).frequencies(5)
    assert np.all(np.abs(w40 - w80) / w80 <= 5e-4)


@pytest.mark.xfail(strict=True, reason="spurious modes at a penalty of 20 are not reproduced; see decisions ledger")
def test_penalty_20_differs_from_80(runner):
    base = RunConfig(N=8, k=3, m=5, solver="dense")
    w20 = runner.solve(base.replace(aS=20.0)).frequencies(5)
    w80 = runner.solve(base.replace(aS=80.0)).frequencies(5)
    assert np.any(np.abs(w20 - w80) / w80 > 1e-2)
