"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or directly as
``python3 tests/test_acceptance.py``. Runtime budgets are part of each
criterion. Criterion 3 is known to fail; the reasoning is recorded in the
decisions ledger and the test is left failing rather than weakened.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).resolve().parent))

from fields import conforming_fields  # noqa: E402

from mixdg.forms import assemble_conforming_A, assemble_parts, assemble_pencil, jump_operator, material_from_E_nu  # noqa: E402
from mixdg.mesh import BoundaryPartition, build_uniform_mesh  # noqa: E402
from mixdg.space import build_spaces  # noqa: E402
from mixdg.spectral import KERNEL, SolveRequest, solve_dense, solve_shift_invert  # noqa: E402
from mixdg.study import (  # noqa: E402
    RunConfig,
    Runner,
    convergence_study,
    fit_order,
    lambda_limit_study,
    sweep_penalty,
)

H = [1 / 16, 1 / 32, 1 / 48, 1 / 64]
TABLE1_FIRST_THREE = np.array([0.6804472, 1.6988800, 1.8222052])
PARTITIONS = ("bottom", "left", "top", "right", "all-dirichlet")

CRITERIA = {}
RESULTS = {}


def criterion(number, title, budget):
    """Register a check returning ``(passed, detail)``; ``budget`` is the runtime limit in seconds."""

    def wrap(fn):
        CRITERIA[number] = (title, budget, fn)
        return fn

    return wrap


def evaluate(number):
    if number in RESULTS:
        return RESULTS[number]
    title, budget, fn = CRITERIA[number]
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    if elapsed > budget:
        ok = False
        detail += f"; runtime {elapsed:.0f} s exceeds {budget:.0f} s"
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} [{title}] {detail} ({elapsed:.1f} s)"
    print(line, flush=True)
    RESULTS[number] = (ok, line)
    return RESULTS[number]


# ---------------------------------------------------------------- criteria


@criterion(1, "order fit on published data", 1.0)
def fitter_oracle():
    a = fit_order(H, [0.6806068, 0.6807467, 0.6807850, 0.6808020])
    b = fit_order(H, [1.8476611, 1.8481669, 1.8483181, 1.8483888])
    ok = (
        abs(a.alpha - 1.34) <= 0.03 and abs(a.omega_ex - 0.6808381) <= 2e-4
        and abs(b.alpha - 1.19) <= 0.03 and abs(b.omega_ex - 1.8485618) <= 2e-4
    )
    detail = (f"alpha={a.alpha:.4f} omega_ex={a.omega_ex:.7f}; "
              f"alpha={b.alpha:.4f} omega_ex={b.omega_ex:.7f}")
    return ok, detail


@criterion(2, "boundary partition identification", 300.0)
def partition_identification():
    runner = Runner()
    errors = {}
    for bc in PARTITIONS:
        cfg = RunConfig(N=8, k=3, nu=0.35, aS=80.0, bc=bc, m=3, solver="dense")
        w = runner.frequencies(cfg)
        errors[bc] = float(np.max(np.abs(w[:3] - TABLE1_FIRST_THREE) / TABLE1_FIRST_THREE)) if len(w) >= 3 else np.inf
    matching = [bc for bc in PARTITIONS if errors[bc] <= 5e-3]
    default = RunConfig().bc
    ok = default in matching
    listing = " ".join(f"{bc}={err:.1e}" for bc, err in errors.items())
    return ok, f"matching={','.join(matching) or 'none'} default={default}; max rel err: {listing}"


@criterion(3, "spurious modes at aS=20, none at aS=80", 600.0)
def spurious_reproduction():
    runner = Runner()
    base = RunConfig(N=8, k=3, nu=0.35, m=10, solver="dense")
    table = sweep_penalty(base, [20.0, 80.0], 1000.0, runner)
    counts = table.spurious_counts()
    ok = counts[20.0] >= 2 and counts[80.0] == 0
    return ok, f"flags at aS=20: {counts[20.0]} (need >= 2), at aS=80: {counts[80.0]} (need 0)"


@criterion(4, "kernel cluster exactness", 30.0)
def kernel_cluster():
    parts = []
    ok = True
    for N, k in ((2, 1), (4, 2)):
        cfg = RunConfig(N=N, k=k, solver="dense")
        runner = Runner()
        spaces = runner.problem(cfg)[1]
        kernel = runner.solve(cfg).of_class(KERNEL)
        worst = max(abs(m.kappa - 1.0) for m in kernel) if kernel else np.inf
        ok &= len(kernel) >= spaces.n_rotation and worst <= 1e-9
        parts.append(f"(N={N},k={k}) {len(kernel)} >= {spaces.n_rotation}, max|kappa-1|={worst:.1e}")
    return ok, "; ".join(parts)


@criterion(5, "shift-invert equals dense", 60.0)
def solver_equivalence():
    pencil = Runner().pencil(RunConfig(N=8, k=2, nu=0.35, aS=1000.0))
    dense = np.sort([m.kappa for m in solve_dense(pencil).physical()])
    si = np.sort([m.kappa for m in solve_shift_invert(pencil, SolveRequest(m=15, shift=1.3)).modes])
    expected = dense[dense > 1.3][:15]
    err = float(np.max(np.abs(si - expected) / expected)) if len(si) == len(expected) == 15 else np.inf
    return err <= 1e-8, f"15 eigenvalues, max rel diff {err:.1e} (need <= 1e-8)"


@criterion(6, "matrix properties on the small grid", 120.0)
def matrix_properties():
    worst = {"asym": 0.0, "quad": 0.0, "conf": 0.0}

    def rel_asym(M):
        return abs(M - M.T).max() / abs(M).max()

    for N in (2, 4):
        for k in (1, 2, 3):
            for nu in (0.35, 0.5):
                mesh = build_uniform_mesh(N, BoundaryPartition.from_name("bottom"))
                spaces = build_spaces(mesh, k)
                mat = material_from_E_nu(1.0, nu)
                lo = assemble_parts(mesh, spaces, mat, exactness=2 * k)
                hi = assemble_parts(mesh, spaces, mat, exactness=2 * k + 4)
                pencil = assemble_pencil(mesh, spaces, mat, 50.0, lo)
                worst["asym"] = max(worst["asym"], rel_asym(pencil.A), rel_asym(pencil.B))
                for a, b in ((lo.A(50.0), hi.A(50.0)), (lo.B(), hi.B())):
                    worst["quad"] = max(worst["quad"], abs(sp.csr_matrix(a - b)).max() / abs(b).max())
                X = conforming_fields(spaces, 3, seed=N * 10 + k)
                assert np.linalg.norm(jump_operator(spaces) @ X) <= 1e-12 * np.linalg.norm(X)
                Ah = X.T @ (lo.A(250.0) @ X)
                Ac = assemble_conforming_A(mesh, spaces, mat, X, lo)
                worst["conf"] = max(worst["conf"], np.abs(Ah - Ac).max() / np.abs(Ac).max())
    ok = worst["asym"] <= 1e-12 and worst["quad"] <= 1e-12 and worst["conf"] <= 1e-11
    return ok, (f"asymmetry {worst['asym']:.1e}, quadrature change {worst['quad']:.1e}, "
                f"conforming mismatch {worst['conf']:.1e}")


@criterion(7, "self-computed convergence order", 1800.0)
def convergence_order():
    runner = Runner()
    out, ok = [], True
    for nu, lo, hi in ((0.35, 1.2, 1.5), (0.5, 1.05, 1.35)):
        base = RunConfig(k=2, nu=nu, aS=1000.0, solver="shift-invert")
        fit = convergence_study(base, [16, 32, 48, 64], [0], runner)[0]
        monotone = fit.defined and bool(np.all(np.diff(fit.omega) > 0))
        ok &= fit.defined and lo <= fit.alpha <= hi and monotone
        omegas = " ".join(f"{w:.7f}" for w in fit.omega)
        out.append(f"nu={nu}: alpha={fit.alpha:.4f} in [{lo}, {hi}] (2s={fit.reference_alpha:.4f}), omega {omegas}")
    return ok, "; ".join(out)


@criterion(8, "locking-free first mode", 120.0)
def locking_free():
    runner = Runner()
    base = RunConfig(N=16, k=2, m=2, solver="shift-invert")
    w49 = runner.frequencies(base.replace(nu=0.49))[0]
    w50 = runner.frequencies(base.replace(nu=0.5))[0]
    rel = abs(w49 - w50) / w50
    return rel <= 1e-2, f"omega(0.49)={w49:.7f} omega(0.5)={w50:.7f} rel diff {rel:.2%} (need <= 1%)"


@criterion(9, "incompressible-limit rate", 300.0)
def limit_rate():
    study = lambda_limit_study(RunConfig(N=16, k=2, m=2, solver="shift-invert"), [0.45, 0.49, 0.499, 0.4999], 0)
    gaps = " ".join(f"{g:.2e}" for g in study.gap)
    return -1.3 <= study.slope <= -0.7, f"slope {study.slope:.3f} (need [-1.3, -0.7]); gaps {gaps}"


def cell_average_diagnostic():
    """Spurious counts for criterion 3 with the cell-average penalty length; informational only."""
    base = RunConfig(N=8, k=3, nu=0.35, m=10, solver="dense", penalty_length="cell-average")
    counts = sweep_penalty(base, [20.0, 80.0], 1000.0).spurious_counts()
    line = (f"INFO criterion 3 with cell-average penalty length (not counted): "
            f"flags at aS=20: {counts[20.0]}, at aS=80: {counts[80.0]}")
    print(line, flush=True)
    return line


# ---------------------------------------------------------------- pytest entry points


@pytest.mark.acceptance
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, line = evaluate(number)
    assert ok, line


@pytest.mark.acceptance
def test_cell_average_diagnostic():
    assert cell_average_diagnostic().startswith("INFO")


if __name__ == "__main__":
    lines = [evaluate(n) for n in sorted(CRITERIA)]
    cell_average_diagnostic()
    print(f"{sum(ok for ok, _ in lines)}/{len(lines)} criteria passed")
    sys.exit(0 if all(ok for ok, _ in lines) else 1)
