"""Experiment harness: penalty sweeps, mesh refinement, order fitting and the incompressible limit.

Every run is described by a :class:`RunConfig`. Frequencies are the physical
``omega = sqrt(kappa - 1)`` values reported by :mod:`mixdg.spectral`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .forms import PENALTY_LENGTHS, assemble_parts, assemble_pencil, material_from_E_nu
from .mesh import PATTERNS, SIDES, BoundaryPartition, build_uniform_mesh
from .space import MAX_DEGREE, build_spaces
from .spectral import SolveRequest, SolverError, solve_dense, solve_shift_invert

AUTO_DENSE_MAX = 3000
SPURIOUS_RTOL = 1e-2
TRACKING_RTOL = 5e-2
ALPHA_RANGE = (0.2, 5.0)
ALPHA_STEP = 1e-3
ALPHA_TOL = 1e-6
UNDEFINED = "undefined"
SHORTFALL = "NA"

# Sobolev regularity exponents of the lowest eigenfunctions on the square
# with one clamped side; the eigenvalue error is expected to decay like h^(2 s).
REGULARITY_EXPONENTS = {0.35: 0.6797, 0.49: 0.5999, 0.5: 0.5946}
BOUNDARY_CHOICES = SIDES + ("all-dirichlet",)
SOLVERS = ("auto", "dense", "shift-invert")


class ConfigError(ValueError):
    pass


class StudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one eigenvalue run on the uniform unit-square mesh."""

    N: int = 8
    k: int = 3
    nu: float = 0.35
    aS: float = 1000.0
    bc: str = "bottom"
    m: int = 10
    solver: str = "auto"
    shift: float = 1.3
    E: float = 1.0
    rho: float = 1.0
    pattern: str = "diamond"
    penalty_length: str = "face"
    tol: float = 1e-10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def is_int(x):
            return isinstance(x, (int, np.integer)) and not isinstance(x, bool)

        if not is_int(self.N) or self.N < 2 or self.N % 2:
            raise ConfigError(f"N must be a positive even integer, got N={self.N!r}")
        if not is_int(self.k) or not 1 <= self.k <= MAX_DEGREE:
            raise ConfigError(f"k must be an integer in [1, {MAX_DEGREE}], got k={self.k!r}")
        if not (isinstance(self.nu, (int, float)) and 0.0 < self.nu <= 0.5):
            raise ConfigError(f"nu must lie in (0, 0.5], got nu={self.nu!r}")
        for name in ("aS", "E", "rho", "tol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {name}={v!r}")
        if not is_int(self.m) or self.m < 1:
            raise ConfigError(f"m (mode count) must be a positive integer, got m={self.m!r}")
        if self.bc not in BOUNDARY_CHOICES:
            raise ConfigError(f"bc must be one of {', '.join(BOUNDARY_CHOICES)}, got bc={self.bc!r}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {', '.join(SOLVERS)}, got solver={self.solver!r}")
        if not (isinstance(self.shift, (int, float)) and math.isfinite(self.shift)):
            raise ConfigError(f"shift must be a finite number, got shift={self.shift!r}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {', '.join(PATTERNS)}, got pattern={self.pattern!r}")
        if self.penalty_length not in PENALTY_LENGTHS:
            raise ConfigError(
                f"penalty_length must be one of {', '.join(PENALTY_LENGTHS)}, got {self.penalty_length!r}"
            )

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def _problem_key(cfg: RunConfig):
    return (cfg.N, cfg.k, cfg.nu, cfg.E, cfg.rho, cfg.bc, cfg.pattern, cfg.penalty_length)


class Runner:
    """Runs configurations, reusing the penalty-independent assembly between runs."""

    def __init__(self):
        self._cache = {}

    def problem(self, cfg: RunConfig):
        """(mesh, spaces, material, parts) for ``cfg``; the penalty value is not part of it."""
        key = _problem_key(cfg)
        if key not in self._cache:
            self._cache.clear()  # one problem at a time keeps memory flat
            mesh = build_uniform_mesh(cfg.N, BoundaryPartition.from_name(cfg.bc), cfg.pattern)
            spaces = build_spaces(mesh, cfg.k)
            material = material_from_E_nu(cfg.E, cfg.nu, cfg.rho)
            parts = assemble_parts(mesh, spaces, material, penalty_length=cfg.penalty_length)
            self._cache[key] = (mesh, spaces, material, parts)
        return self._cache[key]

    def pencil(self, cfg: RunConfig):
        mesh, spaces, material, parts = self.problem(cfg)
        return assemble_pencil(mesh, spaces, material, cfg.aS, parts)

    def solve(self, cfg: RunConfig, keep_vectors: bool = False):
        pencil = self.pencil(cfg)
        strategy = cfg.solver
        if strategy == "auto":
            strategy = "dense" if pencil.dim <= AUTO_DENSE_MAX else "shift-invert"
        if strategy == "dense":
            modes = solve_dense(pencil, keep_vectors=keep_vectors)
        else:
            request = SolveRequest(m=cfg.m, strategy="shift-invert", shift=cfg.shift, tol=cfg.tol)
            modes = solve_shift_invert(pencil, request, keep_vectors=keep_vectors)
        modes.info.setdefault("dim", pencil.dim)
        return modes

    def frequencies(self, cfg: RunConfig) -> np.ndarray:
        return self.solve(cfg).frequencies(cfg.m)


def run(cfg: RunConfig, keep_vectors: bool = False):
    """Solve one configuration and return its :class:`~mixdg.spectral.ModeSet`."""
    return Runner().solve(cfg, keep_vectors=keep_vectors)


# ---------------------------------------------------------------- spurious flags


def flag_spurious(values, reference, rtol: float = SPURIOUS_RTOL) -> list[bool]:
    """Mark entries of ``values`` without a partner in ``reference``.

    Pairs are matched greedily by increasing relative distance, each
    reference frequency at most once. An entry is spurious when it is left
    unmatched at relative tolerance ``rtol``.
    """
    values = np.asarray(values, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if len(values) == 0:
        return []
    if len(reference) == 0:
        return [True] * len(values)
    dist = np.abs(values[:, None] - reference[None, :]) / np.abs(reference[None, :])
    order = np.argsort(dist, axis=None, kind="stable")
    matched_v = np.zeros(len(values), dtype=bool)
    used_r = np.zeros(len(reference), dtype=bool)
    for flat in order:
        i, j = divmod(int(flat), len(reference))
        if dist[i, j] > rtol:
            break
        if matched_v[i] or used_r[j]:
            continue
        matched_v[i] = used_r[j] = True
    return [not bool(x) for x in matched_v]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return SHORTFALL
    return f"{x:.7f}"


@dataclass
class FrequencyTable:
    """Frequencies per swept parameter value, one column per value.

    Columns shorter than ``m`` are padded with the shortfall marker in
    output. ``flags[j][i]`` marks entry ``i`` of column ``j`` as spurious.
    """

    axis: str
    values: list
    columns: list
    flags: list
    m: int
    reference_value: float | int | None = None
    reference: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def column(self, value) -> np.ndarray:
        return np.asarray(self.columns[self.values.index(value)])

    def flagged(self, value) -> list[float]:
        j = self.values.index(value)
        return [w for w, f in zip(self.columns[j], self.flags[j]) if f]

    def spurious_counts(self) -> dict:
        return {v: int(sum(f)) for v, f in zip(self.values, self.flags)}

    def shortfall(self) -> dict:
        return {v: self.m - len(c) for v, c in zip(self.values, self.columns) if len(c) < self.m}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
        if self.reference_value is not None:
            buf.write(f"# reference {self.axis}: {self.reference_value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        header = ["mode"]
        for v in self.values:
            header += [f"{self.axis}={v}", f"spurious[{self.axis}={v}]"]
        writer.writerow(header)
        for i in range(self.m):
            row = [i + 1]
            for col, flags in zip(self.columns, self.flags):
                if i < len(col):
                    row += [_fmt(col[i]), int(flags[i])]
                else:
                    row += [SHORTFALL, SHORTFALL]
            writer.writerow(row)
        return _write(buf.getvalue(), path)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "axis": self.axis,
            "values": list(self.values),
            "m": self.m,
            "reference_value": self.reference_value,
            "reference": [float(w) for w in self.reference],
            "columns": [[float(w) for w in c] for c in self.columns],
            "flags": [[bool(f) for f in fl] for fl in self.flags],
            "spurious_counts": {str(k): v for k, v in self.spurious_counts().items()},
            "shortfall": {str(k): v for k, v in self.shortfall().items()},
        }

    def to_json(self, path=None) -> str:
        return _write(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", path)


def _write(text: str, path) -> str:
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def sweep_penalty(base: RunConfig, aS_values, reference_aS: float = 1000.0, runner: Runner | None = None) -> FrequencyTable:
    """Solve for each stabilization value and flag entries absent from the reference run."""
    aS_values = [float(a) for a in aS_values]
    if not aS_values:
        raise ConfigError("aS_values must not be empty")
    if reference_aS < max(aS_values):
        raise ConfigError(f"reference aS={reference_aS} must be >= max swept aS={max(aS_values)}")
    runner = runner or Runner()
    # a few extra reference modes so that the last swept entries can find their partner
    ref_cfg = base.replace(aS=float(reference_aS), m=base.m + 2)
    try:
        reference = runner.frequencies(ref_cfg)
    except (SolverError, np.linalg.LinAlgError) as exc:
        raise SolverError(f"reference run at aS={reference_aS} failed: {exc}") from exc
    columns, flags = [], []
    for a in aS_values:
        try:
            w = runner.frequencies(base.replace(aS=a))
        except (SolverError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"run at aS={a} failed: {exc}") from exc
        columns.append([float(x) for x in w])
        flags.append(flag_spurious(w, reference))
    return FrequencyTable(
        axis="aS", values=aS_values, columns=columns, flags=flags, m=base.m,
        reference_value=float(reference_aS), reference=[float(x) for x in reference],
        config={**base.to_dict(), "aS_values": aS_values, "reference_aS": float(reference_aS)},
    )


def refine_study(base: RunConfig, N_values, runner: Runner | None = None) -> FrequencyTable:
    """Frequencies on successively finer meshes, flagged against the finest one."""
    N_values = [int(n) for n in N_values]
    if not N_values:
        raise ConfigError("N_values must not be empty")
    if any(b <= a for a, b in zip(N_values, N_values[1:])):
        raise ConfigError(f"N_values must be strictly ascending, got {N_values}")
    runner = runner or Runner()
    columns = []
    for n in N_values:
        try:
            w = runner.frequencies(base.replace(N=n))
        except (SolverError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"run at N={n} failed: {exc}") from exc
        columns.append([float(x) for x in w])
    reference = columns[-1]
    flags = [flag_spurious(c, reference) for c in columns[:-1]] + [[False] * len(reference)]
    return FrequencyTable(
        axis="N", values=N_values, columns=columns, flags=flags, m=base.m,
        reference_value=N_values[-1], reference=list(reference),
        config={**base.to_dict(), "N_values": N_values},
    )


# ---------------------------------------------------------------- order fitting


@dataclass
class OrderFit:
    """Least-squares fit ``omega(h) = omega_ex + C h^alpha``.

    ``alpha`` is NaN and ``defined`` is False when the data carry no rate
    (all frequencies equal) or when the tracked mode could not be followed.
    """

    omega_ex: float
    C: float
    alpha: float
    residual: float
    h: list
    omega: list
    defined: bool = True
    mode: int | None = None
    reference_alpha: float | None = None
    error: str | None = None

    @property
    def sane(self) -> bool:
        """Extrapolated value lies within ten data spreads of the finest-mesh value."""
        if not self.defined:
            return False
        h = np.asarray(self.h)
        w = np.asarray(self.omega)
        spread = abs(w[np.argmax(h)] - w[np.argmin(h)])
        return abs(self.omega_ex - w[np.argmin(h)]) <= 10 * spread

    def to_dict(self) -> dict:
        alpha = self.alpha if self.defined else UNDEFINED
        return {
            "mode": self.mode,
            "alpha": alpha,
            "omega_ex": self.omega_ex if self.defined else UNDEFINED,
            "C": self.C if self.defined else UNDEFINED,
            "residual": self.residual if self.defined else UNDEFINED,
            "reference_alpha": self.reference_alpha,
            "h": list(map(float, self.h)),
            "omega": list(map(float, self.omega)),
            "error": self.error,
        }


def _inner_fit(h, w, alpha):
    X = np.column_stack([np.ones_like(h), h**alpha])
    coef, *_ = np.linalg.lstsq(X, w, rcond=None)
    r = X @ coef - w
    return float(r @ r), coef


def fit_order(h_values, omega_values) -> OrderFit:
    """Fit ``omega_ex + C h^alpha`` by an alpha scan with inner linear least squares.

    The scan covers [0.2, 5] in steps of 1e-3 and the best value is refined
    by golden-section search on the neighbouring grid cells.
    """
    h = np.asarray(h_values, dtype=float)
    w = np.asarray(omega_values, dtype=float)
    if h.shape != w.shape or h.ndim != 1:
        raise ConfigError("h_values and omega_values must be 1-d sequences of equal length")
    if np.any(~np.isfinite(h)) or np.any(h <= 0) or np.any(~np.isfinite(w)):
        raise ConfigError("h values must be positive and all data finite")
    if len(np.unique(h)) < 3:
        raise ConfigError(f"order fit needs at least 3 distinct h values, got {len(np.unique(h))}")
    if np.ptp(w) <= 1e-14 * max(1.0, np.abs(w).max()):
        return OrderFit(float(w.mean()), 0.0, math.nan, 0.0, list(h), list(w), defined=False,
                        error="all frequencies equal; no convergence rate")

    lo, hi = ALPHA_RANGE
    grid = lo + ALPHA_STEP * np.arange(int(round((hi - lo) / ALPHA_STEP)) + 1)
    sse = np.array([_inner_fit(h, w, a)[0] for a in grid])
    i = int(np.argmin(sse))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]

    g = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = _inner_fit(h, w, c)[0], _inner_fit(h, w, d)[0]
    while b - a > ALPHA_TOL * 1e-2:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = _inner_fit(h, w, c)[0]
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = _inner_fit(h, w, d)[0]
    alpha = 0.5 * (a + b)
    if sse[i] < _inner_fit(h, w, alpha)[0]:
        alpha = float(grid[i])
    s, (omega_ex, C) = _inner_fit(h, w, alpha)
    return OrderFit(float(omega_ex), float(C), float(alpha), math.sqrt(s / len(h)), list(h), list(w))


# ---------------------------------------------------------------- convergence


def reference_alpha(nu: float) -> float | None:
    """Expected rate 2 s for the tabulated Poisson ratios, else None."""
    s = REGULARITY_EXPONENTS.get(round(float(nu), 6))
    return None if s is None else 2.0 * s


def track_modes(columns, mode_index: int, rtol: float = TRACKING_RTOL) -> list[float]:
    """Follow one mode through successive frequency lists by nearest-frequency matching.

    Raises :class:`StudyError` when no candidate lies within ``rtol`` or
    when more than one does.
    """
    if mode_index >= len(columns[0]):
        raise StudyError(f"mode {mode_index + 1} not available on the coarsest mesh")
    track = [float(columns[0][mode_index])]
    for level, col in enumerate(columns[1:], start=1):
        col = np.asarray(col, dtype=float)
        rel = np.abs(col - track[-1]) / abs(track[-1])
        hits = np.flatnonzero(rel <= rtol)
        if len(hits) == 0:
            raise StudyError(f"mode {mode_index + 1}: no match within {rtol:g} at refinement level {level}")
        if len(hits) > 1:
            raise StudyError(f"mode {mode_index + 1}: ambiguous match at refinement level {level}")
        track.append(float(col[hits[0]]))
    return track


def convergence_study(base: RunConfig, N_values, mode_indices, runner: Runner | None = None) -> list[OrderFit]:
    """Fit the convergence rate of each tracked mode (0-based indices) over a mesh sequence."""
    N_values = [int(n) for n in N_values]
    if len(N_values) < 3:
        raise ConfigError("convergence study needs at least 3 meshes")
    if any(b <= a for a, b in zip(N_values, N_values[1:])):
        raise ConfigError(f"N_values must be strictly ascending, got {N_values}")
    runner = runner or Runner()
    m = max(base.m, max(mode_indices) + 3)
    columns = [runner.frequencies(base.replace(N=n, m=m)) for n in N_values]
    h = [1.0 / n for n in N_values]
    ref = reference_alpha(base.nu)
    fits = []
    for i in mode_indices:
        try:
            w = track_modes(columns, i)
        except StudyError as exc:
            fits.append(OrderFit(math.nan, math.nan, math.nan, math.nan, h, [], defined=False,
                                 mode=i, reference_alpha=ref, error=str(exc)))
            continue
        fit = fit_order(h, w)
        fit.mode, fit.reference_alpha = i, ref
        fits.append(fit)
    return fits


def fits_to_csv(fits, config: dict | None = None, path=None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mode", "alpha", "omega_ex", "C", "residual", "two_s_hat", "omega_by_h", "error"])
    for f in fits:
        d = f.to_dict()
        num = lambda x: x if isinstance(x, str) else f"{x:.7g}"  # noqa: E731
        writer.writerow([
            "" if f.mode is None else f.mode + 1,
            num(d["alpha"]), num(d["omega_ex"]), num(d["C"]), num(d["residual"]),
            "" if f.reference_alpha is None else f"{f.reference_alpha:.4f}",
            " ".join(f"{hh:.6g}:{ww:.7f}" for hh, ww in zip(f.h, f.omega)),
            f.error or "",
        ])
    return _write(buf.getvalue(), path)


# ---------------------------------------------------------------- incompressible limit


def lame_lambda(E: float, nu: float) -> float:
    return E * nu / ((1 + nu) * (1 - 2 * nu))


@dataclass
class LimitStudy:
    """Gap between compressible and incompressible frequencies as lambda grows."""

    nu: list
    lam: list
    omega: list
    gap: list
    omega_limit: float
    slope: float
    mode: int
    config: dict = field(default_factory=dict)

    @property
    def slope_defined(self) -> bool:
        return not math.isnan(self.slope)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mode": self.mode,
            "omega_limit": self.omega_limit,
            "slope": self.slope if self.slope_defined else UNDEFINED,
            "rows": [
                {"nu": n, "lambda": l, "omega": w, "gap": g}
                for n, l, w, g in zip(self.nu, self.lam, self.omega, self.gap)
            ],
        }

    def to_json(self, path=None) -> str:
        return _write(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", path)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
        buf.write(f"# omega_limit: {self.omega_limit:.10g}\n")
        buf.write(f"# slope: {self.slope:.6f}\n" if self.slope_defined else f"# slope: {UNDEFINED}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["nu", "lambda", "omega", "gap"])
        for n, l, w, g in zip(self.nu, self.lam, self.omega, self.gap):
            writer.writerow([repr(n), f"{l:.10g}", f"{w:.10g}", f"{g:.6e}"])
        return _write(buf.getvalue(), path)


def lambda_limit_study(base: RunConfig, nu_values, mode_index: int = 0, runner: Runner | None = None) -> LimitStudy:
    """Distance of one frequency from its incompressible value for Poisson ratios approaching 1/2."""
    nu_values = [float(v) for v in nu_values]
    if not nu_values:
        raise ConfigError("nu_values must not be empty")
    if any(b <= a for a, b in zip(nu_values, nu_values[1:])):
        raise ConfigError(f"nu_values must be strictly increasing, got {nu_values}")
    if max(nu_values) >= 0.5 or min(nu_values) <= 0.0:
        raise ConfigError("nu_values must lie in (0, 0.5); the limit 0.5 is computed as the reference")
    runner = runner or Runner()
    m = max(base.m, mode_index + 1)
    try:
        ref = runner.frequencies(base.replace(nu=0.5, m=m))
    except (SolverError, np.linalg.LinAlgError) as exc:
        raise SolverError(f"incompressible reference run failed: {exc}") from exc
    if len(ref) <= mode_index:
        raise StudyError(f"incompressible run returned only {len(ref)} physical modes")
    w_inf = float(ref[mode_index])
    lam, omega, gap = [], [], []
    for nu in nu_values:
        w = runner.frequencies(base.replace(nu=nu, m=m))
        if len(w) <= mode_index:
            raise StudyError(f"run at nu={nu} returned only {len(w)} physical modes")
        lam.append(lame_lambda(base.E, nu))
        omega.append(float(w[mode_index]))
        gap.append(abs(float(w[mode_index]) - w_inf))
    slope = math.nan
    if len(nu_values) >= 2 and all(g > 0 for g in gap):
        slope = float(np.polyfit(np.log(lam), np.log(gap), 1)[0])
    return LimitStudy(
        nu=nu_values, lam=lam, omega=omega, gap=gap, omega_limit=w_inf, slope=slope, mode=mode_index,
        config={**base.to_dict(), "nu_values": nu_values, "mode_index": mode_index},
    )
