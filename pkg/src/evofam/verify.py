"""Full invariant portfolio, norm-ratio probe and self-convergence study."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_SEED,
    FORMAT_VERSION,
    RunSpec,
    Space,
    SpectralVector,
    TimeGrid,
    mode_numbers,
    space_weights,
)
from .fundsol import S_TOLERANCES, FundamentalSolutionField, s_axiom_residuals
from .oscillator import bound_survey
from .perturbation import (
    MAX_PICARD,
    MEMORY_BUDGET,
    PerturbedPropagatorField,
    PicardError,
    assemble_B,
    delta_entries,
    direct_oracle,
    duhamel_second_form_residual,
    oracle_gap,
    perturbed_axiom_suite,
    solve_volterra,
    solve_volterra_field,
)
from .reduction import U_TOLERANCES, u_axiom_residuals
from .report import InvariantReport

# named default tolerances; every threshold in a report comes from here,
# from the S/U axiom tables, or from the config's ``tolerances`` block
BOUND_SLACK = 1e-6
WRONSKIAN_FACTOR = 50  # times the ode tolerance
ORACLE_TOL = 1e-5
DUHAMEL_TOL = 5e-6
PICARD_ITER_LIMIT = 30
CONTRACTION_LIMIT = 1.0
ROUNDOFF_FLOOR = 1e-14  # convergence differences below this count as converged

FIRST_ORDER_PREFIX = "first_order."


class SuiteError(RuntimeError):
    """A solver inside the suite failed; ``check`` names the failing entry."""

    def __init__(self, check: str, cause: Exception):
        self.check = check
        super().__init__(f"{check}: {cause}")


def suite_initial_data(spec: RunSpec) -> tuple[np.ndarray, np.ndarray]:
    """The configured data, or ``phi_n = n^-3, psi = 0`` when both are zero."""
    x, y = spec.initial()
    x, y = np.array(x.coeffs), np.array(y.coeffs)
    if not (np.any(x) or np.any(y)):
        x = mode_numbers(spec.N) ** -3.0
    return x, y


def _fd_tolerances(spec: RunSpec) -> tuple[dict, dict]:
    """Finite-difference checks follow the config's residual tolerance."""
    res = spec.tolerances.residual
    s_tol = dict(S_TOLERANCES)
    for key in ("S2b", "S3a", "S3b"):
        s_tol[key] = res
    u_tol = dict(U_TOLERANCES)
    u_tol["U4"] = res
    return s_tol, u_tol


def classical_residual(traj: np.ndarray, cf, grid: TimeGrid, B: np.ndarray | None, data_norm: float) -> float:
    """``max_i ||D_h^2 u(t_i) - (A(t_i) + B(t_i)) u(t_i)||_X / data_norm``."""
    if grid.M < 2:
        return float("nan")
    h = grid.h
    n2 = mode_numbers(traj.shape[1]) ** 2
    d2 = (traj[2:] - 2 * traj[1:-1] + traj[:-2]) / h**2
    a = np.asarray(cf.alpha(grid.nodes[1:-1]), dtype=float)
    rhs = -a[:, None] * n2 * traj[1:-1]
    if B is not None:
        rhs = rhs + np.einsum("imn,in->im", B[1:-1], traj[1:-1])
    return float(np.max(np.linalg.norm(d2 - rhs, axis=1)) / data_norm)


def _coarsened(grid: TimeGrid, N: int, budget: int) -> TimeGrid | None:
    """Finest grid ``M/d`` (``d`` dividing ``M``) whose full Delta fits the budget."""
    for d in range(1, grid.M + 1):
        if grid.M % d == 0:
            g = TimeGrid(grid.T, grid.M // d)
            if delta_entries(g, N) <= budget:
                return g
    return None


def run_full_suite(spec: RunSpec, seed: int = DEFAULT_SEED, *, memory_budget: int = MEMORY_BUDGET) -> InvariantReport:
    """Every thresholded invariant for one configuration.

    Entry names are grouped by prefix: ``oscillator.``, ``second_order.``,
    ``first_order.``, ``solution.`` and, when beta is nonzero,
    ``perturbation.``, ``perturbed_first_order.`` and
    ``perturbed_second_order.``.  Timing goes to ``meta["timing"]`` only.
    """
    cf, grid, N = spec.cf, spec.grid, spec.N
    cf.check_alpha(grid)
    rep = InvariantReport()
    timing: dict[str, float] = {}
    ode = spec.tolerances.ode
    s_tol, u_tol = _fd_tolerances(spec)

    clock = time.perf_counter()
    f = FundamentalSolutionField.build(cf, grid, N)
    timing["build"] = time.perf_counter() - clock

    clock = time.perf_counter()
    survey = bound_survey(cf, grid, N, tables=(f.r, f.rdot, f.c, f.cdot))
    rep.add("oscillator.bound_r", max(survey["paper_r"], 0.0), BOUND_SLACK, "max(|r_n| - 1/(sqrt(alpha(s)) n), 0) over n <= N and Delta")
    for key, label in (("paper_rdot", "|d_t r_n| <= 1"), ("paper_ds", "|d_s r_n| <= 1"), ("paper_dtds", "|d_t d_s r_n| <= n")):
        rep.measured(
            f"oscillator.bound_{key[6:]}",
            survey[key],
            f"excess over {label}; can be positive when alpha increases, the energy bound is the certified one",
        )
    for key in ("energy_r", "energy_rdot", "energy_ds", "energy_dtds"):
        rep.add(f"oscillator.{key}", max(survey[key], 0.0), BOUND_SLACK, "excess over the energy envelope")
    rep.add("oscillator.wronskian", survey["wronskian"], WRONSKIAN_FACTOR * ode, "max |c rdot - cdot r - 1|")
    timing["bounds"] = time.perf_counter() - clock

    clock = time.perf_counter()
    rep.merge(s_axiom_residuals(f, seed=seed, tolerances=s_tol), "second_order.")
    timing["second_order"] = time.perf_counter() - clock
    clock = time.perf_counter()
    rep.merge(u_axiom_residuals(f, seed=seed, tolerances=u_tol), FIRST_ORDER_PREFIX)
    timing["first_order"] = time.perf_counter() - clock

    x, y = suite_initial_data(spec)
    data_norm = math.hypot(
        float(np.linalg.norm(space_weights(N, Space.D) * x)),
        float(np.linalg.norm(space_weights(N, Space.Z) * y)),
    )
    b = assemble_B(cf, N, grid)

    clock = time.perf_counter()
    oracle = direct_oracle(cf, b, 0.0, grid)
    timing["oracle"] = time.perf_counter() - clock

    if cf.beta.is_zero:
        traj = f.c[:, 0, :] * x + f.r[:, 0, :] * y
        rep.add(
            "solution.oracle_gap",
            oracle_gap(f.propagator(np.arange(grid.M + 1), 0), oracle),
            ORACLE_TOL,
            "Z x X operator-norm gap to the direct matrix ODE, column s = 0",
        )
        rep.add("solution.classical_residual", classical_residual(traj, cf, grid, None, data_norm), spec.tolerances.residual, "second difference of u vs A(t) u, relative to ||x||_D + ||y||_Z")
    else:
        clock = time.perf_counter()
        try:
            col = solve_volterra(f, b, 0.0, spec.tolerances)
        except PicardError as exc:
            raise SuiteError("perturbation.picard_iterations", exc) from exc
        traj = col.V[:, :N, :N] @ x + col.V[:, :N, N:] @ y
        rep.add("solution.classical_residual", classical_residual(traj, cf, grid, b.matrices, data_norm), spec.tolerances.residual, "second difference of u vs (A(t) + B(t)) u, relative to ||x||_D + ||y||_Z")
        rep.add("perturbation.picard_iterations", col.iterations, PICARD_ITER_LIMIT, f"iterations to reach {spec.tolerances.picard:g} (hard cap {MAX_PICARD})")
        ratios = col.contraction_ratios()[1:] or [0.0]
        rep.add("perturbation.picard_contraction", max(ratios), CONTRACTION_LIMIT, "largest increment ratio after the first iteration")
        rep.add("perturbation.oracle_gap", oracle_gap(col.V, oracle), ORACLE_TOL, "Z x X operator-norm gap between Volterra and direct matrix ODE, column s = 0")
        rep.measured("perturbation.B_continuity_X", b.continuity_modulus(Space.X), "max ||B(t_{i+1}) - B(t_i)|| on X")
        rep.measured("perturbation.B_continuity_Z", b.continuity_modulus(Space.Z), "max ||B(t_{i+1}) - B(t_i)|| on Z")

        coarse = _coarsened(grid, N, memory_budget)
        if coarse is None:
            rep.add("perturbation.duhamel_second_form", float("nan"), DUHAMEL_TOL, "no coarsening of the grid fits the memory budget")
        else:
            note = "max over t of the second-form residual at s = 0"
            if coarse.M != grid.M:
                note += f"; evaluated on M = {coarse.M} (full Delta at M = {grid.M} exceeds the memory budget)"
                fc = FundamentalSolutionField.build(cf, coarse, N)
                bc = assemble_B(cf, N, coarse)
            else:
                fc, bc = f, b
            try:
                vc = solve_volterra_field(fc, bc, spec.tolerances, memory_budget=memory_budget)
            except PicardError as exc:
                raise SuiteError("perturbation.duhamel_second_form", exc) from exc
            rep.add("perturbation.duhamel_second_form", duhamel_second_form_residual(fc, bc, vc, 0.0), DUHAMEL_TOL, note)
        timing["perturbation"] = time.perf_counter() - clock

        clock = time.perf_counter()
        v = PerturbedPropagatorField(f, b, spec.tolerances, memory_budget)
        v.columns[0] = col.V
        try:
            prep = perturbed_axiom_suite(v, cf, b, seed=seed, s_tolerances=s_tol, u_tolerances=u_tol)
        except PicardError as exc:
            raise SuiteError("perturbed_first_order", exc) from exc
        for name, entry in prep.entries.items():
            group = "perturbed_first_order." if name.startswith("V_") else "perturbed_second_order."
            rep.entries[group + name[name.index("_") + 1:]] = entry
        timing["perturbed_axioms"] = time.perf_counter() - clock

    rep.meta = {
        "format_version": FORMAT_VERSION,
        "config_hash": spec.digest(),
        "N": N,
        "M": grid.M,
        "T": grid.T,
        "seed": int(seed),
        "tolerances": {
            "residual": spec.tolerances.residual,
            "picard": spec.tolerances.picard,
            "ode": spec.tolerances.ode,
            "bound_slack": BOUND_SLACK,
            "wronskian": WRONSKIAN_FACTOR * ode,
            "oracle": ORACLE_TOL,
            "duhamel": DUHAMEL_TOL,
            "picard_iterations": PICARD_ITER_LIMIT,
            "contraction": CONTRACTION_LIMIT,
            "second_order": s_tol,
            "first_order": u_tol,
        },
        "timing": timing,
    }
    return rep


def report_document(rep: InvariantReport) -> dict:
    """JSON layout ``{meta, checks, first_order_axioms}``."""
    checks, first = {}, {}
    for name, entry in rep.entries.items():
        if name.startswith(FIRST_ORDER_PREFIX):
            first[name[len(FIRST_ORDER_PREFIX):]] = entry.to_dict()
        else:
            checks[name] = entry.to_dict()
    return {"meta": dict(rep.meta), "checks": checks, "first_order_axioms": first}


# ---------------------------------------------------------------------------
# norm-ratio probe

def conjecture_panel(N: int, seed: int = DEFAULT_SEED, n_random: int = 3) -> list[SpectralVector]:
    """Unit modes ``e_1..e_min(N,8)`` plus seeded random Z-vectors."""
    vecs = [SpectralVector.unit(n, N, Space.Z) for n in range(1, min(N, 8) + 1)]
    rng = np.random.default_rng(seed + 2)
    for _ in range(n_random):
        vecs.append(SpectralVector(rng.standard_normal(N) / mode_numbers(N) ** 2, Space.Z))
    return vecs


@dataclass(frozen=True)
class RatioTable:
    rows: list  # dicts with probe, q, norm_Z, ratio

    @property
    def min_ratio(self) -> float:
        return min(r["ratio"] for r in self.rows)

    @property
    def max_ratio(self) -> float:
        return max(r["ratio"] for r in self.rows)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "min_ratio": self.min_ratio, "max_ratio": self.max_ratio}


def conjecture_probe(f: FundamentalSolutionField, panel=None) -> RatioTable:
    """``q(x) = ||x||_X + max_Delta ||A(t) S(t,s) x||_X`` against ``||x||_Z``.

    The maximum runs over every node pair of the grid.  Ratios are
    measurements; no threshold is applied.
    """
    N = f.N
    panel = conjecture_panel(N) if panel is None else panel
    X = np.stack([np.asarray(p.coeffs if isinstance(p, SpectralVector) else p, dtype=float) for p in panel], axis=1)
    a = np.asarray(f.cf.alpha(f.grid.nodes), dtype=float)
    mult = (a[:, None, None] * mode_numbers(N) ** 2) * f.r  # (t, s, n)
    sq = np.einsum("tsn,np->tsp", mult**2, X**2)
    sup = np.sqrt(np.max(sq, axis=(0, 1)))
    rows = []
    for k in range(X.shape[1]):
        x = X[:, k]
        q = float(np.linalg.norm(x) + sup[k])
        nz = float(np.linalg.norm(space_weights(N, Space.Z) * x))
        rows.append({"probe": k, "q": q, "norm_Z": nz, "ratio": q / nz})
    return RatioTable(rows)


# ---------------------------------------------------------------------------
# self-convergence

def _solution_at_T(spec: RunSpec, N: int, M: int, data: np.ndarray) -> np.ndarray:
    grid = TimeGrid(spec.T, M)
    x = np.zeros(N)
    k = min(N, data.size)
    x[:k] = data[:k]
    f = FundamentalSolutionField.build(spec.cf, grid, N)
    if spec.cf.beta.is_zero:
        return f.c[-1, 0, :] * x
    b = assemble_B(spec.cf, N, grid)
    col = solve_volterra(f, b, 0.0, spec.tolerances)
    return col.V[-1, :N, :N] @ x


def convergence_study(spec: RunSpec, refinements) -> list[dict]:
    """``||u_{N,M}(T) - u_{2N,2M}(T)||_X`` for each refinement ``(N, M)``.

    Data: ``phi_n = n^-3`` for ``n`` up to the first refinement's N, zero
    above; ``psi = 0``.  Each row also carries the ratio to the previous
    difference and whether the sequence is still decreasing (differences at
    roundoff level count as decreasing).
    """
    refinements = [(int(N), int(M)) for N, M in refinements]
    if not refinements:
        raise ValueError("at least one refinement is required")
    for (N0, M0), (N1, M1) in zip(refinements, refinements[1:]):
        if N1 % N0 or M1 % M0:
            raise ValueError(f"refinement ({N0}, {M0}) does not divide ({N1}, {M1})")
    data = mode_numbers(refinements[0][0]) ** -3.0
    rows: list[dict] = []
    prev = None
    monotone = True
    for N, M in refinements:
        u1 = _solution_at_T(spec, N, M, data)
        u2 = _solution_at_T(spec, 2 * N, 2 * M, data)
        pad = np.zeros(2 * N)
        pad[:N] = u1
        diff = float(np.linalg.norm(pad - u2))
        ratio = prev / diff if prev is not None and diff > 0 else float("nan")
        if prev is not None and not (diff < prev or diff <= ROUNDOFF_FLOOR):
            monotone = False
        rows.append({"N": N, "M": M, "difference": diff, "ratio": ratio, "monotone": monotone})
        prev = diff
    return rows
