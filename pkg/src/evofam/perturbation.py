"""Bounded perturbation B(t) f = beta(t, .) f and the perturbed propagator.

The perturbed propagator solves the variation-of-constants equation

    V(t,s) = U(t,s) + int_s^t U(t,r) B_lift(r) V(r,s) dr,
    B_lift(r) = [[0, 0], [B(r), 0]],

by Picard iteration with trapezoidal product integration on the grid.
:func:`direct_oracle` integrates ``V' = ([[0, I], [A + B, 0]]) V`` instead
and shares nothing with the Volterra path except B and alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_SEED,
    CoefficientFamily,
    Space,
    TimeGrid,
    Tolerances,
    mode_numbers,
    product_weights,
    space_weights,
)
from .fundsol import FundamentalSolutionField, s_axiom_residuals
from .oscillator import SUBSTEP_FACTOR
from .reduction import first_order_generator, u_axiom_residuals, weighted_operator_norm
from .report import InvariantReport

MAX_PICARD = 200
MEMORY_BUDGET = 10**7  # stored matrix entries over the node pairs of Delta
CHUNK_ENTRIES = 8 * 10**6


class PicardError(RuntimeError):
    """Picard iteration did not reach the tolerance."""

    def __init__(self, iterations: int, last_increment: float):
        self.iterations = iterations
        self.last_increment = last_increment
        super().__init__(
            f"Picard iteration did not converge after {iterations} iterations "
            f"(last increment {last_increment:.3e})"
        )


class MemoryBudgetExceeded(RuntimeError):
    pass


class MissingColumns(ValueError):
    pass


# ---------------------------------------------------------------------------
# Galerkin matrices

def quadrature_panels(N: int) -> int:
    return max(512, 64 * N)


def _simpson_weights(Q: int, length: float) -> np.ndarray:
    w = np.ones(Q + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (length / Q / 3.0)


class _SineQuadrature:
    def __init__(self, N: int):
        Q = quadrature_panels(N)
        self.xi = np.linspace(0.0, math.pi, Q + 1)
        self.w = _simpson_weights(Q, math.pi)
        self.Z = math.sqrt(2.0 / math.pi) * np.sin(np.outer(mode_numbers(N), self.xi))

    def matrix(self, values: np.ndarray) -> np.ndarray:
        """``int beta z_m z_n`` for samples ``values`` of beta on ``xi``."""
        B = (self.Z * (self.w * values)) @ self.Z.T
        return 0.5 * (B + B.T)


@dataclass
class PerturbationMatrixField:
    """``B(t_i)`` for every node, as symmetric ``N x N`` matrices."""

    cf: CoefficientFamily
    grid: TimeGrid
    N: int
    matrices: np.ndarray
    spatial: np.ndarray | None = None  # B_p for separable beta

    @property
    def is_zero(self) -> bool:
        return self.cf.beta.is_zero

    def at(self, t: float) -> np.ndarray:
        """B(t) at an arbitrary time."""
        beta = self.cf.beta
        if beta.is_zero:
            return np.zeros((self.N, self.N))
        if self.spatial is not None:
            return float(beta.time_factor(t)) * self.spatial
        quad = _SineQuadrature(self.N)
        return quad.matrix(beta(t, quad.xi))

    def lifted(self, i: int) -> np.ndarray:
        out = np.zeros((2 * self.N, 2 * self.N))
        out[self.N:, : self.N] = self.matrices[i]
        return out

    def continuity_modulus(self, space: Space | str = Space.X) -> float:
        """Max operator norm of ``B(t_{i+1}) - B(t_i)`` in X or Z."""
        w = space_weights(self.N, space)
        diffs = np.diff(self.matrices, axis=0)
        if diffs.size == 0:
            return 0.0
        K = w[:, None] * diffs / w[None, :]
        return float(np.max(np.linalg.norm(K, ord=2, axis=(1, 2))))

    def sup_norm(self, space: Space | str = Space.X) -> float:
        w = space_weights(self.N, space)
        K = w[:, None] * self.matrices / w[None, :]
        return float(np.max(np.linalg.norm(K, ord=2, axis=(1, 2))))


def assemble_B(cf: CoefficientFamily, N: int, grid: TimeGrid) -> PerturbationMatrixField:
    """Galerkin matrices ``B_mn(t) = (2/pi) int beta(t, xi) sin(n xi) sin(m xi) dxi``.

    Composite Simpson with ``max(512, 64 N)`` panels.
    """
    beta = cf.beta
    M = grid.M
    if beta.is_zero:
        return PerturbationMatrixField(cf, grid, N, np.zeros((M + 1, N, N)))
    quad = _SineQuadrature(N)
    if beta.family == "separable":
        Bp = quad.matrix(beta.spatial(quad.xi))
        g = np.asarray(beta.time_factor(grid.nodes), dtype=float)
        return PerturbationMatrixField(cf, grid, N, g[:, None, None] * Bp, spatial=Bp)
    mats = np.stack([quad.matrix(beta(t, quad.xi)) for t in grid.nodes])
    return PerturbationMatrixField(cf, grid, N, mats)


# ---------------------------------------------------------------------------
# Volterra / Picard

def _weighted_frobenius(diff: np.ndarray, wz: np.ndarray) -> np.ndarray:
    """Frobenius norm of ``W D W^-1``: an upper bound of the Z x X operator norm."""
    K = wz[:, None] * diff / wz[None, :]
    return np.sqrt(np.einsum("...ij,...ij->...", K, K))


def _initial_columns(u: FundamentalSolutionField, bases: np.ndarray) -> np.ndarray:
    M = u.grid.M
    I = np.arange(M + 1)[:, None]
    U0 = u.propagator(I, bases[None, :])
    U0[I[:, 0][:, None] < bases[None, :]] = 0.0
    return U0


def _picard_apply(u: FundamentalSolutionField, Bm: np.ndarray, bases: np.ndarray, U0: np.ndarray, V: np.ndarray) -> np.ndarray:
    """One Picard sweep ``U + sum_j w_j U(t_i,t_j) B_lift(t_j) V(t_j, s)``.

    ``V`` and ``U0`` have shape ``(M+1, C, 2N, 2N)`` with zero rows above each
    base.  ``U(t_i,t_j) B_lift`` only involves the r and rdot multipliers,
    so the sum is a batched matrix product per mode.
    """
    M, N, h = u.grid.M, u.N, u.grid.h
    C = bases.size
    BV = Bm[:, None] @ V[:, :, :N, :]  # (j, C, N, 2N)
    BVn = np.ascontiguousarray(BV.transpose(2, 0, 1, 3)).reshape(N, M + 1, C * 2 * N)
    Kt = np.ascontiguousarray(u.r.transpose(2, 0, 1))
    Kb = np.ascontiguousarray(u.rdot.transpose(2, 0, 1))
    top = (Kt @ BVn).reshape(N, M + 1, C, 2 * N).transpose(1, 2, 0, 3)
    bot = (Kb @ BVn).reshape(N, M + 1, C, 2 * N).transpose(1, 2, 0, 3)
    del BVn
    out = U0.copy()
    out[:, :, :N, :] += h * top
    out[:, :, N:, :] += h * bot
    del top, bot
    # trapezoid end weights: j = t_i (r(t,t) = 0, rdot(t,t) = 1) and j = s
    out[:, :, N:, :] -= (0.5 * h) * BV
    cols = np.arange(C)
    BVs = BV[bases, cols]  # (C, N, 2N)
    r_s = u.r[:, bases, :]  # (M+1, C, N)
    rd_s = u.rdot[:, bases, :]
    out[:, :, :N, :] -= (0.5 * h) * r_s[..., None] * BVs[None]
    out[:, :, N:, :] -= (0.5 * h) * rd_s[..., None] * BVs[None]
    out[np.arange(M + 1)[:, None] < bases[None, :]] = 0.0
    return out


def _picard(u, b, bases, tol, max_iter=MAX_PICARD):
    """Picard iteration for the columns ``bases``; returns (V, increments)."""
    wz = product_weights(u.N)
    U0 = _initial_columns(u, bases)
    V = U0
    increments: list[float] = []
    if b.is_zero:
        return V, increments
    for _ in range(max_iter):
        with np.errstate(over="ignore", invalid="ignore"):
            V_new = _picard_apply(u, b.matrices, bases, U0, V)
            inc = float(np.max(_weighted_frobenius(V_new - V, wz)))
        V = V_new
        increments.append(inc)
        if inc <= tol:
            return V, increments
        if not math.isfinite(inc):
            break  # overflowed: further sweeps cannot recover
    raise PicardError(len(increments), increments[-1])


@dataclass
class VolterraColumn:
    s_index: int
    V: np.ndarray  # (M+1, 2N, 2N), zero above s_index
    increments: list

    @property
    def iterations(self) -> int:
        return len(self.increments)

    def contraction_ratios(self) -> list[float]:
        inc = self.increments
        return [inc[k + 1] / inc[k] for k in range(len(inc) - 1) if inc[k] > 0]


def solve_volterra(
    u: FundamentalSolutionField,
    b: PerturbationMatrixField,
    s: float,
    tolerances: Tolerances | None = None,
    *,
    max_iter: int = MAX_PICARD,
) -> VolterraColumn:
    """Perturbed propagator ``V(t_i, s)`` for all nodes ``t_i >= s``.

    Iterates until the largest weighted increment (Frobenius bound of the
    Z x X operator norm) is below the Picard tolerance; raises
    :class:`PicardError` otherwise.
    """
    tol = (tolerances or Tolerances()).picard
    j = u.grid.index(s)
    V, inc = _picard(u, b, np.array([j]), tol, max_iter)
    return VolterraColumn(j, V[:, 0], inc)


def first_picard_correction(u: FundamentalSolutionField, b: PerturbationMatrixField, s: float) -> np.ndarray:
    """``V^1 - U`` for the column at ``s``."""
    j = np.array([u.grid.index(s)])
    U0 = _initial_columns(u, j)
    return (_picard_apply(u, b.matrices, j, U0, U0) - U0)[:, 0]


def direct_oracle(cf: CoefficientFamily, b: PerturbationMatrixField, s: float, grid: TimeGrid) -> np.ndarray:
    """RK4 for ``V' = [[0, I], [A(t) + B(t), 0]] V``, ``V(s,s) = I``.

    Returns ``(M+1, 2N, 2N)`` with zero rows before ``s``.
    """
    N, M = b.N, grid.M
    j = grid.index(s)
    target = min(grid.h, SUBSTEP_FACTOR / (N * math.sqrt(cf.alpha_sup())))
    k = max(1, math.ceil(grid.h / target - 1e-9))
    dt = grid.h / k
    n2 = mode_numbers(N) ** 2

    def gen(t):
        G = b.at(t) - float(cf.alpha(t)) * np.diag(n2)
        return first_order_generator(G)

    out = np.zeros((M + 1, 2 * N, 2 * N))
    Y = np.eye(2 * N)
    out[j] = Y
    for i in range(j, M):
        t0 = grid.nodes[i]
        for q in range(k):
            t = t0 + q * dt
            A0, Am, A1 = gen(t), gen(t + dt / 2), gen(t + dt)
            k1 = A0 @ Y
            k2 = Am @ (Y + (dt / 2) * k1)
            k3 = Am @ (Y + (dt / 2) * k2)
            k4 = A1 @ (Y + dt * k3)
            Y = Y + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = Y
    return out


# ---------------------------------------------------------------------------
# perturbed field

def delta_entries(grid: TimeGrid, N: int, bases=None) -> int:
    """Matrix entries needed to store the columns ``bases`` (all if None)."""
    M = grid.M
    bases = np.arange(M + 1) if bases is None else np.asarray(bases)
    return int(np.sum(M + 1 - bases)) * (2 * N) ** 2


@dataclass
class PerturbedPropagatorField:
    """Columns ``V(., t_j)`` of the perturbed propagator, computed on demand.

    Implements the block-field protocol: ``S_V = V12``, ``d_t S_V = V22``,
    ``d_s S_V = -V11``, ``d_t d_s S_V = -V21``, generator ``A(t) + B(t)``.
    """

    u: FundamentalSolutionField
    b: PerturbationMatrixField
    tolerances: Tolerances = field(default_factory=Tolerances)
    memory_budget: int = MEMORY_BUDGET
    columns: dict = field(default_factory=dict)
    increments: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.u.grid

    @property
    def N(self) -> int:
        return self.u.N

    def prepare(self, bases) -> None:
        missing = np.array(sorted(set(int(j) for j in np.atleast_1d(bases)) - set(self.columns)), dtype=int)
        if missing.size == 0:
            return
        for start in range(0, missing.size, self._chunk):
            part = missing[start : start + self._chunk]
            V, inc = _picard(self.u, self.b, part, self.tolerances.picard)
            for c, j in enumerate(part):
                self.columns[int(j)] = np.ascontiguousarray(V[:, c])
                self.increments[int(j)] = inc

    @property
    def _chunk(self) -> int:
        # columns per Picard batch: keeps one batch near CHUNK_ENTRIES entries
        return max(1, CHUNK_ENTRIES // ((self.grid.M + 1) * (2 * self.N) ** 2))

    def prepare_all(self) -> None:
        self.prepare(np.arange(self.grid.M + 1))

    def column(self, j: int) -> np.ndarray:
        if j not in self.columns:
            raise MissingColumns(f"column s index {j} has not been computed")
        return self.columns[j]

    def propagator(self, I, J) -> np.ndarray:
        I, J = np.broadcast_arrays(np.asarray(I, dtype=int), np.asarray(J, dtype=int))
        out = np.empty(I.shape + (2 * self.N, 2 * self.N))
        for j in np.unique(J):
            sel = J == j
            out[sel] = self.column(int(j))[I[sel]]
        return out

    def s_blocks(self, I, J):
        V = self.propagator(I, J)
        N = self.N
        return V[..., :N, N:], V[..., N:, N:], -V[..., :N, :N], -V[..., N:, :N]

    def generator(self, I) -> np.ndarray:
        I = np.asarray(I, dtype=int)
        return self.u.generator(I) + self.b.matrices[I]

    def sample(self, t: float, s: float):
        from .reduction import PropagatorSample

        i, j = self.u.pair(t, s)
        self.prepare([j])
        return PropagatorSample.from_matrix(float(self.grid.nodes[i]), float(self.grid.nodes[j]), self.columns[j][i])


def solve_volterra_field(
    u: FundamentalSolutionField,
    b: PerturbationMatrixField,
    tolerances: Tolerances | None = None,
    *,
    bases=None,
    memory_budget: int = MEMORY_BUDGET,
) -> PerturbedPropagatorField:
    """Perturbed propagator on the columns ``bases`` (all of Delta if None).

    Materializing all of Delta is refused above ``memory_budget`` entries.
    """
    if bases is None and delta_entries(u.grid, u.N) > memory_budget:
        raise MemoryBudgetExceeded(
            f"all of Delta needs {delta_entries(u.grid, u.N)} matrix entries; budget is {memory_budget}"
        )
    v = PerturbedPropagatorField(u, b, tolerances or Tolerances(), memory_budget)
    v.prepare(np.arange(u.grid.M + 1) if bases is None else bases)
    return v


def oracle_gap(v_column: np.ndarray, oracle_column: np.ndarray, start: int = 0) -> float:
    """Max Z x X operator-norm gap between two columns."""
    return float(np.max(weighted_operator_norm(v_column[start:] - oracle_column[start:])))


def duhamel_second_form_residual(
    u: FundamentalSolutionField,
    b: PerturbationMatrixField,
    v: PerturbedPropagatorField,
    s: float,
) -> float:
    """``max_t || V(t,s) - U(t,s) - sum_j w_j V(t,t_j) B_lift(t_j) U(t_j,s) ||``.

    Needs every column ``V(., t_j)`` with ``t_j >= s``.
    """
    grid, N = u.grid, u.N
    M, h = grid.M, grid.h
    j0 = grid.index(s)
    missing = [j for j in range(j0, M + 1) if j not in v.columns]
    if missing:
        raise MissingColumns(f"{len(missing)} columns missing (first: s index {missing[0]})")
    worst = 0.0
    U_col = u.propagator(np.arange(M + 1), j0)
    Bm = b.matrices
    # V(t,t_j) B_lift(t_j) U(t_j,s) = V(t,t_j)[:, N:] B_j U(t_j,s)[:N, :]
    BU = Bm[j0:] @ U_col[j0:, :N, :]  # (j, N, 2N)
    for i in range(j0, M + 1):
        js = np.arange(j0, i + 1)
        w = np.full(js.size, h)
        w[0] *= 0.5
        w[-1] *= 0.5
        if i == j0:
            w[:] = 0.0
        Vij = np.stack([v.columns[j][i, :, N:] for j in js])  # (k, 2N, N)
        integral = np.einsum("k,kab,kbc->ac", w, Vij, BU[js - j0])
        R = v.columns[j0][i] - U_col[i] - integral
        worst = max(worst, float(weighted_operator_norm(R)))
    return worst


def perturbed_axiom_suite(
    v: PerturbedPropagatorField,
    cf: CoefficientFamily,
    b: PerturbationMatrixField,
    *,
    seed: int = DEFAULT_SEED,
    s_tolerances: dict | None = None,
    u_tolerances: dict | None = None,
) -> InvariantReport:
    """(U1)-(U4) for V with generator A + B, then (S1)-(S4) for S_V = pi_1 V (0, .)."""
    rep = InvariantReport()
    rep.merge(u_axiom_residuals(v, seed=seed, tolerances=u_tolerances), "V_")
    rep.merge(s_axiom_residuals(v, seed=seed, tolerances=s_tolerances), "SV_")
    return rep
