"""Second-order fundamental solution S(t, s) on the sine truncation.

S and its partial derivatives act diagonally on the sine coefficients::

    S(t,s)          r_n(t,s)
    d/dt S(t,s)     rdot_n(t,s)
    d/ds S(t,s)     -c_n(t,s)
    d/dt d/ds S     -cdot_n(t,s)

:func:`s_axiom_residuals` works on any *block field*: an object with
``grid``, ``N``, ``prepare(bases)``, ``s_blocks(I, J)`` and
``generator(I)``.  The perturbed field of :mod:`evofam.perturbation`
implements the same protocol, which is how S_V is checked against
A(t) + B(t).
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .core import (
    DEFAULT_SEED,
    CoefficientFamily,
    Space,
    SpectralVector,
    TimeGrid,
    mode_numbers,
    space_weights,
)
from .oscillator import mode_table
from .report import InvariantReport

# tolerances of the second-order axiom checks; the finite-difference ones
# are overridden by the configured residual tolerance when run in a suite
S_TOLERANCES = {
    "S1a": 1e-12,
    "S1c": 1e-12,
    "S1d": 1e-12,
    "S2a": 1e-4,
    "S2b": 1e-3,
    "S2c": 1e-12,
    "S3a": 1e-3,
    "S3b": 1e-3,
    "S4": 1e-4,
}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EVOFAM_THREADS", "1")))
    except ValueError:
        return 1


def subsample_nodes(M: int, cap: int = 20) -> np.ndarray:
    """At most ``cap`` evenly spread node indices including 0 and M."""
    return np.unique(np.round(np.linspace(0, M, min(cap, M + 1))).astype(int))


def diag_embed(v: np.ndarray) -> np.ndarray:
    """``(..., N) -> (..., N, N)`` diagonal matrices."""
    N = v.shape[-1]
    out = np.zeros(v.shape + (N,))
    idx = np.arange(N)
    out[..., idx, idx] = v
    return out


class FundamentalSolutionField:
    """Per-mode oscillator data for every node pair of the grid.

    ``r, rdot, c, cdot`` have shape ``(M+1, M+1, N)`` indexed
    ``[t index, s index, mode - 1]`` and vanish for ``t < s``.
    """

    def __init__(self, cf: CoefficientFamily, grid: TimeGrid, N: int, r, rdot, c, cdot, method: str):
        self.cf = cf
        self.grid = grid
        self.N = N
        self.r, self.rdot, self.c, self.cdot = r, rdot, c, cdot
        self.method = method
        for arr in (r, rdot, c, cdot):
            arr.setflags(write=False)

    @classmethod
    def build(
        cls,
        cf: CoefficientFamily,
        grid: TimeGrid,
        N: int,
        *,
        method: str = "auto",
        substep_scale: float = 1.0,
    ) -> "FundamentalSolutionField":
        if N < 1:
            raise ValueError("N must be >= 1")
        shape = (grid.M + 1, grid.M + 1, N)
        arrays = [np.zeros(shape) for _ in range(4)]

        def one(n):
            return n, mode_table(n, cf, grid, method=method, substep_scale=substep_scale)

        workers = worker_count()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(one, range(1, N + 1)))
        else:
            results = [one(n) for n in range(1, N + 1)]
        for n, tab in results:
            for q in range(4):
                arrays[q][:, :, n - 1] = tab[..., q]
        resolved = "closed" if (method == "auto" and cf.alpha.is_constant) else ("rk4" if method == "auto" else method)
        return cls(cf, grid, N, *arrays, method=resolved)

    # -- block-field protocol ------------------------------------------------

    def prepare(self, bases) -> None:
        pass

    def s_blocks(self, I, J):
        I, J = np.broadcast_arrays(np.asarray(I, dtype=int), np.asarray(J, dtype=int))
        return (
            diag_embed(self.r[I, J]),
            diag_embed(self.rdot[I, J]),
            diag_embed(-self.c[I, J]),
            diag_embed(-self.cdot[I, J]),
        )

    def propagator(self, I, J) -> np.ndarray:
        """Dense first-order blocks ``[[c, r], [cdot, rdot]]`` at node pairs."""
        I, J = np.broadcast_arrays(np.asarray(I, dtype=int), np.asarray(J, dtype=int))
        N = self.N
        out = np.zeros(I.shape + (2 * N, 2 * N))
        idx = np.arange(N)
        out[..., idx, idx] = self.c[I, J]
        out[..., idx, idx + N] = self.r[I, J]
        out[..., idx + N, idx] = self.cdot[I, J]
        out[..., idx + N, idx + N] = self.rdot[I, J]
        return out

    def generator(self, I) -> np.ndarray:
        """``A(t_i) = -alpha(t_i) n^2`` as dense matrices."""
        t = self.grid.nodes[np.asarray(I, dtype=int)]
        a = np.asarray(self.cf.alpha(t), dtype=float)
        return diag_embed(-a[..., None] * mode_numbers(self.N) ** 2)

    # -- node helpers ----------------------------------------------------------

    def pair(self, t: float, s: float) -> tuple[int, int]:
        i, j = self.grid.index(t), self.grid.index(s)
        if i < j:
            raise ValueError(f"need t >= s, got t={t}, s={s}")
        return i, j


def _check_vector(f: FundamentalSolutionField, x: SpectralVector) -> None:
    if x.N != f.N:
        raise ValueError(f"vector has N={x.N}, field has N={f.N}")


def apply_S(f: FundamentalSolutionField, t: float, s: float, x: SpectralVector) -> SpectralVector:
    """``S(t,s) x``; the result lies in Z."""
    _check_vector(f, x)
    i, j = f.pair(t, s)
    return SpectralVector(f.r[i, j] * x.coeffs, Space.Z)


def apply_dtS(f: FundamentalSolutionField, t: float, s: float, x: SpectralVector) -> SpectralVector:
    _check_vector(f, x)
    i, j = f.pair(t, s)
    return SpectralVector(f.rdot[i, j] * x.coeffs, Space.X)


def _require_z(x: SpectralVector) -> None:
    if x.space is Space.X:
        raise ValueError("d/ds S is only defined on Z (tag the vector Z or D)")


def apply_dsS(f: FundamentalSolutionField, t: float, s: float, x: SpectralVector) -> SpectralVector:
    _check_vector(f, x)
    _require_z(x)
    i, j = f.pair(t, s)
    return SpectralVector(-f.c[i, j] * x.coeffs, Space.Z)


def apply_dtdsS(f: FundamentalSolutionField, t: float, s: float, x: SpectralVector) -> SpectralVector:
    _check_vector(f, x)
    _require_z(x)
    i, j = f.pair(t, s)
    return SpectralVector(-f.cdot[i, j] * x.coeffs, Space.X)


def classical_solution(f: FundamentalSolutionField, x: SpectralVector, y: SpectralVector) -> np.ndarray:
    """``u(t_i) = -d/ds S(t_i,0) x + S(t_i,0) y`` as an ``(M+1, N)`` array."""
    _check_vector(f, x)
    _check_vector(f, y)
    return f.c[:, 0, :] * x.coeffs + f.r[:, 0, :] * y.coeffs


# ---------------------------------------------------------------------------
# axiom residuals

def probe_panel(N: int, seed: int = DEFAULT_SEED, n_random: int = 3) -> np.ndarray:
    """Unit modes ``e_1..e_min(N,8)`` plus seeded random D-vectors, as columns."""
    k = min(N, 8)
    units = np.eye(N)[:, :k]
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((N, n_random)) / mode_numbers(N)[:, None] ** 3
    return np.concatenate([units, rand], axis=1)


def _rel(residual: np.ndarray, norms: np.ndarray) -> float:
    """Max over pairs/probes of ``||residual||_X / norms``; residual ``(..., N, P)``."""
    if residual.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(residual, axis=-2) / norms))


def s_axiom_residuals(
    field,
    probes: np.ndarray | None = None,
    *,
    seed: int = DEFAULT_SEED,
    tolerances: dict | None = None,
    max_base: int = 20,
) -> InvariantReport:
    """Residuals of the second-order axioms (S1)-(S4) on a subsampled grid.

    Second t-derivatives are central differences of the stored first
    t-derivative fields; second s-derivatives are central second
    differences across neighbouring base nodes.  Residuals are measured in
    X relative to the D-norm of the probe.
    """
    tol = dict(S_TOLERANCES)
    tol.update(tolerances or {})
    grid, N = field.grid, field.N
    M, h = grid.M, grid.h
    P = probe_panel(N, seed) if probes is None else np.asarray(probes, dtype=float)
    dnorm = np.linalg.norm(space_weights(N, Space.D)[:, None] * P, axis=0)
    bases = subsample_nodes(M, max_base)
    needed = np.unique(np.clip(np.concatenate([bases - 1, bases, bases + 1]), 0, M))
    field.prepare(needed)

    res = {k: 0.0 for k in ("S1a", "S1c", "S1d", "S2a", "S2b", "S2c", "S3a", "S3b", "S3c", "S_sup", "dtS_sup")}
    eye = np.eye(N)

    S, dtS, dsS, dtdsS = field.s_blocks(bases, bases)
    res["S1a"] = _rel(S @ P, dnorm)
    res["S1c"] = _rel((dtS - eye) @ P, dnorm)
    res["S1d"] = _rel((dsS + eye) @ P, dnorm)
    res["S2c"] = _rel(dtdsS @ P, dnorm)

    for j in bases:
        I = np.arange(j, M + 1)
        S, dtS, dsS, dtdsS = field.s_blocks(I, j)
        G = field.generator(I)
        res["S_sup"] = max(res["S_sup"], float(np.max(np.linalg.norm(S, ord=2, axis=(1, 2)))))
        res["dtS_sup"] = max(res["dtS_sup"], float(np.max(np.linalg.norm(dtS, ord=2, axis=(1, 2)))))
        if I.size >= 3:
            fd = (dtS[2:] - dtS[:-2]) / (2 * h)
            res["S2a"] = max(res["S2a"], _rel((fd - G[1:-1] @ S[1:-1]) @ P, dnorm))
            fd = (dtdsS[2:] - dtdsS[:-2]) / (2 * h)
            res["S3a"] = max(res["S3a"], _rel((fd - G[1:-1] @ dsS[1:-1]) @ P, dnorm))
        if I.size >= 2:
            GdsS = G @ dsS @ P
            res["S3c"] = max(res["S3c"], _rel(GdsS[1:] - GdsS[:-1], dnorm))
        if 1 <= j <= M - 1:
            Ii = np.arange(j + 1, M + 1)
            Sm, dtSm, _, _ = field.s_blocks(Ii, j - 1)
            S0, dtS0, _, _ = field.s_blocks(Ii, j)
            Sp, dtSp, _, _ = field.s_blocks(Ii, j + 1)
            Gs = field.generator([j])[0]
            fd = (Sp - 2 * S0 + Sm) / h**2
            res["S2b"] = max(res["S2b"], _rel((fd - S0 @ Gs) @ P, dnorm))
            fd = (dtSp - 2 * dtS0 + dtSm) / h**2
            res["S3b"] = max(res["S3b"], _rel((fd - dtS0 @ Gs) @ P, dnorm))

    # (S4): (-d_s S(t,s)) S(s,r) x + S(t,s) d_t S(s,r) x = S(t,r) x
    triples = np.array([(t, s, r) for r, s, t in itertools.combinations_with_replacement(bases, 3)])
    S_ts, _, dsS_ts, _ = field.s_blocks(triples[:, 0], triples[:, 1])
    S_sr, dtS_sr, _, _ = field.s_blocks(triples[:, 1], triples[:, 2])
    S_tr, _, _, _ = field.s_blocks(triples[:, 0], triples[:, 2])
    lhs = -dsS_ts @ S_sr + S_ts @ dtS_sr
    res["S4"] = _rel((lhs - S_tr) @ P, dnorm)

    rep = InvariantReport()
    rep.add("S1a_S_tt_zero", res["S1a"], tol["S1a"])
    rep.add("S1c_dtS_tt_identity", res["S1c"], tol["S1c"])
    rep.add("S1d_dsS_tt_minus_identity", res["S1d"], tol["S1d"])
    rep.add("S2a_dtt_S_eq_A_S", res["S2a"], tol["S2a"], "central difference of d/dt S in t")
    rep.add("S2b_dss_S_eq_S_A", res["S2b"], tol["S2b"], "second difference across base nodes")
    rep.add("S2c_dtdsS_tt_zero", res["S2c"], tol["S2c"])
    rep.add("S3a_dtt_dsS_eq_A_dsS", res["S3a"], tol["S3a"], "central difference of d/dt d/ds S in t")
    rep.add("S3b_dss_dtS_eq_dtS_A", res["S3b"], tol["S3b"], "second difference across base nodes")
    rep.measured("S3c_A_dsS_continuity", res["S3c"], "max jump of A(t) d/ds S(t,s) x between adjacent nodes; continuity has no finite threshold")
    rep.add("S4_evolutionary", res["S4"], tol["S4"], f"{len(triples)} node triples")
    rep.measured("lemma_S_sup_X", res["S_sup"], "sup of ||S(t,s)||_{L(X)} over sampled pairs")
    rep.measured("lemma_dtS_sup_X", res["dtS_sup"], "sup of ||d/dt S(t,s)||_{L(X)} over sampled pairs")
    return rep
