"""First-order reduction on Z x X.

``U(t, s) = [[-d_s S, S], [-d_t d_s S, d_t S]]`` propagates the first-order
problem with generator ``[[0, I], [A(t), 0]]``; conversely ``S`` is the
top-right block of any such propagator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_SEED, domain_product_weights, mode_numbers, product_weights
from .fundsol import FundamentalSolutionField, subsample_nodes
from .report import InvariantReport

U_TOLERANCES = {"U1_identity": 1e-12, "U1": 1e-4, "U4": 1e-3}

POWER_ITER_TOL = 1e-8
POWER_ITER_MAX = 500


@dataclass(frozen=True)
class PropagatorSample:
    """The four ``N x N`` blocks of a propagator at one node pair.

    Blocks act Z<-Z (top_left), Z<-X (top_right), X<-Z (bottom_left) and
    X<-X (bottom_right).
    """

    t: float
    s: float
    top_left: np.ndarray
    top_right: np.ndarray
    bottom_left: np.ndarray
    bottom_right: np.ndarray

    @property
    def N(self) -> int:
        return self.top_left.shape[0]

    def matrix(self) -> np.ndarray:
        return np.block([[self.top_left, self.top_right], [self.bottom_left, self.bottom_right]])

    @classmethod
    def from_matrix(cls, t: float, s: float, mat: np.ndarray) -> "PropagatorSample":
        N = mat.shape[0] // 2
        return cls(t, s, mat[:N, :N], mat[:N, N:], mat[N:, :N], mat[N:, N:])

    def norm(self) -> float:
        return weighted_operator_norm(self.matrix())

    def first_row(self, v: np.ndarray) -> np.ndarray:
        """pi_1 of the image of ``v`` (length 2N)."""
        return self.top_left @ v[: self.N] + self.top_right @ v[self.N:]

    def second_row(self, v: np.ndarray) -> np.ndarray:
        return self.bottom_left @ v[: self.N] + self.bottom_right @ v[self.N:]

    def mode_block(self, n: int) -> np.ndarray:
        """2x2 block of mode ``n`` (meaningful when the blocks are diagonal)."""
        k = n - 1
        return np.array([[self.top_left[k, k], self.top_right[k, k]], [self.bottom_left[k, k], self.bottom_right[k, k]]])


def weighted_operator_norm(mats: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray | float:
    """Operator norm on Z x X: largest singular value of ``W M W^-1``.

    Accepts a single ``(2N, 2N)`` matrix or a stack.  Exact SVD for
    ``N <= 64``; power iteration on ``K^T K`` above.
    """
    mats = np.asarray(mats, dtype=float)
    N = mats.shape[-1] // 2
    w = product_weights(N) if weights is None else np.asarray(weights)
    K = w[:, None] * mats / w[None, :]
    if N <= 64:
        out = np.linalg.norm(K, ord=2, axis=(-2, -1))
    else:
        out = _power_norm(K)
    return float(out) if np.ndim(out) == 0 else out


def _power_norm(K: np.ndarray) -> np.ndarray:
    single = K.ndim == 2
    K = K[None] if single else K.reshape((-1,) + K.shape[-2:])
    rng = np.random.default_rng(DEFAULT_SEED)
    v = rng.standard_normal((K.shape[0], K.shape[-1], 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    est = np.zeros(K.shape[0])
    for _ in range(POWER_ITER_MAX):
        w = np.swapaxes(K, -1, -2) @ (K @ v)
        lam = np.linalg.norm(w, axis=1)[:, 0]
        v = w / np.where(lam > 0, lam, 1.0)[:, None, None]
        new = np.sqrt(lam)
        done = np.all(np.abs(new - est) <= POWER_ITER_TOL * np.maximum(new, 1e-300))
        est = new
        if done:
            break
    return est[0] if single else est


def build_U_from_S(f: FundamentalSolutionField, t: float, s: float) -> PropagatorSample:
    """Blocks ``[[-d_s S, S], [-d_t d_s S, d_t S]]`` = ``[[c, r], [cdot, rdot]]``."""
    i, j = f.pair(t, s)
    return PropagatorSample(
        float(f.grid.nodes[i]),
        float(f.grid.nodes[j]),
        np.diag(f.c[i, j]),
        np.diag(f.r[i, j]),
        np.diag(f.cdot[i, j]),
        np.diag(f.rdot[i, j]),
    )


def extract_S_from_U(u: PropagatorSample) -> np.ndarray:
    """``S(t,s) x = pi_1 U(t,s) (0, x)``: the top-right block."""
    return u.top_right


def first_order_generator(second_order: np.ndarray) -> np.ndarray:
    """``[[0, I], [G, 0]]`` for a stack of second-order generators ``G``."""
    G = np.asarray(second_order)
    N = G.shape[-1]
    out = np.zeros(G.shape[:-2] + (2 * N, 2 * N))
    out[..., :N, N:] = np.eye(N)
    out[..., N:, :N] = G
    return out


def product_probe_panel(N: int, seed: int = DEFAULT_SEED, n_random: int = 3) -> np.ndarray:
    """Probes in D x Z as columns of length 2N."""
    k = min(N, 8)
    cols = []
    for q in range(k):
        e = np.zeros(2 * N)
        e[q] = 1.0
        cols.append(e)
        e = np.zeros(2 * N)
        e[N + q] = 1.0
        cols.append(e)
    rng = np.random.default_rng(seed + 1)
    n = mode_numbers(N)
    for _ in range(n_random):
        x = rng.standard_normal(N) / n**3
        y = rng.standard_normal(N) / n**2
        cols.append(np.concatenate([x, y]))
    return np.stack(cols, axis=1)


def _rel_z(residual: np.ndarray, wz: np.ndarray, denom: np.ndarray) -> float:
    if residual.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(wz[:, None] * residual, axis=-2) / denom))


def u_axiom_residuals(
    field,
    *,
    seed: int = DEFAULT_SEED,
    tolerances: dict | None = None,
    max_base: int = 20,
    max_triples: int = 200,
) -> InvariantReport:
    """Residuals of (U1)-(U4) for a block field (unperturbed or perturbed).

    (U1) composition uses at most ``max_triples`` seeded node triples drawn
    from the subsampled nodes; (U2) is reported as a continuity modulus;
    (U3) is structural at finite truncation; (U4) compares central
    differences of step T/M with the generator, relative to the D x Z
    norm of the probe.
    """
    tol = dict(U_TOLERANCES)
    tol.update(tolerances or {})
    grid, N = field.grid, field.N
    M, h = grid.M, grid.h
    bases = subsample_nodes(M, max_base)
    needed = np.unique(np.clip(np.concatenate([bases - 1, bases, bases + 1]), 0, M))
    field.prepare(needed)

    wz = product_weights(N)
    P = product_probe_panel(N, seed)
    dnorm = np.linalg.norm(domain_product_weights(N)[:, None] * P, axis=0)
    znorm = np.linalg.norm(wz[:, None] * P, axis=0)

    U_diag = field.propagator(bases, bases)
    ident = float(np.max(weighted_operator_norm(U_diag - np.eye(2 * N))))

    rng = np.random.default_rng(seed)
    all_triples = np.array([(c, b, a) for a in bases for b in bases for c in bases if a <= b <= c])
    if len(all_triples) > max_triples:
        pick = np.sort(rng.choice(len(all_triples), size=max_triples, replace=False))
        all_triples = all_triples[pick]
    ti, si, ri = all_triples.T
    comp = field.propagator(ti, si) @ field.propagator(si, ri) - field.propagator(ti, ri)
    u1 = float(np.max(weighted_operator_norm(comp)))

    u2 = u4t = u4s = sup = 0.0
    for j in bases:
        I = np.arange(j, M + 1)
        U = field.propagator(I, j)
        sup = max(sup, float(np.max(weighted_operator_norm(U))))
        UP = U @ P
        if I.size >= 2:
            u2 = max(u2, _rel_z(UP[1:] - UP[:-1], wz, znorm))
        if I.size >= 3:
            A = first_order_generator(field.generator(I[1:-1]))
            fd = (UP[2:] - UP[:-2]) / (2 * h)
            u4t = max(u4t, _rel_z(fd - A @ UP[1:-1], wz, dnorm))
        if 1 <= j <= M - 1:
            Ii = np.arange(j + 1, M + 1)
            fd = (field.propagator(Ii, j + 1) - field.propagator(Ii, j - 1)) / (2 * h)
            As = first_order_generator(field.generator([j]))[0]
            u4s = max(u4s, _rel_z((fd + field.propagator(Ii, j) @ As) @ P, wz, dnorm))

    rep = InvariantReport()
    rep.add("U1_identity", ident, tol["U1_identity"], "U(t,t) = Id at sampled nodes")
    rep.add("U1_composition", u1, tol["U1"], f"{len(all_triples)} node triples, Z x X operator norm")
    rep.measured("U2_continuity_modulus", u2, "max ||(U(t+h,s)-U(t,s))p|| / ||p|| over adjacent nodes; strong continuity has no finite threshold")
    rep.structural("U3_invariance", "structural: at finite truncation every vector lies in D, so U(t,s)D is contained in D")
    rep.add("U4_dt", u4t, tol["U4"], "central difference in t vs generator, relative to D x Z probe norm")
    rep.add("U4_ds", u4s, tol["U4"], "central difference in s vs -U(t,s) generator(s)")
    rep.measured("U_sup_norm", sup, "sup of the Z x X operator norm over sampled pairs")
    return rep
