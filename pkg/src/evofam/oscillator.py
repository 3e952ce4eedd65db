"""Per-mode scalar problems behind the fundamental solution.

For mode ``n`` and base time ``s`` two solutions of

    u'' + n^2 alpha(t) u = 0

are tracked on the grid nodes ``t >= s``:

* ``r``  with ``r(s) = 0, r'(s) = 1``  (sine type, the multiplier of S),
* ``c``  with ``c(s) = 1, c'(s) = 0``  (cosine type, ``c = -d/ds r``).

``c`` solves the same equation because differentiating ``r(s, s) = 0`` and
``d/dt r(s, s) = 1`` in ``s`` gives exactly those initial values, so no
numerical differentiation in ``s`` is ever needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import CoefficientFamily, TimeGrid, TimeProfile, check_mode

# RK4 phase error per step is ~(n sqrt(alpha) dt)^5 / 120; 0.05 keeps the
# accumulated error of r below 1e-6 over [0, pi].
SUBSTEP_FACTOR = 0.05

CLOSED = "closed"
RK4 = "rk4"


def substeps_per_interval(n: int, cf: CoefficientFamily, grid: TimeGrid, scale: float = 1.0) -> int:
    """Number of RK4 substeps per grid interval for mode ``n``.

    The target substep is ``min(T/M, SUBSTEP_FACTOR / (n sqrt(sup alpha)))``
    times ``scale``; it is shrunk so that substeps tile each interval.
    """
    target = min(grid.h, SUBSTEP_FACTOR / (n * math.sqrt(cf.alpha_sup()))) * scale
    return max(1, math.ceil(grid.h / target - 1e-9))


def _resolve_method(cf: CoefficientFamily, method: str) -> str:
    if method == "auto":
        return CLOSED if cf.alpha.is_constant else RK4
    if method not in (CLOSED, RK4):
        raise ValueError(f"unknown method {method!r}")
    if method == CLOSED and not cf.alpha.is_constant:
        raise ValueError("closed-form path needs a constant alpha")
    return method


def _closed_form(n: int, alpha: float, dt: np.ndarray) -> np.ndarray:
    w = n * math.sqrt(alpha)
    sin, cos = np.sin(w * dt), np.cos(w * dt)
    return np.stack([sin / w, cos, cos, -w * sin], axis=-1)


def _rk4(n: int, alpha: TimeProfile, grid: TimeGrid, bases: np.ndarray, k: int) -> np.ndarray:
    """RK4 for all base indices at once; returns ``out[i, b, (r, rdot, c, cdot)]``.

    Rows ``i < bases[b]`` are zero.  Every base is advanced with the same
    substep sequence, so a column does not depend on which other bases are
    in the batch.
    """
    M = grid.M
    dt = grid.h / k
    nodes = grid.nodes
    # n^2 alpha at every half substep of every interval
    half = nodes[:-1, None] + (dt / 2) * np.arange(2 * k + 1)[None, :]
    a_half = (n * n) * np.asarray(alpha(half), dtype=float)

    out = np.zeros((M + 1, bases.size, 4))
    u = np.zeros((bases.size, 2))  # (r, c)
    v = np.zeros((bases.size, 2))  # (rdot, cdot)
    first = int(bases[0])
    for i in range(first, M + 1):
        na = int(np.searchsorted(bases, i, side="right"))
        fresh = bases[:na] == i
        u[:na][fresh] = (0.0, 1.0)
        v[:na][fresh] = (1.0, 0.0)
        out[i, :na, 0] = u[:na, 0]
        out[i, :na, 1] = v[:na, 0]
        out[i, :na, 2] = u[:na, 1]
        out[i, :na, 3] = v[:na, 1]
        if i == M:
            break
        uu, vv = u[:na], v[:na]
        a = a_half[i]
        for q in range(k):
            a0, am, a1 = a[2 * q], a[2 * q + 1], a[2 * q + 2]
            k1u, k1v = vv, -a0 * uu
            k2u, k2v = vv + (dt / 2) * k1v, -am * (uu + (dt / 2) * k1u)
            k3u, k3v = vv + (dt / 2) * k2v, -am * (uu + (dt / 2) * k2u)
            k4u, k4v = vv + dt * k3v, -a1 * (uu + dt * k3u)
            uu = uu + (dt / 6) * (k1u + 2 * k2u + 2 * k3u + k4u)
            vv = vv + (dt / 6) * (k1v + 2 * k2v + 2 * k3v + k4v)
        u[:na], v[:na] = uu, vv
    return out


def mode_table(
    n: int,
    cf: CoefficientFamily,
    grid: TimeGrid,
    bases=None,
    *,
    method: str = "auto",
    substep_scale: float = 1.0,
) -> np.ndarray:
    """``(r, rdot, c, cdot)`` of mode ``n`` for every node and base index.

    Returns an array of shape ``(M+1, len(bases), 4)`` indexed
    ``[t index, base, quantity]``; entries with ``t < s`` are zero.
    """
    n = check_mode(n)
    bases = np.arange(grid.M + 1) if bases is None else np.sort(np.asarray(bases, dtype=int))
    method = _resolve_method(cf, method)
    if method == CLOSED:
        t = grid.nodes
        dt = t[:, None] - t[bases][None, :]
        out = _closed_form(n, float(cf.alpha(0.0)), dt)
        out[dt < 0] = 0.0
        return out
    k = substeps_per_interval(n, cf, grid, substep_scale)
    return _rk4(n, cf.alpha, grid, bases, k)


@dataclass(frozen=True)
class OscillatorSolution:
    n: int
    s: float
    s_index: int
    t: np.ndarray
    r: np.ndarray
    rdot: np.ndarray
    c: np.ndarray
    cdot: np.ndarray
    method: str

    def wronskian(self) -> np.ndarray:
        """``c rdot - cdot r``; identically 1 for the exact solutions."""
        return self.c * self.rdot - self.cdot * self.r

    def position(self, t: float) -> int:
        """Row of node ``t`` in this solution."""
        h = self.t[1] - self.t[0] if self.t.size > 1 else 1.0
        x = (float(t) - self.s) / h if self.t.size > 1 else 0.0
        j = int(round(x))
        if float(t) < self.s - 1e-12 * max(1.0, abs(self.s)):
            raise ValueError(f"t={t} precedes the base time s={self.s}")
        if not 0 <= j < self.t.size or abs(self.t[j] - float(t)) > 1e-9 * max(1.0, abs(float(t))):
            raise ValueError(f"t={t} is not a grid node of this solution")
        return j


def solve_mode(
    n: int,
    s: float,
    cf: CoefficientFamily,
    grid: TimeGrid,
    *,
    method: str = "auto",
    substep_scale: float = 1.0,
) -> OscillatorSolution:
    """Solve mode ``n`` from base node ``s`` on all nodes ``t >= s``.

    ``method`` is ``"auto"`` (closed form for constant alpha, RK4
    otherwise), ``"closed"`` or ``"rk4"``.
    """
    j = grid.index(s)
    resolved = _resolve_method(cf, method)
    table = mode_table(n, cf, grid, [j], method=resolved, substep_scale=substep_scale)[j:, 0, :]
    return OscillatorSolution(
        n=check_mode(n),
        s=float(grid.nodes[j]),
        s_index=j,
        t=np.array(grid.nodes[j:]),
        r=table[:, 0].copy(),
        rdot=table[:, 1].copy(),
        c=table[:, 2].copy(),
        cdot=table[:, 3].copy(),
        method=resolved,
    )


def mixed_partial(sol: OscillatorSolution, t: float) -> float:
    """``d/dt d/ds r_n(t, s) = -cdot(t)``; zero at ``t = s``."""
    return float(-sol.cdot[sol.position(t)])


# ---------------------------------------------------------------------------
# bounds

def log_alpha_decrease(cf: CoefficientFamily, grid: TimeGrid, refine: int = 20) -> np.ndarray:
    """``L(t_i) = int_0^{t_i} max(-alpha'/alpha, 0)`` at every node.

    Used for the energy envelope ``G(t, s) = exp(L(t) - L(s))``.
    """
    fine = np.linspace(0.0, grid.T, grid.M * refine + 1)
    dlog = np.diff(np.log(np.asarray(cf.alpha(fine), dtype=float)))
    acc = np.concatenate([[0.0], np.cumsum(np.maximum(-dlog, 0.0))])
    return acc[::refine]


def bound_excess(sol: OscillatorSolution, cf: CoefficientFamily, grid: TimeGrid) -> dict[str, float]:
    """Largest amount by which each bound is exceeded (<= 0 means it holds).

    ``paper_*`` are the four literature bounds

        |r| <= 1/(sqrt(alpha(s)) n),  |d_t r| <= 1,  |d_s r| <= 1,  |d_t d_s r| <= n;

    ``energy_*`` follow from the monotone functional
    ``u'^2/alpha + n^2 u^2``, whose growth is controlled by the decrease of
    ``log alpha``; they hold for every C^1 alpha > 0.
    """
    n = sol.n
    a_s = float(cf.alpha(sol.s))
    a_t = np.asarray(cf.alpha(sol.t), dtype=float)
    L = log_alpha_decrease(cf, grid)
    G = np.exp(L[sol.s_index:] - L[sol.s_index])
    r, rdot, c, cdot = np.abs(sol.r), np.abs(sol.rdot), np.abs(sol.c), np.abs(sol.cdot)
    return {
        "paper_r": float(np.max(r - 1.0 / (math.sqrt(a_s) * n))),
        "paper_rdot": float(np.max(rdot - 1.0)),
        "paper_ds": float(np.max(c - 1.0)),
        "paper_dtds": float(np.max(cdot - n)),
        "energy_r": float(np.max(r - np.sqrt(G) / (math.sqrt(a_s) * n))),
        "energy_rdot": float(np.max(rdot - np.sqrt(a_t * G / a_s))),
        "energy_ds": float(np.max(c - np.sqrt(G))),
        "energy_dtds": float(np.max(cdot - n * np.sqrt(a_t * G))),
    }


def bound_survey(
    cf: CoefficientFamily,
    grid: TimeGrid,
    N: int,
    *,
    method: str = "auto",
    tables=None,
) -> dict[str, float]:
    """Worst excess of every bound over modes ``1..N`` and all base nodes,
    plus the worst Wronskian defect.

    ``tables`` optionally supplies precomputed ``(r, rdot, c, cdot)`` arrays
    indexed ``[t, s, n]`` (as stored by a fundamental-solution field).
    """
    worst: dict[str, float] = {}
    wr = 0.0
    L = log_alpha_decrease(cf, grid)
    nodes = grid.nodes
    a = np.asarray(cf.alpha(nodes), dtype=float)
    mask = np.tril(np.ones((grid.M + 1, grid.M + 1), dtype=bool))
    G = np.exp(L[:, None] - L[None, :])
    a_t, a_s = a[:, None], a[None, :]
    for n in range(1, N + 1):
        if tables is None:
            tab = mode_table(n, cf, grid, method=method)
        else:
            tab = np.stack([q[:, :, n - 1] for q in tables], axis=-1)
        r, rdot, c, cdot = (np.abs(tab[..., q]) for q in range(4))
        excess = {
            "paper_r": r - 1.0 / (np.sqrt(a_s) * n),
            "paper_rdot": rdot - 1.0,
            "paper_ds": c - 1.0,
            "paper_dtds": cdot - n,
            "energy_r": r - np.sqrt(G) / (np.sqrt(a_s) * n),
            "energy_rdot": rdot - np.sqrt(a_t * G / a_s),
            "energy_ds": c - np.sqrt(G),
            "energy_dtds": cdot - n * np.sqrt(a_t * G),
        }
        for key, val in excess.items():
            worst[key] = max(worst.get(key, -np.inf), float(np.max(val[mask])))
        w = tab[..., 2] * tab[..., 1] - tab[..., 3] * tab[..., 0]
        wr = max(wr, float(np.max(np.abs(w[mask] - 1.0))))
    worst["wronskian"] = wr
    return worst
