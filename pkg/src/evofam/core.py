"""Shared domain types: spectral vectors, weighted norms, time grids,
coefficient families and run configuration.

Everything lives on the first ``N`` Dirichlet sine modes of ``(0, pi)``.
The three norms are weighted l2 norms of the sine coefficients::

    X:  sum a_n^2
    Z:  sum (1 + n^2) a_n^2
    D:  sum (1 + n^4) a_n^2
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline

FORMAT_VERSION = "evofam-1"
DEFAULT_SEED = 0xE70F


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class AlphaViolation(ConfigError):
    pass


class Space(str, Enum):
    X = "X"
    Z = "Z"
    D = "D"


def mode_numbers(N: int) -> np.ndarray:
    return np.arange(1, N + 1, dtype=float)


def space_weights(N: int, space: Space | str) -> np.ndarray:
    """Square roots of the per-mode weights of ``space``."""
    n = mode_numbers(N)
    space = Space(space)
    if space is Space.X:
        return np.ones(N)
    if space is Space.Z:
        return np.sqrt(1.0 + n**2)
    return np.sqrt(1.0 + n**4)


def product_weights(N: int) -> np.ndarray:
    """Diagonal of the weight map for the norm on Z x X (length 2N)."""
    return np.concatenate([space_weights(N, Space.Z), np.ones(N)])


def domain_product_weights(N: int) -> np.ndarray:
    """Diagonal of the weight map for the norm on D x Z (length 2N)."""
    return np.concatenate([space_weights(N, Space.D), space_weights(N, Space.Z)])


def check_mode(n: int) -> int:
    if int(n) != n or n < 1:
        raise ValueError(f"mode index must be a positive integer, got {n!r}")
    return int(n)


class SpectralVector:
    """Sine coefficients ``a_1..a_N`` with a space tag (X, Z or D).

    The tag records intended use; every vector is an element of X.
    """

    __slots__ = ("coeffs", "space")

    def __init__(self, coeffs: Sequence[float] | np.ndarray, space: Space | str = Space.X):
        a = np.array(coeffs, dtype=float).reshape(-1)
        if a.size < 1:
            raise ValueError("a spectral vector needs at least one coefficient")
        if not np.all(np.isfinite(a)):
            raise ValueError("spectral coefficients must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "coeffs", a)
        object.__setattr__(self, "space", Space(space))

    def __setattr__(self, name, value):
        raise AttributeError("SpectralVector is immutable")

    @classmethod
    def unit(cls, n: int, N: int, space: Space | str = Space.X) -> "SpectralVector":
        a = np.zeros(N)
        a[check_mode(n) - 1] = 1.0
        return cls(a, space)

    @classmethod
    def zeros(cls, N: int, space: Space | str = Space.X) -> "SpectralVector":
        return cls(np.zeros(N), space)

    @property
    def N(self) -> int:
        return self.coeffs.size

    def norm(self, space: Space | str | None = None) -> float:
        return norm(self, space if space is not None else self.space)

    def retag(self, space: Space | str) -> "SpectralVector":
        return SpectralVector(self.coeffs, space)

    def __eq__(self, other):
        if not isinstance(other, SpectralVector):
            return NotImplemented
        return self.space is other.space and np.array_equal(self.coeffs, other.coeffs)

    def __repr__(self):
        return f"SpectralVector({self.coeffs.tolist()!r}, space={self.space.value})"


def norm(v: SpectralVector, space: Space | str) -> float:
    """Weighted l2 norm of ``v`` in X, Z or D."""
    wa = space_weights(v.N, space) * v.coeffs
    # scale first so tiny or huge coefficients neither underflow nor overflow
    m = float(np.max(np.abs(wa)))
    if m == 0.0 or not math.isfinite(m):
        return m
    return m * float(np.linalg.norm(wa / m))


@dataclass(frozen=True)
class ProductVector:
    """Element of Z x X (position in Z, velocity in X)."""

    first: SpectralVector
    second: SpectralVector

    def __post_init__(self):
        if self.first.N != self.second.N:
            raise ValueError("components must share the truncation N")

    @property
    def N(self) -> int:
        return self.first.N

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.first.coeffs, self.second.coeffs])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ProductVector":
        arr = np.asarray(arr, dtype=float)
        N = arr.size // 2
        return cls(SpectralVector(arr[:N], Space.Z), SpectralVector(arr[N:], Space.X))

    def norm(self) -> float:
        return math.hypot(norm(self.first, Space.Z), norm(self.second, Space.X))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform nodes ``t_i = i*T/M``, ``i = 0..M``."""

    T: float
    M: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"T must be positive, got {self.T!r}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M!r}")

    @property
    def h(self) -> float:
        return self.T / self.M

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.M + 1) * (self.T / self.M)
        t[-1] = self.T
        t.setflags(write=False)
        return t

    def index(self, t: float | int, *, tol: float = 1e-9) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not a node."""
        x = float(t) / self.h
        i = int(round(x))
        if abs(x - i) > tol * max(1.0, abs(x)) or not 0 <= i <= self.M:
            raise ValueError(f"t={t!r} is not a node of the grid (T={self.T}, M={self.M})")
        return i

    def refined(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.T, self.M * factor)


# ---------------------------------------------------------------------------
# coefficient menus

ALPHA_FAMILIES = ("constant", "affine", "cosine", "table")
BETA_FAMILIES = ("zero", "separable", "table")


def _freeze(value: Any) -> Any:
    if isinstance(value, Mapping):
        return tuple(sorted((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple, np.ndarray)):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple) and value and all(
        isinstance(x, tuple) and len(x) == 2 and isinstance(x[0], str) for x in value
    ):
        return {k: _thaw(v) for k, v in value}
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


def _number(params: Mapping[str, Any], key: str, where: str) -> float:
    if key not in params:
        raise ConfigError(f"{where}.params.{key}", "missing parameter")
    v = params[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}.params.{key}", f"expected a finite number, got {v!r}")
    return float(v)


def _float_list(params: Mapping[str, Any], key: str, where: str) -> list:
    if key not in params:
        raise ConfigError(f"{where}.params.{key}", "missing parameter")
    try:
        arr = np.asarray(params[key], dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.params.{key}", "expected an array of numbers") from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}.params.{key}", "values must be finite")
    return arr.tolist()


@dataclass(frozen=True)
class TimeProfile:
    """Scalar C^1 function of time from the closed menu.

    ``constant{c}``, ``affine{a,b}`` (a + b t), ``cosine{a,b,omega}``
    (a + b cos(omega t)) or ``table{t, values}`` (natural cubic spline).
    """

    family: str
    params: tuple = ()

    @classmethod
    def make(cls, family: str, where: str = "alpha", **params) -> "TimeProfile":
        if family not in ALPHA_FAMILIES:
            raise ConfigError(f"{where}.family", f"unknown family {family!r}; expected one of {ALPHA_FAMILIES}")
        if family == "constant":
            clean = {"c": _number(params, "c", where)}
        elif family == "affine":
            clean = {"a": _number(params, "a", where), "b": _number(params, "b", where)}
        elif family == "cosine":
            clean = {k: _number(params, k, where) for k in ("a", "b", "omega")}
        else:
            t = _float_list(params, "t", where)
            values = _float_list(params, "values", where)
            if len(t) != len(values) or len(t) < 2:
                raise ConfigError(f"{where}.params", "table needs matching t/values of length >= 2")
            if np.any(np.diff(t) <= 0):
                raise ConfigError(f"{where}.params.t", "table times must be strictly increasing")
            clean = {"t": t, "values": values}
        return cls(family, _freeze(clean))

    @property
    def p(self) -> dict:
        return _thaw(self.params) if self.params else {}

    @cached_property
    def _spline(self) -> CubicSpline:
        p = self.p
        return CubicSpline(np.asarray(p["t"]), np.asarray(p["values"]), bc_type="natural")

    @property
    def is_constant(self) -> bool:
        if self.family == "constant":
            return True
        p = self.p
        if self.family in ("affine", "cosine"):
            return p["b"] == 0.0 or (self.family == "cosine" and p["omega"] == 0.0)
        return False

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.p
        if self.family == "constant":
            out = np.full(t.shape, p["c"])
        elif self.family == "affine":
            out = p["a"] + p["b"] * t
        elif self.family == "cosine":
            out = p["a"] + p["b"] * np.cos(p["omega"] * t)
        else:
            out = self._spline(t)
        return out if out.ndim else float(out)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        p = self.p
        if self.family == "constant":
            out = np.zeros(t.shape)
        elif self.family == "affine":
            out = np.full(t.shape, p["b"])
        elif self.family == "cosine":
            out = -p["b"] * p["omega"] * np.sin(p["omega"] * t)
        else:
            out = self._spline(t, 1)
        return out if out.ndim else float(out)

    def _candidates(self, T: float) -> np.ndarray:
        """Points of [0, T] containing every extremum of the profile."""
        pts = [0.0, T]
        p = self.p
        if self.family == "cosine" and p["omega"] != 0.0:
            k_max = int(math.floor(abs(p["omega"]) * T / math.pi))
            pts.extend(k * math.pi / abs(p["omega"]) for k in range(k_max + 1))
        elif self.family == "table":
            roots = self._spline.derivative().roots(extrapolate=True)
            pts.extend(r for r in np.real(roots) if 0.0 <= r <= T)
        return np.clip(np.asarray(pts), 0.0, T)

    def sup(self, T: float) -> float:
        return float(np.max(self(self._candidates(T))))

    def inf(self, T: float) -> float:
        return float(np.min(self(self._candidates(T))))

    def to_dict(self) -> dict:
        return {"family": self.family, "params": self.p}


@dataclass(frozen=True)
class BetaProfile:
    """Multiplier beta(t, xi) of the bounded perturbation.

    ``zero``; ``separable{g, p}`` with ``g`` a :class:`TimeProfile` spec and
    ``p`` polynomial coefficients ``[c0, .., c4]`` in xi; or
    ``table{t, xi, values}`` (bicubic spline, ``values[i][k]`` at
    ``(t[i], xi[k])``).
    """

    family: str
    params: tuple = ()

    @classmethod
    def make(cls, family: str, where: str = "beta", **params) -> "BetaProfile":
        if family not in BETA_FAMILIES:
            raise ConfigError(f"{where}.family", f"unknown family {family!r}; expected one of {BETA_FAMILIES}")
        if family == "zero":
            clean: dict = {}
        elif family == "separable":
            g = params.get("g", {"family": "constant", "params": {"c": 1.0}})
            if not isinstance(g, Mapping) or "family" not in g:
                raise ConfigError(f"{where}.params.g", "expected {family, params}")
            gp = TimeProfile.make(g["family"], f"{where}.params.g", **dict(g.get("params", {})))
            poly = _float_list(params, "p", where)
            if not 1 <= len(poly) <= 5:
                raise ConfigError(f"{where}.params.p", "polynomial must have 1..5 coefficients (degree <= 4)")
            clean = {"g": gp.to_dict(), "p": poly}
        else:
            t = _float_list(params, "t", where)
            xi = _float_list(params, "xi", where)
            values = np.asarray(_float_list(params, "values", where))
            if values.shape != (len(t), len(xi)) or len(t) < 4 or len(xi) < 4:
                raise ConfigError(f"{where}.params.values", "expected a len(t) x len(xi) table with >= 4 samples per axis")
            clean = {"t": t, "xi": xi, "values": values.tolist()}
        return cls(family, _freeze(clean))

    @property
    def p(self) -> dict:
        return _thaw(self.params) if self.params else {}

    @property
    def is_zero(self) -> bool:
        if self.family == "zero":
            return True
        p = self.p
        if self.family == "separable":
            return all(c == 0.0 for c in p["p"])
        return bool(np.all(np.asarray(p["values"]) == 0.0))

    @cached_property
    def time_factor(self) -> TimeProfile:
        g = self.p["g"]
        return TimeProfile.make(g["family"], **g["params"])

    @cached_property
    def _spline(self) -> RectBivariateSpline:
        p = self.p
        return RectBivariateSpline(np.asarray(p["t"]), np.asarray(p["xi"]), np.asarray(p["values"]), kx=3, ky=3)

    def spatial(self, xi) -> np.ndarray:
        """The xi-polynomial of a separable profile."""
        return np.polynomial.polynomial.polyval(np.asarray(xi, dtype=float), self.p["p"])

    def __call__(self, t: float, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.family == "zero":
            return np.zeros(xi.shape)
        if self.family == "separable":
            return self.time_factor(t) * self.spatial(xi)
        return self._spline(np.atleast_1d(float(t)), xi.reshape(-1), grid=True).reshape(xi.shape)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": self.p}


@dataclass(frozen=True)
class CoefficientFamily:
    """``A(t) = alpha(t) A0`` (Dirichlet Laplacian A0) and ``B(t)f = beta(t,.) f``.

    Construction does not check ``alpha >= 1``; :meth:`check_alpha` does,
    and every public entry point that requires it calls it.
    """

    alpha: TimeProfile
    beta: BetaProfile
    T: float

    def alpha_sup(self) -> float:
        return self.alpha.sup(self.T)

    def alpha_inf(self) -> float:
        return self.alpha.inf(self.T)

    def check_alpha(self, grid: TimeGrid | None = None) -> None:
        """Raise :class:`AlphaViolation` unless alpha >= 1 on [0, T].

        The exact infimum over the parametric menu (or over the spline
        pieces) is used, which also covers a 10x refined sampling of
        ``grid``.
        """
        lo = self.alpha_inf()
        if grid is not None:
            fine = np.linspace(0.0, self.T, 10 * grid.M + 1)
            lo = min(lo, float(np.min(self.alpha(fine))))
        if lo < 1.0:
            raise AlphaViolation("alpha", f"alpha violates α ≥ 1 (min alpha = {lo:.6g})")

    def second_order_diag(self, t: float, N: int) -> np.ndarray:
        """Diagonal of ``A(t)`` on the first N modes: ``-alpha(t) n^2``."""
        return -self.alpha(float(t)) * mode_numbers(N) ** 2


def graph_norm_equivalence_constant(cf: CoefficientFamily, grid: TimeGrid) -> float:
    """Constant C in ``||.||_{A0} <= ||.||_{A(t)} <= C ||.||_{A0}``, i.e. sup alpha."""
    cf.check_alpha(grid)
    return cf.alpha_sup()


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class Tolerances:
    residual: float = 1e-3
    picard: float = 1e-10
    ode: float = 1e-8


@dataclass(frozen=True)
class RunSpec:
    cf: CoefficientFamily
    N: int
    grid: TimeGrid
    tolerances: Tolerances = field(default_factory=Tolerances)
    phi: tuple = ()
    psi: tuple = ()

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def M(self) -> int:
        return self.grid.M

    def initial(self) -> tuple[SpectralVector, SpectralVector]:
        """Initial position and velocity, zero-padded to N."""
        x = np.zeros(self.N)
        y = np.zeros(self.N)
        x[: len(self.phi)] = self.phi
        y[: len(self.psi)] = self.psi
        return SpectralVector(x, Space.D), SpectralVector(y, Space.Z)

    def to_dict(self) -> dict:
        return {
            "T": self.grid.T,
            "N": self.N,
            "M": self.grid.M,
            "alpha": self.cf.alpha.to_dict(),
            "beta": self.cf.beta.to_dict(),
            "tolerances": {
                "residual": self.tolerances.residual,
                "picard": self.tolerances.picard,
                "ode": self.tolerances.ode,
            },
            "initial": {"phi": list(self.phi), "psi": list(self.psi)},
        }

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunSpec":
        d = self.to_dict()
        d.update(changes)
        return spec_from_mapping(d)


def _require(doc: Mapping[str, Any], key: str) -> Any:
    if key not in doc:
        raise ConfigError(key, "missing required key")
    return doc[key]


def _positive_int(doc: Mapping[str, Any], key: str) -> int:
    v = _require(doc, key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(key, f"expected an integer, got {v!r}")
    if v <= 0:
        raise ConfigError(key, f"must be positive, got {v!r}")
    return int(v)


def _menu(doc: Mapping[str, Any], key: str) -> tuple[str, dict]:
    entry = _require(doc, key)
    if not isinstance(entry, Mapping) or "family" not in entry:
        raise ConfigError(key, "expected an object with 'family' and 'params'")
    params = entry.get("params", {}) or {}
    if not isinstance(params, Mapping):
        raise ConfigError(f"{key}.params", "expected an object")
    return str(entry["family"]), dict(params)


def spec_from_mapping(doc: Mapping[str, Any]) -> RunSpec:
    """Validate a parsed configuration tree into a :class:`RunSpec`."""
    if not isinstance(doc, Mapping):
        raise ConfigError("<root>", "configuration must be an object")
    T = _require(doc, "T")
    if isinstance(T, bool) or not isinstance(T, (int, float)) or not math.isfinite(T):
        raise ConfigError("T", f"expected a number, got {T!r}")
    if T <= 0:
        raise ConfigError("T", f"must be positive, got {T!r}")
    N = _positive_int(doc, "N")
    M = _positive_int(doc, "M")
    grid = TimeGrid(float(T), M)

    fam, params = _menu(doc, "alpha")
    alpha = TimeProfile.make(fam, "alpha", **params)
    fam, params = _menu(doc, "beta")
    beta = BetaProfile.make(fam, "beta", **params)
    cf = CoefficientFamily(alpha, beta, float(T))
    cf.check_alpha(grid)

    tol_doc = doc.get("tolerances", {}) or {}
    if not isinstance(tol_doc, Mapping):
        raise ConfigError("tolerances", "expected an object")
    unknown = set(tol_doc) - {"residual", "picard", "ode"}
    if unknown:
        raise ConfigError(f"tolerances.{sorted(unknown)[0]}", "unknown tolerance")
    defaults = Tolerances()
    tol_values = {}
    for name in ("residual", "picard", "ode"):
        v = tol_doc.get(name, getattr(defaults, name))
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"tolerances.{name}", f"expected a positive number, got {v!r}")
        tol_values[name] = float(v)

    init = doc.get("initial", {}) or {}
    if not isinstance(init, Mapping):
        raise ConfigError("initial", "expected an object")
    data = {}
    for name in ("phi", "psi"):
        coeffs = _float_list(init, name, "initial") if name in init else []
        if len(coeffs) > N:
            raise ConfigError(f"initial.{name}", f"has {len(coeffs)} coefficients but N = {N}")
        data[name] = tuple(coeffs)
    return RunSpec(cf, N, grid, Tolerances(**tol_values), data["phi"], data["psi"])


def parse_config(text: str) -> RunSpec:
    """Parse and validate a JSON configuration document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"malformed document: {exc}") from None
    return spec_from_mapping(doc)


def serialize_config(spec: RunSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True, indent=2)
