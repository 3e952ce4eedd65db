"""Command-line entry point: ``evofam {oscillator,solve,check,perturb,convergence}``.

Every subcommand reads a JSON config, writes its outputs plus a
``manifest.json`` into ``--out`` and exits with 0 (all checks passed),
1 (completed with failures) or 2 (bad config, usage or IO error).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import DEFAULT_SEED, FORMAT_VERSION, ConfigError, RunSpec, Space, parse_config
from .fundsol import FundamentalSolutionField
from .oscillator import mode_table, solve_mode
from .perturbation import (
    MEMORY_BUDGET,
    MemoryBudgetExceeded,
    PicardError,
    assemble_B,
    direct_oracle,
    duhamel_second_form_residual,
    oracle_gap,
    solve_volterra,
    solve_volterra_field,
)
from .reduction import weighted_operator_norm
from .verify import ORACLE_TOL, SuiteError, convergence_study, report_document, run_full_suite

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2


class OutputError(OSError):
    pass


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config: dict
    output_dir: str
    seed: int
    format_version: str = FORMAT_VERSION


def fmt(x: float) -> str:
    """17 significant digits: parses back to the same double."""
    return format(float(x), ".17g")


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
                handle.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _load(args) -> RunSpec:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {args.config}: {exc.strerror or exc}") from None
    return parse_config(text)


def _finish(args, spec: RunSpec, name: str) -> Path:
    out = Path(args.out)
    manifest = RunManifest(name, spec.to_dict(), str(out), int(args.seed))
    write_atomic(out / "manifest.json", json_text(asdict(manifest)))
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_oscillator(args) -> int:
    spec = _load(args)
    if args.n < 1:
        raise ConfigError("--n", f"mode index must be >= 1, got {args.n}")
    try:
        spec.grid.index(args.s)
    except ValueError as exc:
        raise ConfigError("--s", str(exc)) from None
    sol = solve_mode(args.n, args.s, spec.cf, spec.grid, method=args.method)
    rows = zip(sol.t, sol.r, sol.rdot, sol.c, sol.cdot)
    out = _finish(args, spec, "oscillator")
    write_atomic(out / f"oscillator_n{args.n}.csv", csv_text(["t", "r", "rdot", "c", "cdot"], rows))
    return EXIT_OK


def solve_trajectory(spec: RunSpec, method: str = "volterra") -> np.ndarray:
    """``(M+1, N)`` coefficients of the solution for the configured data."""
    x, y = spec.initial()
    x, y = np.asarray(x.coeffs), np.asarray(y.coeffs)
    N, grid, cf = spec.N, spec.grid, spec.cf
    if cf.beta.is_zero:
        traj = np.empty((grid.M + 1, N))
        for n in range(1, N + 1):
            tab = mode_table(n, cf, grid, [0])[:, 0, :]
            traj[:, n - 1] = tab[:, 2] * x[n - 1] + tab[:, 0] * y[n - 1]
        return traj
    b = assemble_B(cf, N, grid)
    if method == "direct":
        V = direct_oracle(cf, b, 0.0, grid)
    else:
        f = FundamentalSolutionField.build(cf, grid, N)
        V = solve_volterra(f, b, 0.0, spec.tolerances).V
    return V[:, :N, :N] @ x + V[:, :N, N:] @ y


def cmd_solve(args) -> int:
    spec = _load(args)
    traj = solve_trajectory(spec, args.method)
    header = ["t"] + [f"a_{n}" for n in range(1, spec.N + 1)]
    rows = (np.concatenate([[t], a]) for t, a in zip(spec.grid.nodes, traj))
    out = _finish(args, spec, "solve")
    write_atomic(out / "trajectory.csv", csv_text(header, rows))
    return EXIT_OK


def cmd_check(args) -> int:
    spec = _load(args)
    rep = run_full_suite(spec, args.seed, memory_budget=args.memory_budget)
    out = _finish(args, spec, "check")
    write_atomic(out / "report.json", json_text(report_document(rep)))
    for name in rep.failures:
        print(f"FAIL {name}: residual {rep[name].residual:.3e} > {rep[name].tolerance:.1e}", file=sys.stderr)
    print(f"{len(rep.entries) - len(rep.failures)}/{len(rep.entries)} checks passed")
    return EXIT_OK if rep.all_passed else EXIT_FAILURES


def cmd_perturb(args) -> int:
    spec = _load(args)
    grid, N, cf = spec.grid, spec.N, spec.cf
    try:
        j = grid.index(args.s)
    except ValueError as exc:
        raise ConfigError("--s", str(exc)) from None
    s = float(grid.nodes[j])
    b = assemble_B(cf, N, grid)
    doc: dict = {
        "meta": {"format_version": FORMAT_VERSION, "config_hash": spec.digest(), "N": N, "M": grid.M, "T": grid.T, "s": s, "method": args.method},
        "B_continuity": {"X": b.continuity_modulus(Space.X), "Z": b.continuity_modulus(Space.Z)},
    }
    ok = True
    norms = {}
    if args.method in ("volterra", "both"):
        f = FundamentalSolutionField.build(cf, grid, N)
        col = solve_volterra(f, b, s, spec.tolerances)
        doc["picard"] = {
            "iterations": col.iterations,
            "increments": col.increments,
            "ratios": col.contraction_ratios(),
        }
        norms["norm_volterra"] = weighted_operator_norm(col.V[j:])
        try:
            v = solve_volterra_field(f, b, spec.tolerances, bases=range(j, grid.M + 1), memory_budget=args.memory_budget)
            doc["duhamel_second_form"] = duhamel_second_form_residual(f, b, v, s)
        except MemoryBudgetExceeded as exc:
            doc["duhamel_second_form"] = None
            doc["duhamel_note"] = str(exc)
    if args.method in ("direct", "both"):
        orc = direct_oracle(cf, b, s, grid)
        norms["norm_direct"] = weighted_operator_norm(orc[j:])
    if args.method == "both":
        gap = oracle_gap(col.V, orc, j)
        doc["oracle_gap"] = {"residual": gap, "tolerance": ORACLE_TOL, "pass": gap <= ORACLE_TOL}
        ok = gap <= ORACLE_TOL
    out = _finish(args, spec, "perturb")
    write_atomic(out / "perturb.json", json_text(doc))
    if args.csv:
        cols = list(norms)
        rows = (np.concatenate([[t], [np.atleast_1d(norms[c])[k] for c in cols]]) for k, t in enumerate(grid.nodes[j:]))
        write_atomic(out / "perturb_norms.csv", csv_text(["t"] + cols, rows))
    return EXIT_OK if ok else EXIT_FAILURES


def _refinements(text: str | None, spec: RunSpec) -> list[tuple[int, int]]:
    if not text:
        return [(spec.N, spec.M), (spec.N, 2 * spec.M), (spec.N, 4 * spec.M)]
    pairs = []
    for item in text.split(","):
        try:
            n, m = item.split(":")
            pairs.append((int(n), int(m)))
        except ValueError:
            raise ConfigError("--refinements", f"expected N:M pairs separated by commas, got {item!r}") from None
    return pairs


def cmd_convergence(args) -> int:
    spec = _load(args)
    refinements = _refinements(args.refinements, spec)
    try:
        rows = convergence_study(spec, refinements)
    except ValueError as exc:
        raise ConfigError("--refinements", str(exc)) from None
    out = _finish(args, spec, "convergence")
    write_atomic(
        out / "convergence.csv",
        csv_text(["N", "M", "difference", "ratio", "monotone"], ([r["N"], r["M"], r["difference"], r["ratio"], int(r["monotone"])] for r in rows)),
    )
    return EXIT_OK if rows[-1]["monotone"] else EXIT_FAILURES


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON configuration file")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=lambda v: int(v, 0), default=DEFAULT_SEED, help="probe seed (default 0xE70F)")

    p = argparse.ArgumentParser(prog="evofam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("oscillator", parents=[common], help="per-mode r, rdot, c, cdot as CSV")
    q.add_argument("--n", type=int, required=True, help="mode index")
    q.add_argument("--s", type=float, default=0.0, help="base time, must be a grid node")
    q.add_argument("--method", choices=["auto", "closed", "rk4"], default="auto")
    q.set_defaults(func=cmd_oscillator)

    q = sub.add_parser("solve", parents=[common], help="solution trajectory as CSV")
    q.add_argument("--method", choices=["volterra", "direct"], default="volterra")
    q.set_defaults(func=cmd_solve)

    q = sub.add_parser("check", parents=[common], help="full invariant report as JSON")
    q.add_argument("--memory-budget", type=int, default=MEMORY_BUDGET, help="matrix entries allowed for a full perturbed field")
    q.set_defaults(func=cmd_check)

    q = sub.add_parser("perturb", parents=[common], help="perturbed propagator report")
    q.add_argument("--s", type=float, default=0.0, help="base time, must be a grid node")
    q.add_argument("--method", choices=["volterra", "direct", "both"], default="both")
    q.add_argument("--csv", action="store_true", help="also write the Z x X norm of V(t, s) per node")
    q.add_argument("--memory-budget", type=int, default=MEMORY_BUDGET)
    q.set_defaults(func=cmd_perturb)

    q = sub.add_parser("convergence", parents=[common], help="self-convergence table as CSV")
    q.add_argument("--refinements", help="comma-separated N:M pairs (default: N:M, N:2M, N:4M from the config)")
    q.set_defaults(func=cmd_convergence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PicardError, SuiteError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_FAILURES


if __name__ == "__main__":
    sys.exit(main())
