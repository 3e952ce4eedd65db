"""Named residual checks with tolerances and verdicts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CheckEntry:
    residual: float
    tolerance: float | None
    passed: bool
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "residual": self.residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "notes": self.notes,
        }


@dataclass
class InvariantReport:
    """Ordered map ``check name -> CheckEntry`` plus run metadata.

    A ``tolerance`` of ``None`` marks a measured-only entry (continuity
    moduli, structural facts); those always pass and say why in ``notes``.
    """

    entries: dict[str, CheckEntry] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, name: str, residual: float, tolerance: float | None, notes: str = "") -> CheckEntry:
        residual = float(residual)
        if not math.isfinite(residual):
            # a non-finite residual can never certify anything
            entry = CheckEntry(residual, tolerance, False, (notes + "; non-finite residual").lstrip("; "))
        elif tolerance is None:
            entry = CheckEntry(residual, None, True, notes)
        else:
            entry = CheckEntry(residual, float(tolerance), residual <= tolerance, notes)
        self.entries[name] = entry
        return entry

    def measured(self, name: str, value: float, notes: str) -> CheckEntry:
        return self.add(name, value, None, notes)

    def structural(self, name: str, notes: str) -> CheckEntry:
        return self.add(name, 0.0, None, notes)

    def merge(self, other: "InvariantReport", prefix: str = "") -> "InvariantReport":
        for name, entry in other.entries.items():
            self.entries[prefix + name] = entry
        return self

    def __getitem__(self, name: str) -> CheckEntry:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.entries.items() if not e.passed]

    @property
    def all_passed(self) -> bool:
        return not self.failures

    def checks_dict(self) -> dict:
        return {k: e.to_dict() for k, e in self.entries.items()}

    def to_dict(self) -> dict:
        return {"meta": dict(self.meta), "checks": self.checks_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)
