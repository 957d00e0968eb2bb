"""Recompute every reported metric from the emitted CSVs and check the manifest.

Usage: ``python -m mortensen.harness.audit OUT_DIR``
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .report import RunReport, apply_recipe, read_table, verify_manifest


@dataclass
class AuditResult:
    checked: int = 0
    mismatches: list[str] = field(default_factory=list)
    tampered: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.mismatches and not self.tampered


def _same(a: float, b: float) -> bool:
    if math.isnan(a) or math.isnan(b):
        return math.isnan(a) and math.isnan(b)
    return a == b or math.isclose(a, b, rel_tol=1e-12, abs_tol=0.0)


def audit(out) -> AuditResult:
    out = Path(out)
    report = RunReport.read(out)
    res = AuditResult(tampered=verify_manifest(out))
    tables: dict[str, dict] = {}
    for m in report.metrics:
        name = m.recipe["file"]
        if name not in tables:
            path = out / name
            if not path.exists():
                res.mismatches.append(f"{m.name}: source {name} missing")
                continue
            tables[name] = read_table(path)
        value = apply_recipe(tables[name], m.recipe)
        res.checked += 1
        if not _same(value, m.value):
            res.mismatches.append(f"{m.name}: reported {m.value!r}, recomputed {value!r}")
    return res


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m mortensen.harness.audit OUT_DIR", file=sys.stderr)
        return 2
    res = audit(argv[0])
    for line in res.mismatches:
        print("mismatch:", line)
    for name in res.tampered:
        print("hash differs:", name)
    print(f"audit: {res.checked} metrics recomputed, {'OK' if res.ok else 'FAILED'}")
    return 0 if res.ok else 1


if __name__ == "__main__":
    sys.exit(main())
