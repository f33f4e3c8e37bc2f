"""Verification report: per-check records, summaries, canonical bytes.

A check passes iff its residual does not exceed its tolerance; stochastic
checks fold their 3-sigma allowance into the recorded tolerance, so the
invariant holds uniformly.  The canonical serialisation drops wall-clock
fields and is byte-identical across reruns with the same configuration
and seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError

REPORT_SCHEMA = "semilab-report/1"


@dataclass(frozen=True)
class CheckResult:
    identity: str
    statement: str
    residual: float
    tolerance: float
    seed: int
    stderr: float | None = None
    runtime_ms: float = 0.0
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "residual", float(self.residual))
        object.__setattr__(self, "tolerance", float(self.tolerance))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "runtime_ms", float(self.runtime_ms))
        if self.stderr is not None:
            object.__setattr__(self, "stderr", float(self.stderr))

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tolerance)

    def to_dict(self, with_runtime: bool = True) -> dict:
        out = {
            "identity": self.identity,
            "statement": self.statement,
            "residual": self.residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "stderr": self.stderr,
            "seed": self.seed,
            "details": _plain(self.details),
        }
        if with_runtime:
            out["runtime_ms"] = self.runtime_ms
        return out


def _plain(obj):
    """Recursively convert numpy scalars/arrays for JSON round-trips."""
    import numpy as np
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass
class VerificationReport:
    config: dict
    checks: list
    seed: int

    @property
    def summary(self) -> dict:
        passed = sum(1 for c in self.checks if c.passed)
        return {"total": len(self.checks), "passed": passed,
                "failed": len(self.checks) - passed}

    @property
    def all_passed(self) -> bool:
        return self.summary["failed"] == 0

    def _config_echo(self) -> dict:
        echo = json.loads(json.dumps(self.config))
        echo.get("run", {}).pop("threads", None)  # execution detail
        return echo

    def to_dict(self, with_runtime: bool = True) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "seed": self.seed,
            "config": self._config_echo(),
            "checks": [c.to_dict(with_runtime) for c in self.checks],
            "summary": self.summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(True), indent=1, sort_keys=True)

    def canonical_json(self) -> str:
        """Deterministic serialisation: identical bytes for identical
        (config, seed) runs; wall-clock timings are excluded."""
        return json.dumps(self.to_dict(False), indent=1, sort_keys=True)

    def text_summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            se = f" stderr={c.stderr:.3e}" if c.stderr is not None else ""
            lines.append(f"{status} {c.identity}: residual={c.residual:.6e} "
                         f"tolerance={c.tolerance:.6e}{se} "
                         f"[{c.runtime_ms:.0f} ms]")
        s = self.summary
        lines.append(f"{s['passed']}/{s['total']} checks passed")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "VerificationReport":
        if doc.get("schema") != REPORT_SCHEMA:
            raise InputError(f"not a report document: schema {doc.get('schema')!r}")
        checks = []
        for c in doc.get("checks", []):
            checks.append(CheckResult(
                identity=c["identity"], statement=c.get("statement", ""),
                residual=float(c["residual"]), tolerance=float(c["tolerance"]),
                seed=int(c.get("seed", 0)), stderr=c.get("stderr"),
                runtime_ms=float(c.get("runtime_ms", 0.0)),
                details=c.get("details", {})))
        return cls(config=doc.get("config", {}), checks=checks,
                   seed=int(doc.get("seed", 0)))


def write_report_files(report: VerificationReport, outdir) -> list:
    """Write report.json, report.canonical.json and report.txt."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    full = outdir / "report.json"
    full.write_text(report.to_json() + "\n")
    paths.append(full)
    canonical = outdir / "report.canonical.json"
    canonical.write_text(report.canonical_json() + "\n")
    paths.append(canonical)
    text = outdir / "report.txt"
    text.write_text(report.text_summary())
    paths.append(text)
    return paths


def read_report(path) -> VerificationReport:
    with open(path) as fh:
        return VerificationReport.from_dict(json.load(fh))


def write_manifest(outdir, paths) -> Path:
    """Record every artifact with its content hash."""
    outdir = Path(outdir)
    records = []
    for p in sorted(Path(p) for p in paths):
        data = p.read_bytes()
        records.append({
            "path": p.relative_to(outdir).as_posix(),
            "sha256": hashlib.sha256(data).hexdigest(),
            "bytes": len(data),
        })
    manifest = outdir / "manifest.json"
    manifest.write_text(json.dumps({"artifacts": records}, indent=1) + "\n")
    return manifest
