"""
Run artifacts: JSON summaries, plain-text manifests and CSV tables.
"""
from __future__ import annotations

import csv
import json
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, config_hash

REPORTED_PACKAGES = ("robust-mfsc", "numpy", "scipy", "scikit-learn", "cvxpy", "tqdm")


def to_builtin(obj: Any) -> Any:
    """Convert NumPy types to native Python types for JSON serialization."""
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        value = float(obj)
        return value if np.isfinite(value) else None
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return to_builtin(obj.tolist())
    if isinstance(obj, Mapping):
        return {str(key): to_builtin(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(item) for item in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(payload: Mapping[str, Any], destination: Path) -> None:
    destination.parent.mkdir(parents=True, exist_ok=True)
    with destination.open("w", encoding="utf-8") as handle:
        json.dump(to_builtin(payload), handle, indent=2)


@dataclass(slots=True)
class AcceptanceCheck:
    name: str
    passed: bool
    value: Optional[float] = None
    threshold: Optional[float] = None
    detail: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "value": self.value,
            "threshold": self.threshold,
            "detail": self.detail,
        }


@dataclass(slots=True)
class ReproductionSummary:
    seed: int
    config_hash: str
    checks: List[AcceptanceCheck] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def add(
        self,
        name: str,
        passed: bool,
        value: Optional[float] = None,
        threshold: Optional[float] = None,
        detail: str = "",
    ) -> None:
        self.checks.append(AcceptanceCheck(name, bool(passed), value, threshold, detail))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
            "metrics": self.metrics,
        }


def generate_summary(config: ExperimentConfig, seed: int) -> ReproductionSummary:
    return ReproductionSummary(seed=seed, config_hash=config_hash(config))


def write_summary(summary: ReproductionSummary, destination: Path) -> None:
    write_json(summary.to_dict(), destination)


def package_versions(names: Iterable[str] = REPORTED_PACKAGES) -> Dict[str, str]:
    versions: Dict[str, str] = {}
    for name in names:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def write_manifest(out_dir: Path, config: ExperimentConfig, seed: int, command: str = "") -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command: {command}",
        f"config_sha256: {config_hash(config)}",
        f"seed: {seed}",
        f"python: {platform.python_version()}",
    ]
    lines.extend(f"{name}: {version}" for name, version in package_versions().items())
    destination = out_dir / "manifest.txt"
    destination.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return destination


def write_matrix_csv(matrix: np.ndarray, destination: Path) -> None:
    destination.parent.mkdir(parents=True, exist_ok=True)
    with destination.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(value)) for value in row])


def write_rows_csv(rows: Sequence[Mapping[str, Any]], destination: Path, columns: Sequence[str]) -> None:
    destination.parent.mkdir(parents=True, exist_ok=True)
    with destination.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {key: repr(float(row[key])) if isinstance(row[key], float) else row[key] for key in columns}
            )


def write_series_csv(
    times: np.ndarray,
    series: Mapping[str, np.ndarray],
    destination: Path,
) -> None:
    """One ``t`` column plus ``<name>1..<name>n`` columns per trajectory."""
    destination.parent.mkdir(parents=True, exist_ok=True)
    header = ["t"]
    blocks = []
    for name, values in series.items():
        values = np.asarray(values, dtype=float).reshape(times.size, -1)
        header.extend(f"{name}{index + 1}" for index in range(values.shape[1]))
        blocks.append(values)
    table = np.hstack([times.reshape(-1, 1)] + blocks)
    with destination.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in table:
            writer.writerow([repr(float(value)) for value in row])


def write_diagnostic(out_dir: Path, exc: BaseException, context: Optional[Mapping[str, Any]] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"error: {type(exc).__name__}: {exc}"]
    phase = getattr(exc, "phase", None)
    if phase:
        lines.append(f"phase: {phase}")
    cause = getattr(exc, "cause", exc)
    for attribute in ("condition", "ranks", "step_index"):
        value = getattr(cause, attribute, None)
        if value not in (None, "", {}, -1):
            lines.append(f"{attribute}: {value}")
    trace = getattr(cause, "trace", None)
    rows = trace.to_rows() if hasattr(trace, "to_rows") else []
    if rows:
        lines.append("trace (k, j, TrP, gain_change, residual):")
        lines.extend(
            f"  {row['k']}, {row['j']}, {row['TrP']!r}, {row['gain_change']!r}, {row['residual']!r}"
            for row in rows
        )
    for key, value in (context or {}).items():
        lines.append(f"{key}: {value}")
    destination = out_dir / "diagnostic.txt"
    destination.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return destination
