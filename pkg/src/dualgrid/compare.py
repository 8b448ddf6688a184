"""Field-by-field comparison of two run directories.

Compares the deterministic outputs (diagnostics, probes, series, field
snapshots, final particles) and reports the maximum absolute difference per
file.  Tolerance 0 demands exact (bitwise) equality, which is the contract
between runs of the same scenario at different rank counts or exchange
strategies under the deterministic backend.  Wall-time metrics are not
compared; the probe 'owner' column is skipped because ownership depends on
the partitioning by construction.
"""

import csv
import json
from pathlib import Path

from .fieldio import load_particles, read_field

__all__ = ["compare_runs", "CompareReport"]

SKIP_COLUMNS = {"owner"}


class CompareReport:
    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.entries = []  # (name, max_diff, detail)
        self.errors = []

    def add(self, name, diff, detail=""):
        self.entries.append((name, diff, detail))

    @property
    def max_diff(self):
        return max((d for _, d, _ in self.entries), default=0.0)

    @property
    def ok(self):
        return not self.errors and self.max_diff <= self.tolerance

    def render(self):
        lines = []
        for name, diff, detail in self.entries:
            mark = "ok" if diff <= self.tolerance else "FAIL"
            suffix = f" ({detail})" if detail else ""
            lines.append(f"{mark:4s} {name}: max |diff| = {diff:.3e}{suffix}")
        for err in self.errors:
            lines.append(f"FAIL {err}")
        lines.append(f"result: {'PASS' if self.ok else 'FAIL'} at tolerance {self.tolerance}")
        return "\n".join(lines)


def _read_csv(path):
    with open(path) as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return reader.fieldnames or [], rows


def _compare_csv(report, rel, pa, pb):
    cols_a, rows_a = _read_csv(pa)
    cols_b, rows_b = _read_csv(pb)
    if cols_a != cols_b or len(rows_a) != len(rows_b):
        report.errors.append(
            f"{rel}: shape mismatch ({len(rows_a)}x{len(cols_a)} vs {len(rows_b)}x{len(cols_b)})")
        return
    worst = 0.0
    for ra, rb in zip(rows_a, rows_b):
        for col in cols_a:
            if col in SKIP_COLUMNS:
                continue
            va, vb = ra[col], rb[col]
            try:
                diff = abs(float(va) - float(vb))
            except ValueError:
                diff = 0.0 if va == vb else float("inf")
            worst = max(worst, diff)
    report.add(rel, worst)


def compare_runs(dir_a, dir_b, tolerance=0.0):
    """Compare two run directories; raises on mismatched scenarios."""
    dir_a = Path(dir_a)
    dir_b = Path(dir_b)
    with open(dir_a / "manifest.json") as fh:
        man_a = json.load(fh)
    with open(dir_b / "manifest.json") as fh:
        man_b = json.load(fh)
    if man_a["scenario_hash"] != man_b["scenario_hash"]:
        raise ValueError(
            "runs come from different scenarios: "
            f"{man_a['scenario_hash'][:12]} vs {man_b['scenario_hash'][:12]}")

    report = CompareReport(tolerance)

    for rel in ["diagnostics.csv"]:
        _compare_csv(report, rel, dir_a / rel, dir_b / rel)

    for sub in ("series", "probes"):
        names_a = sorted(p.name for p in (dir_a / sub).glob("*.csv"))
        names_b = sorted(p.name for p in (dir_b / sub).glob("*.csv"))
        if names_a != names_b:
            report.errors.append(f"{sub}/: file sets differ ({names_a} vs {names_b})")
            continue
        for name in names_a:
            _compare_csv(report, f"{sub}/{name}", dir_a / sub / name, dir_b / sub / name)

    bins_a = sorted(p.name for p in (dir_a / "fields").glob("*.bin"))
    bins_b = sorted(p.name for p in (dir_b / "fields").glob("*.bin"))
    if bins_a != bins_b:
        report.errors.append(f"fields/: file sets differ ({bins_a} vs {bins_b})")
    else:
        for name in bins_a:
            meta_a, arr_a = read_field(dir_a / "fields" / name)
            meta_b, arr_b = read_field(dir_b / "fields" / name)
            if meta_a["dims"] != meta_b["dims"] or arr_a.shape != arr_b.shape:
                report.errors.append(f"fields/{name}: shape mismatch")
                continue
            diff = float(abs(arr_a - arr_b).max()) if arr_a.size else 0.0
            report.add(f"fields/{name}", diff)

    pa = dir_a / "particles_final.txt"
    pb = dir_b / "particles_final.txt"
    if pa.exists() and pb.exists():
        sa = load_particles(pa)
        sb = load_particles(pb)
        if sa.n != sb.n or (sa.n and (sa.ids != sb.ids).any()):
            report.errors.append("particles_final.txt: particle id sets differ")
        elif sa.n:
            diff = max(
                float(abs(sa.x - sb.x).max()), float(abs(sa.v - sb.v).max()),
                float(abs(sa.r - sb.r).max()), float(abs(sa.rho - sb.rho).max()))
            report.add("particles_final.txt", diff)
        else:
            report.add("particles_final.txt", 0.0)

    return report
