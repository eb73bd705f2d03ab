"""Per-domain AUC, per-section pAUC and their harmonic mean (the official score).

AUC and pAUC count strictly ordered (normal, anomaly) pairs: a tie scores 0.
The pAUC keeps the floor(p * N) highest-scoring normals of the section,
which is the FPR in [0, p] operating region, against every anomaly of the
section.
"""
from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import TruthRow
from .scoring import read_score_csv, score_csv_name


class EvaluationError(ValueError):
    pass


def _as_scores(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        raise EvaluationError("scores must be finite")
    return arr


def count_ordered_pairs(normals, anomalies) -> int:
    """Number of (normal, anomaly) pairs with anomaly score strictly above normal score."""
    normals = np.sort(_as_scores(normals))
    anomalies = _as_scores(anomalies)
    return int(np.searchsorted(normals, anomalies, side="left").sum())


def auc_domain(normals: Sequence[float], anomalies: Sequence[float]) -> float:
    n_neg, n_pos = len(normals), len(anomalies)
    if not n_neg or not n_pos:
        raise EvaluationError("AUC needs at least one normal and one anomalous score")
    return count_ordered_pairs(normals, anomalies) / (n_neg * n_pos)


def n_hard_normals(n_normals: int, p: float) -> int:
    # exact decimal floor so that e.g. p=0.29, N=100 gives 29, not 28
    return math.floor(Fraction(repr(float(p))) * n_normals)


def top_normals(normals: Sequence[float], p: float, names: Sequence[str] | None = None) -> np.ndarray:
    """The floor(p*N) highest normal scores; ties broken by ascending name."""
    scores = _as_scores(normals)
    k = n_hard_normals(scores.size, p)
    if k < 1:
        raise EvaluationError("too few normal clips for p")
    keys = names if names is not None else [""] * scores.size
    order = sorted(range(scores.size), key=lambda i: (-scores[i], keys[i]))
    return scores[order[:k]]


def pauc_section(normals: Sequence[float], anomalies: Sequence[float], p: float = 0.1,
                 names: Sequence[str] | None = None) -> float:
    if not 0 < p <= 1:
        raise EvaluationError("p must lie in (0, 1]")
    if not len(anomalies):
        raise EvaluationError("pAUC needs at least one anomalous score")
    hard = top_normals(normals, p, names)
    return count_ordered_pairs(hard, anomalies) / (hard.size * len(anomalies))


def harmonic_mean(values: Iterable[float]) -> float:
    values = [float(v) for v in values]
    if not values:
        raise EvaluationError("harmonic mean of no values")
    if any(not v > 0 for v in values):
        raise EvaluationError(f"harmonic mean undefined for non-positive values: {min(values)}")
    return len(values) / math.fsum(1.0 / v for v in values)


@dataclass(frozen=True)
class SectionResult:
    machine: str
    section: str
    auc_source: float
    auc_target: float
    pauc: float

    def values(self) -> tuple[float, float, float]:
        return self.auc_source, self.auc_target, self.pauc


@dataclass
class EvaluationReport:
    sections: list[SectionResult]
    official_score: float
    p: float = 0.1


def official_score(results: Sequence[SectionResult] | Mapping[tuple[str, str], Sequence[float]]) -> float:
    """Harmonic mean over the flat multiset {AUC_source, AUC_target, pAUC} of every section."""
    if isinstance(results, Mapping):
        cells = list(results.items())
    else:
        cells = [((r.machine, r.section), r.values()) for r in results]
    if not cells:
        raise EvaluationError("no sections to score")
    flat: list[float] = []
    missing = []
    for key, vals in cells:
        vals = list(vals)
        if len(vals) != 3 or any(v is None or not np.isfinite(v) for v in vals):
            missing.append(f"{key[0]}/section_{key[1]}")
            continue
        flat += vals
    if missing:
        raise EvaluationError(f"incomplete grid cells: {', '.join(missing)}")
    return harmonic_mean(flat)


@dataclass
class LabeledScoreSet:
    normals: dict[str, list[tuple[str, float]]] = field(default_factory=lambda: {"source": [], "target": []})
    anomalies: list[tuple[str, float]] = field(default_factory=list)

    def evaluate(self, machine: str, section: str, p: float) -> SectionResult:
        anomaly_scores = [s for _, s in self.anomalies]
        aucs = {}
        for domain in ("source", "target"):
            if not self.normals[domain]:
                raise EvaluationError(f"{machine}/section_{section}: no {domain} normals")
            aucs[domain] = auc_domain([s for _, s in self.normals[domain]], anomaly_scores)
        pooled = sorted(self.normals["source"] + self.normals["target"])
        pauc = pauc_section([s for _, s in pooled], anomaly_scores, p, [n for n, _ in pooled])
        return SectionResult(machine, section, aucs["source"], aucs["target"], pauc)


def evaluate(truth: Sequence[TruthRow], scores: Mapping[str, float], p: float = 0.1) -> EvaluationReport:
    """Score every (machine, section) of the ground truth.

    ``scores`` is keyed by the same ``machine/test/name.wav`` paths as the
    ground truth; missing, extra or duplicated entries are errors.
    """
    truth_names = [r.filename for r in truth]
    dupes = sorted(n for n, c in Counter(truth_names).items() if c > 1)
    if dupes:
        raise EvaluationError(f"duplicate ground-truth rows: {', '.join(dupes)}")
    missing = sorted(set(truth_names) - set(scores))
    extra = sorted(set(scores) - set(truth_names))
    if missing or extra:
        raise EvaluationError(f"score/ground-truth mismatch; missing: {missing[:10]} extra: {extra[:10]}"
                              f" ({len(missing)} missing, {len(extra)} extra)")
    groups: dict[tuple[str, str], LabeledScoreSet] = defaultdict(LabeledScoreSet)
    for row in truth:
        entry = (row.filename, scores[row.filename])
        cell = groups[(row.machine, row.section)]
        if row.condition == "anomaly":
            cell.anomalies.append(entry)
        else:
            cell.normals[row.domain].append(entry)
    results = [groups[key].evaluate(*key, p) for key in sorted(groups)]
    return EvaluationReport(results, official_score(results), p)


def collect_scores(score_dir: str | Path, machines: Iterable[tuple[str, str]]) -> dict[str, float]:
    """Read submission-style score CSVs into a ``machine/test/name`` keyed map."""
    out: dict[str, float] = {}
    for machine, section in machines:
        path = Path(score_dir) / score_csv_name(machine, section)
        if not path.exists():
            raise EvaluationError(f"missing score file {path}")
        for name, score in read_score_csv(path):
            key = f"{machine}/test/{name}"
            if key in out:
                raise EvaluationError(f"duplicate score row for {key}")
            out[key] = score
    return out


# -- output ----------------------------------------------------------------

REPORT_HEADER = ["machine", "section", "auc_source", "auc_target", "pauc"]


def write_report_csv(path: str | Path, report: EvaluationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.sections:
            w.writerow([r.machine, r.section] + [repr(v) for v in r.values()])
        w.writerow(["official_score", "", repr(report.official_score), "", ""])


def read_report_csv(path: str | Path, p: float = 0.1) -> EvaluationReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != REPORT_HEADER:
        raise EvaluationError(f"{path}: bad report header")
    sections, omega = [], None
    for row in rows[1:]:
        if row and row[0] == "official_score":
            omega = float(row[2])
        elif row:
            sections.append(SectionResult(row[0], row[1], float(row[2]), float(row[3]), float(row[4])))
    if omega is None:
        raise EvaluationError(f"{path}: no official_score row")
    return EvaluationReport(sections, omega, p)


def _pct(values: Sequence[float]) -> str:
    arr = 100.0 * np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return f"{arr[0]:.2f}"
    return f"{arr.mean():.2f} ± {arr.std():.2f}"


def render_report(reports: EvaluationReport | Sequence[EvaluationReport], title: str = "") -> str:
    """Text table: machine, section, AUC source/target, pAUC in percent.

    Several reports (independent trials) collapse to mean ± population std.
    """
    if isinstance(reports, EvaluationReport):
        reports = [reports]
    if not reports:
        raise EvaluationError("no reports to render")
    keys = [(r.machine, r.section) for r in reports[0].sections]
    for rep in reports[1:]:
        if [(r.machine, r.section) for r in rep.sections] != keys:
            raise EvaluationError("trial reports cover different sections")
    rows = [["Machine type", "Section", "AUC source [%]", "AUC target [%]", "pAUC [%]"]]
    for i, (machine, section) in enumerate(keys):
        cells = [rep.sections[i].values() for rep in reports]
        rows.append([machine, section] + [_pct([c[j] for c in cells]) for j in range(3)])
    widths = [max(len(row[j]) for row in rows) for j in range(5)]
    line = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()  # noqa: E731
    out = [title] if title else []
    out.append(line(rows[0]))
    out.append("-" * len(line(rows[0])))
    out += [line(row) for row in rows[1:]]
    out.append("")
    out.append(f"official score [%]: {_pct([rep.official_score for rep in reports])}"
               f"  (p = {reports[0].p}, {len(reports)} trial{'s' if len(reports) > 1 else ''})")
    return "\n".join(out) + "\n"


def aggregate_reports(reports: Sequence[EvaluationReport]) -> list[dict]:
    """Per-cell mean and population std across trials (std None for a single trial)."""
    out = []
    for i, base in enumerate(reports[0].sections):
        cells = np.array([rep.sections[i].values() for rep in reports])
        entry = {"machine": base.machine, "section": base.section}
        for j, name in enumerate(REPORT_HEADER[2:]):
            entry[name] = float(cells[:, j].mean())
            entry[name + "_std"] = float(cells[:, j].std()) if len(reports) > 1 else None
        out.append(entry)
    return out
