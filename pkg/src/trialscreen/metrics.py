"""Scoring: per-criterion and aggregate precision/recall/F1 plus AUROC.

Conventions pinned by verifiable identities of the published benchmark
tables: any 0/0 ratio is 0, a criterion's score is the mean of its met-class
and not-met-class F1 (so an all-negative criterion scores exactly 0.5), the
macro score is the unweighted mean over the 13 criteria, and the overall
micro values average the met-class and not-met-class pooled metrics.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from trialscreen import criteria
from trialscreen.corpus import EligibilityLabel
from trialscreen.errors import CoverageError
from trialscreen.generate import Verdict


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return _ratio(2 * p * r, p + r)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _f1(self.precision, self.recall)


def auroc(pairs: Sequence[tuple[float, EligibilityLabel]]) -> tuple[float, str | None]:
    """Rank-based AUROC with ties at 0.5; returns (value, degeneracy flag).

    A single-class criterion scores 0.5 with flag "single-class"; binary
    scores are flagged "hard-label" (the value then equals balanced
    accuracy).
    """
    if not pairs:
        raise ValueError("auroc needs at least one (score, label) pair")
    pos = [s for s, y in pairs if y is EligibilityLabel.MET]
    neg = [s for s, y in pairs if y is EligibilityLabel.NOT_MET]
    if not pos or not neg:
        return 0.5, "single-class"
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    value = wins / (len(pos) * len(neg))
    flag = "hard-label" if all(s in (0.0, 1.0) for s, _ in pairs) else None
    return value, flag


def macro_of(per_criterion_scores: Sequence[float]) -> float:
    """Unweighted mean over exactly the 13 per-criterion scores."""
    if len(per_criterion_scores) != criteria.N_CRITERIA:
        raise ValueError(
            f"expected {criteria.N_CRITERIA} scores, got {len(per_criterion_scores)}"
        )
    return sum(per_criterion_scores) / criteria.N_CRITERIA


@dataclass
class CriterionMetrics:
    criterion_id: str
    met: ClassCounts
    not_met: ClassCounts
    auroc: float
    auroc_flag: str | None

    @property
    def criterion_f1(self) -> float:
        return (self.met.f1 + self.not_met.f1) / 2.0


@dataclass
class MetricsReport:
    per_criterion: dict[str, CriterionMetrics]
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    auc: float
    n_patients: int
    anomaly_count: int
    flags: list[str] = field(default_factory=list)

    def criterion_f1s(self) -> dict[str, float]:
        return {cid: m.criterion_f1 for cid, m in self.per_criterion.items()}


def score_run(
    verdicts: Iterable[Verdict],
    gold: Mapping[str, Mapping[str, EligibilityLabel]],
) -> MetricsReport:
    """Score a run against gold labels.

    ``gold`` maps patient_id -> criterion_id -> label; verdicts must cover
    that grid exactly once.
    """
    verdicts = list(verdicts)
    expected = {
        (pid, cid) for pid, labels in gold.items() for cid in labels
    }
    seen: set[tuple[str, str]] = set()
    duplicated: list[tuple[str, str]] = []
    for v in verdicts:
        key = (v.patient_id, v.criterion_id)
        if key in seen:
            duplicated.append(key)
        seen.add(key)
    missing = sorted(expected - seen)
    extra = sorted(seen - expected)
    if missing or duplicated or extra:
        raise CoverageError(
            f"verdicts do not cover gold exactly once: {len(missing)} missing, "
            f"{len(duplicated)} duplicated, {len(extra)} outside gold "
            f"(first few missing: {missing[:5]})",
            missing=missing,
            duplicated=duplicated,
        )

    by_criterion: dict[str, CriterionMetrics] = {}
    pooled_met = ClassCounts()
    pooled_notmet = ClassCounts()
    anomaly_count = sum(1 for v in verdicts if v.anomaly)
    flags: list[str] = []

    for cid in criteria.CRITERION_IDS:
        met = ClassCounts()
        notmet = ClassCounts()
        pairs: list[tuple[float, EligibilityLabel]] = []
        for v in verdicts:
            if v.criterion_id != cid:
                continue
            truth = gold[v.patient_id][cid]
            pairs.append((v.met_score, truth))
            if v.predicted is EligibilityLabel.MET:
                if truth is EligibilityLabel.MET:
                    met.tp += 1
                else:
                    met.fp += 1
                    notmet.fn += 1
            else:
                if truth is EligibilityLabel.NOT_MET:
                    notmet.tp += 1
                else:
                    notmet.fp += 1
                    met.fn += 1
        if not pairs:
            continue
        value, flag = auroc(pairs)
        by_criterion[cid] = CriterionMetrics(
            criterion_id=cid, met=met, not_met=notmet, auroc=value, auroc_flag=flag
        )
        pooled_met.tp += met.tp
        pooled_met.fp += met.fp
        pooled_met.fn += met.fn
        pooled_notmet.tp += notmet.tp
        pooled_notmet.fp += notmet.fp
        pooled_notmet.fn += notmet.fn

    macro = macro_of([by_criterion[cid].criterion_f1 for cid in by_criterion]) \
        if len(by_criterion) == criteria.N_CRITERIA else (
            sum(m.criterion_f1 for m in by_criterion.values()) / len(by_criterion)
        )
    if any(m.auroc_flag == "hard-label" for m in by_criterion.values()):
        flags.append("hard-label AUROC")
    if any(m.auroc_flag == "single-class" for m in by_criterion.values()):
        flags.append("degenerate AUROC (single-class criterion)")

    return MetricsReport(
        per_criterion=by_criterion,
        micro_precision=(pooled_met.precision + pooled_notmet.precision) / 2.0,
        micro_recall=(pooled_met.recall + pooled_notmet.recall) / 2.0,
        micro_f1=(pooled_met.f1 + pooled_notmet.f1) / 2.0,
        macro_f1=macro,
        auc=sum(m.auroc for m in by_criterion.values()) / len(by_criterion),
        n_patients=len(gold),
        anomaly_count=anomaly_count,
        flags=flags,
    )


# --------------------------------------------------------------------------
# Rendering

def report_to_dict(report: MetricsReport) -> dict:
    return {
        "per_criterion": {
            cid: {
                "p_met": m.met.precision,
                "r_met": m.met.recall,
                "f1_met": m.met.f1,
                "p_notmet": m.not_met.precision,
                "r_notmet": m.not_met.recall,
                "f1_notmet": m.not_met.f1,
                "criterion_f1": m.criterion_f1,
                "auroc": m.auroc,
                "auroc_flag": m.auroc_flag,
            }
            for cid, m in report.per_criterion.items()
        },
        "micro_precision": report.micro_precision,
        "micro_recall": report.micro_recall,
        "micro_f1": report.micro_f1,
        "macro_f1": report.macro_f1,
        "auc": report.auc,
        "n_patients": report.n_patients,
        "anomaly_count": report.anomaly_count,
        "flags": list(report.flags),
    }


def _render_markdown(report: MetricsReport, baseline: MetricsReport | None) -> str:
    buf = io.StringIO()
    buf.write("## Summary\n\n")
    buf.write("| Micro-F1 | Micro-Prec. | Micro-Rec. | Macro-F1 | AUC |\n")
    buf.write("|---|---|---|---|---|\n")
    buf.write(
        f"| {report.micro_f1:.4f} | {report.micro_precision:.4f} "
        f"| {report.micro_recall:.4f} | {report.macro_f1:.4f} "
        f"| {report.auc:.4f} |\n\n"
    )
    if report.flags:
        buf.write(f"Flags: {'; '.join(report.flags)}\n\n")
    buf.write(
        f"Patients: {report.n_patients}, anomalies: {report.anomaly_count}\n\n"
    )
    buf.write("## Per criterion\n\n")
    if baseline is None:
        buf.write("| Criterion | F1 | AUROC |\n|---|---|---|\n")
        for cid, m in report.per_criterion.items():
            buf.write(f"| {cid} | {m.criterion_f1:.4f} | {m.auroc:.4f} |\n")
    else:
        buf.write("| Criterion | F1 | Baseline F1 | Delta | AUROC |\n")
        buf.write("|---|---|---|---|---|\n")
        for cid, m in report.per_criterion.items():
            base = baseline.per_criterion[cid].criterion_f1
            buf.write(
                f"| {cid} | {m.criterion_f1:.4f} | {base:.4f} "
                f"| {m.criterion_f1 - base:+.4f} | {m.auroc:.4f} |\n"
            )
    return buf.getvalue()


def _render_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    buf.write(
        "criterion,p_met,r_met,f1_met,p_notmet,r_notmet,f1_notmet,"
        "criterion_f1,auroc\n"
    )
    for cid, m in report.per_criterion.items():
        buf.write(
            f"{cid},{m.met.precision:.4f},{m.met.recall:.4f},{m.met.f1:.4f},"
            f"{m.not_met.precision:.4f},{m.not_met.recall:.4f},"
            f"{m.not_met.f1:.4f},{m.criterion_f1:.4f},{m.auroc:.4f}\n"
        )
    buf.write(
        f"OVERALL,{report.micro_precision:.4f},{report.micro_recall:.4f},"
        f"{report.micro_f1:.4f},,,,{report.macro_f1:.4f},{report.auc:.4f}\n"
    )
    return buf.getvalue()


def render_report(
    report: MetricsReport,
    format: str,
    baseline: MetricsReport | None = None,
) -> str:
    """Render a report as markdown, csv, or json (lossless)."""
    if format == "markdown":
        return _render_markdown(report, baseline)
    if format == "csv":
        return _render_csv(report)
    if format == "json":
        return json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format: {format!r}")
