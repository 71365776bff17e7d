"""Verified constant tables the tests and docs rely on.

Fixture files are pinned by sha256; verify_fixtures() recomputes every
arithmetic identity the tables must satisfy (macro averages, count totals,
min/mean/max ordering) so a silently edited fixture fails loudly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

from trialscreen import criteria
from trialscreen.errors import SchemaError

# Regenerate deliberately (tests print the new digest) if a fixture changes.
FIXTURE_SHA256 = {
    "table1_label_distribution.csv":
        "b7d3f70995c9b0b37bf12af7f70f71324509c6639226487970a49c39b72133b2",
    "table2_token_stats.csv":
        "180e85be7284eb1ea330075afae96addcb15eb3e7d68519372560ef9d3620cdd",
    "table4_per_criterion_f1.csv":
        "387f235b5625684f69ceb5d21dda11762e551588cf151a701b7a02532f8444de",
    "golden_synth_seed7_n20.json": None,  # filled by the build, see below
    "golden_synth_seed7_n20.manifest.json": None,
}

MACRO_ANCHOR_RAG_TOP10 = 0.7896
MACRO_ANCHOR_NER_512 = 0.4859
TOTAL_PATIENTS = 288


def _fixture_bytes(name: str) -> bytes:
    data = resources.files("trialscreen.data.fixtures").joinpath(name).read_bytes()
    want = FIXTURE_SHA256.get(name)
    if want is not None:
        got = hashlib.sha256(data).hexdigest()
        if got != want:
            raise SchemaError(
                f"fixture {name} checksum mismatch: got {got}, expected {want}"
            )
    return data


def _read_csv(name: str) -> list[list[str]]:
    rows = []
    for line in _fixture_bytes(name).decode("utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        rows.append(line.split(","))
    return rows


def load_label_distribution() -> list[tuple[str, int, int]]:
    """(criterion, met, not_met) rows of the benchmark label counts."""
    rows = _read_csv("table1_label_distribution.csv")
    assert rows[0] == ["criterion", "met", "not_met"]
    return [(cid, int(met), int(notmet)) for cid, met, notmet in rows[1:]]


def load_token_stats_table() -> dict[str, dict]:
    """Benchmark token-size table keyed by input type."""
    rows = _read_csv("table2_token_stats.csv")
    assert rows[0] == ["input_type", "mean", "min", "max", "applied_token_limits"]
    out = {}
    for input_type, mean, mn, mx, limits in rows[1:]:
        out[input_type] = {
            "mean": float(mean),
            "min": float(mn),
            "max": float(mx),
            "applied_token_limits": tuple(int(x) for x in limits.split("/")),
        }
    return out


def load_per_criterion_f1() -> tuple[dict[str, dict[str, float]], dict[str, float]]:
    """Benchmark per-criterion F1 columns plus their printed macro row."""
    rows = _read_csv("table4_per_criterion_f1.csv")
    header = rows[0]
    assert header[0] == "criterion"
    columns = header[1:]
    per_criterion: dict[str, dict[str, float]] = {}
    macro_row: dict[str, float] = {}
    for row in rows[1:]:
        values = {col: float(v) for col, v in zip(columns, row[1:])}
        if row[0] == "macro_avg":
            macro_row = values
        else:
            per_criterion[row[0]] = values
    return per_criterion, macro_row


def golden_synthetic_paths() -> tuple[str, str]:
    base = resources.files("trialscreen.data.fixtures")
    return (
        str(base.joinpath("golden_synth_seed7_n20.json")),
        str(base.joinpath("golden_synth_seed7_n20.manifest.json")),
    )


@dataclass
class FixtureReport:
    checks: list[tuple[str, bool, str]] = field(default_factory=list)

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, ok, detail))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def render(self) -> str:
        lines = []
        for name, ok, detail in self.checks:
            status = "PASS" if ok else "FAIL"
            lines.append(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'}  overall "
            f"({len(self.checks)} checks)"
        )
        return "\n".join(lines)


def verify_fixtures() -> FixtureReport:
    """Recompute every derivable identity in the shipped fixtures."""
    report = FixtureReport()

    dist = load_label_distribution()
    ids = [cid for cid, _, _ in dist]
    report.add(
        "label-distribution covers the 13 criteria",
        tuple(ids) == criteria.CRITERION_IDS,
    )
    for cid, met, notmet in dist:
        report.add(
            f"label counts sum to {TOTAL_PATIENTS} for {cid}",
            met + notmet == TOTAL_PATIENTS,
            f"{met}+{notmet}",
        )

    token_stats = load_token_stats_table()
    for input_type, row in sorted(token_stats.items()):
        report.add(
            f"token stats ordered for {input_type}",
            row["min"] <= row["mean"] <= row["max"],
            f"{row['min']} <= {row['mean']} <= {row['max']}",
        )

    per_criterion, macro_row = load_per_criterion_f1()
    report.add(
        "per-criterion F1 covers the 13 criteria",
        set(per_criterion) == set(criteria.CRITERION_IDS),
    )
    for column, anchor in sorted(macro_row.items()):
        values = [per_criterion[cid][column] for cid in criteria.CRITERION_IDS]
        mean = sum(values) / len(values)
        report.add(
            f"macro average identity for column {column}",
            abs(mean - anchor) <= 1e-4 + 5e-5,
            f"mean={mean:.5f} printed={anchor}",
        )
    for cid, row in sorted(per_criterion.items()):
        delta = row["rag_top10"] - row["ner_512"]
        report.add(
            f"delta column identity for {cid}",
            abs(delta - row["delta_rag_vs_ner512"]) <= 1e-4 + 5e-5,
            f"computed={delta:.4f} printed={row['delta_rag_vs_ner512']}",
        )
    report.add(
        "macro anchor rag-top10",
        abs(macro_row["rag_top10"] - MACRO_ANCHOR_RAG_TOP10) < 1e-12,
    )
    report.add(
        "macro anchor ner-512",
        abs(macro_row["ner_512"] - MACRO_ANCHOR_NER_512) < 1e-12,
    )
    return report
