"""Patient corpus ingestion, splits, statistics, and synthetic corpora.

Supports the cohort-selection XML layout (one file per patient, notes
concatenated in a TEXT element, labels in a TAGS element) plus a JSON
fallback so the pipeline is usable without access-restricted data. The
synthetic generator plants criterion evidence at known positions, which is
what the retrieval and oracle test suites key on.
"""

from __future__ import annotations

import datetime as dt
import enum
import io
import json
import random
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from trialscreen import criteria
from trialscreen.chunking import count_tokens
from trialscreen.errors import FormatError, SchemaError, ValidationError


class EligibilityLabel(enum.Enum):
    MET = "met"
    NOT_MET = "not met"

    @classmethod
    def parse(cls, raw: str) -> "EligibilityLabel":
        value = raw.strip().lower()
        for label in cls:
            if label.value == value:
                return label
        raise SchemaError(f"unknown eligibility label: {raw!r}")


@dataclass(frozen=True)
class NoteDocument:
    note_index: int
    record_date: dt.date | None
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("note text is empty after whitespace trim")


@dataclass(frozen=True)
class PatientRecord:
    """One patient: ordered notes plus optional gold labels.

    Immutable after construction; safe to share across workers.
    ``partition`` records the source subdirectory ("train"/"test") when the
    corpus carries the official partition.
    """

    patient_id: str
    notes: tuple[NoteDocument, ...]
    labels: dict[str, EligibilityLabel] | None = None
    partition: str | None = None

    def __post_init__(self):
        if not self.notes:
            raise ValidationError(f"patient {self.patient_id}: no notes")
        for pos, note in enumerate(self.notes):
            if note.note_index != pos:
                raise ValidationError(
                    f"patient {self.patient_id}: note_index {note.note_index} "
                    f"at position {pos}"
                )
        if self.labels is not None:
            got = set(self.labels)
            want = set(criteria.CRITERION_IDS)
            if got != want:
                raise SchemaError(
                    f"patient {self.patient_id}: labels cover {sorted(got)}, "
                    f"expected all 13 criteria"
                )
        if self.partition not in (None, "train", "test"):
            raise ValidationError(
                f"patient {self.patient_id}: bad partition {self.partition!r}"
            )


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class TokenStats:
    input_type: str  # "original" | "ner-problem" | "rag-top10"
    mean: float
    min: float
    max: float
    n_patients: int

    def __post_init__(self):
        if self.n_patients <= 0:
            raise ValidationError("token stats need at least one patient")
        if not (self.min <= self.mean <= self.max):
            raise ValidationError(
                f"inconsistent stats: min={self.min} mean={self.mean} max={self.max}"
            )


# --------------------------------------------------------------------------
# XML ingestion

_SEPARATOR_RE = re.compile(r"(?m)^\*{20,}[ \t]*\r?$\n?")
_DATE_FORMATS = ("%m/%d/%Y", "%m/%d/%y")


def _parse_record_date(segment: str) -> dt.date | None:
    for line in segment.splitlines():
        if not line.strip():
            continue
        if not line.startswith("Record date:"):
            return None
        raw = line[len("Record date:"):].strip()
        try:
            return dt.date.fromisoformat(raw)
        except ValueError:
            pass
        for fmt in _DATE_FORMATS:
            try:
                return dt.datetime.strptime(raw, fmt).date()
            except ValueError:
                pass
        return None
    return None


def split_notes(text: str) -> list[str]:
    """Split concatenated note text at separator lines of 20+ asterisks.

    Returns the raw segments (bytes preserved) with blank segments dropped.
    """
    segments = []
    pos = 0
    for m in _SEPARATOR_RE.finditer(text):
        segments.append(text[pos : m.start()])
        pos = m.end()
    segments.append(text[pos:])
    return [seg for seg in segments if seg.strip()]


def _byte_offset(data: bytes, line: int, column: int) -> int:
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[: line - 1]) + column


def parse_patient_xml(data: bytes, patient_id: str) -> PatientRecord:
    """Parse one patient XML document (TEXT + TAGS elements)."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        raise FormatError(
            f"patient {patient_id}: malformed XML at byte offset "
            f"{_byte_offset(data, line, column)} (line {line}, column {column})"
        ) from exc

    text_el = root.find("TEXT")
    tags_el = root.find("TAGS")
    if text_el is None or tags_el is None:
        raise SchemaError(f"patient {patient_id}: missing TEXT or TAGS element")

    labels: dict[str, EligibilityLabel] = {}
    for tag in tags_el:
        cid = tag.tag
        if cid not in criteria.CRITERION_IDS:
            raise SchemaError(f"patient {patient_id}: unknown criterion tag {cid!r}")
        if cid in labels:
            raise SchemaError(f"patient {patient_id}: duplicate criterion tag {cid}")
        met = tag.get("met")
        if met is None:
            raise SchemaError(f"patient {patient_id}: {cid} tag lacks met attribute")
        try:
            labels[cid] = EligibilityLabel.parse(met)
        except SchemaError:
            raise SchemaError(
                f"patient {patient_id}: {cid} has unknown met value {met!r}"
            ) from None
    missing = [cid for cid in criteria.CRITERION_IDS if cid not in labels]
    if missing:
        raise SchemaError(f"patient {patient_id}: missing criterion tag {missing[0]}")

    segments = split_notes(text_el.text or "")
    if not segments:
        raise SchemaError(f"patient {patient_id}: TEXT holds no notes")
    notes = tuple(
        NoteDocument(note_index=i, record_date=_parse_record_date(seg), text=seg)
        for i, seg in enumerate(segments)
    )
    return PatientRecord(patient_id=patient_id, notes=notes, labels=labels)


# --------------------------------------------------------------------------
# JSON fallback format

def record_to_json_dict(record: PatientRecord) -> dict:
    out: dict = {
        "id": record.patient_id,
        "notes": [
            {
                "date": n.record_date.isoformat() if n.record_date else None,
                "text": n.text,
            }
            for n in record.notes
        ],
    }
    if record.labels is not None:
        out["labels"] = {
            cid: record.labels[cid].value for cid in criteria.CRITERION_IDS
        }
    if record.partition is not None:
        out["partition"] = record.partition
    return out


def record_from_json_dict(obj: dict) -> PatientRecord:
    try:
        patient_id = obj["id"]
        raw_notes = obj["notes"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"patient object lacks required field: {exc}") from exc
    notes = []
    for i, raw in enumerate(raw_notes):
        date = None
        if raw.get("date"):
            try:
                date = dt.date.fromisoformat(raw["date"])
            except ValueError as exc:
                raise FormatError(
                    f"patient {patient_id}: bad note date {raw['date']!r}"
                ) from exc
        notes.append(NoteDocument(note_index=i, record_date=date, text=raw["text"]))
    labels = None
    if obj.get("labels") is not None:
        labels = {
            cid: EligibilityLabel.parse(value)
            for cid, value in obj["labels"].items()
        }
    return PatientRecord(
        patient_id=patient_id,
        notes=tuple(notes),
        labels=labels,
        partition=obj.get("partition"),
    )


def load_corpus_json(path) -> list[PatientRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise FormatError(f"{path}: bad JSON: {exc}") from exc
    if not isinstance(doc, dict) or "patients" not in doc:
        raise FormatError(f"{path}: expected an object with a 'patients' list")
    return [record_from_json_dict(obj) for obj in doc["patients"]]


def save_corpus_json(records: Sequence[PatientRecord], path) -> None:
    doc = {"patients": [record_to_json_dict(r) for r in records]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(path) -> list[PatientRecord]:
    """Load a corpus from an XML directory or a JSON fallback file.

    XML directories may carry the official partition as train/ and test/
    subdirectories. Records come back sorted by patient id.
    """
    path = Path(path)
    if path.is_file():
        if path.suffix.lower() != ".json":
            raise FormatError(f"{path}: single-file corpora must be .json")
        records = load_corpus_json(path)
    elif path.is_dir():
        json_files = list(path.rglob("*.json"))
        xml_files = list(path.rglob("*.xml"))
        if json_files and xml_files:
            raise FormatError(
                f"{path}: mixed corpus formats ({len(xml_files)} xml, "
                f"{len(json_files)} json files)"
            )
        if not xml_files:
            raise ValidationError(f"{path}: empty corpus directory")
        records = []
        for fp in sorted(xml_files):
            partition = None
            if fp.parent.name in ("train", "test"):
                partition = fp.parent.name
            rec = parse_patient_xml(fp.read_bytes(), patient_id=fp.stem)
            if partition is not None:
                rec = PatientRecord(
                    patient_id=rec.patient_id,
                    notes=rec.notes,
                    labels=rec.labels,
                    partition=partition,
                )
            records.append(rec)
    else:
        raise ValidationError(f"{path}: no such corpus path")
    if not records:
        raise ValidationError(f"{path}: empty corpus")
    records.sort(key=lambda r: r.patient_id)
    seen: set[str] = set()
    for rec in records:
        if rec.patient_id in seen:
            raise SchemaError(f"duplicate patient id: {rec.patient_id}")
        seen.add(rec.patient_id)
    return records


# --------------------------------------------------------------------------
# Splits

OFFICIAL_VALIDATION_FRACTION = 41 / 202


def make_split(records: Sequence[PatientRecord], seed: int) -> DatasetSplit:
    """Deterministic split: official test kept, train shuffled into
    train/validation at the official proportion.
    """
    unmarked = [r.patient_id for r in records if r.partition is None]
    if unmarked:
        raise ValidationError(
            f"{len(unmarked)} records lack a train/test partition marker "
            f"(e.g. {unmarked[0]}); provide an explicit split file instead"
        )
    test_ids = sorted(r.patient_id for r in records if r.partition == "test")
    train_marked = sorted(r.patient_id for r in records if r.partition == "train")
    val_n = round(len(train_marked) * OFFICIAL_VALIDATION_FRACTION)
    shuffled = list(train_marked)
    random.Random(seed).shuffle(shuffled)
    split = DatasetSplit(
        train=tuple(sorted(shuffled[val_n:])),
        validation=tuple(sorted(shuffled[:val_n])),
        test=tuple(test_ids),
    )
    check_partition(split, [r.patient_id for r in records])
    return split


def check_partition(split: DatasetSplit, corpus_ids: Iterable[str]) -> None:
    parts = [set(split.train), set(split.validation), set(split.test)]
    union = parts[0] | parts[1] | parts[2]
    if len(union) != len(split.train) + len(split.validation) + len(split.test):
        raise ValidationError("split parts are not pairwise disjoint")
    if union != set(corpus_ids):
        raise ValidationError("split does not cover the corpus exactly")


def save_split(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train": list(split.train),
                "validation": list(split.validation),
                "test": list(split.test),
            },
            fh,
            indent=2,
        )
        fh.write("\n")


def load_split(path) -> DatasetSplit:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return DatasetSplit(
            train=tuple(doc["train"]),
            validation=tuple(doc["validation"]),
            test=tuple(doc["test"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: split file lacks key {exc}") from exc


# --------------------------------------------------------------------------
# Statistics

def original_text(record: PatientRecord) -> str:
    """All notes concatenated, blank line between; the long-context input."""
    return "\n\n".join(n.text for n in record.notes)


def original_token_count(record: PatientRecord) -> int:
    return count_tokens(original_text(record))


def label_distribution(
    records: Sequence[PatientRecord],
) -> list[tuple[str, int, int]]:
    """Per-criterion (met, not met) counts; every record must be labeled."""
    met = {cid: 0 for cid in criteria.CRITERION_IDS}
    notmet = {cid: 0 for cid in criteria.CRITERION_IDS}
    for rec in records:
        if rec.labels is None:
            raise SchemaError(f"patient {rec.patient_id} is unlabeled")
        for cid, label in rec.labels.items():
            if label is EligibilityLabel.MET:
                met[cid] += 1
            else:
                notmet[cid] += 1
    return [(cid, met[cid], notmet[cid]) for cid in criteria.CRITERION_IDS]


def corpus_stats(
    records: Sequence[PatientRecord],
    input_type: str,
    token_count_fn: Callable[[PatientRecord], float] | None = None,
) -> TokenStats:
    """Mean/min/max of per-patient token counts under one input strategy.

    ``token_count_fn`` supplies the per-patient count for strategies that
    need pipeline components (condenser, retriever); the default counts the
    original concatenated text.
    """
    if not records:
        raise ValidationError("cannot compute stats over an empty corpus")
    fn = token_count_fn or original_token_count
    counts = [float(fn(r)) for r in records]
    return TokenStats(
        input_type=input_type,
        mean=sum(counts) / len(counts),
        min=min(counts),
        max=max(counts),
        n_patients=len(counts),
    )


def distribution_to_csv(rows: Sequence[tuple[str, int, int]]) -> str:
    buf = io.StringIO()
    buf.write("criterion,met,not_met\n")
    for cid, met, notmet in rows:
        buf.write(f"{cid},{met},{notmet}\n")
    return buf.getvalue()


def stats_to_csv(stats: Sequence[TokenStats]) -> str:
    buf = io.StringIO()
    buf.write("input_type,mean,min,max,n_patients\n")
    for s in stats:
        buf.write(
            f"{s.input_type},{s.mean:.1f},{s.min:.1f},{s.max:.1f},{s.n_patients}\n"
        )
    return buf.getvalue()


# --------------------------------------------------------------------------
# Synthetic corpus

@dataclass(frozen=True)
class PlantedEvidence:
    patient_id: str
    criterion_id: str
    note_index: int
    sentence: str


_FILLER_SUBJECTS = (
    "The patient", "He", "She", "This pleasant patient", "The clinic patient",
)
_FILLER_PROBLEM_TERMS = (
    "hypertension", "hyperlipidemia", "osteoarthritis", "seasonal allergies",
    "gastritis", "chronic back pain", "obesity", "anemia", "asthma",
    "hypothyroidism", "migraine headaches", "insomnia", "mild depression",
    "plantar fasciitis", "rosacea",
)
_FILLER_PROBLEM_TEMPLATES = (
    "{subj} has a longstanding history of {term} followed in this clinic.",
    "{subj} reports that the {term} has been stable since the last visit.",
    "Review of systems is notable for {term} without recent flare.",
    "{subj} was counseled regarding lifestyle measures for {term}.",
    "Follow up in three months to reassess the {term}.",
)
_FILLER_NEUTRAL_TEMPLATES = (
    "{subj} arrived on time and was accompanied by a family member.",
    "Vital signs were obtained and recorded by the triage nurse.",
    "{subj} continues to work part time and enjoys gardening on weekends.",
    "All questions were answered and printed instructions were provided.",
    "The front desk scheduled a routine follow up visit for next quarter.",
    "{subj} denies any new travel, pets, or changes at home.",
    "Immunizations were reviewed and found to be up to date today.",
    "Insurance paperwork was updated at registration without issue.",
)
_PLANT_LEADS = (
    "Assessment today confirms:",
    "Chart review documents:",
    "The care team notes the following finding:",
    "Longitudinal history is significant for:",
)


def _filler_sentence(rng: random.Random) -> str:
    subj = rng.choice(_FILLER_SUBJECTS)
    if rng.random() < 0.55:
        template = rng.choice(_FILLER_PROBLEM_TEMPLATES)
        return template.format(subj=subj, term=rng.choice(_FILLER_PROBLEM_TERMS))
    return rng.choice(_FILLER_NEUTRAL_TEMPLATES).format(subj=subj)


def _planted_sentence(rng: random.Random, criterion_id: str) -> str:
    description = criteria.get(criterion_id).description
    return f"{rng.choice(_PLANT_LEADS)} {description}."


def table1_prevalence() -> dict[str, float]:
    # Prevalence proportions from the shipped label-distribution fixture, so
    # synthetic corpora exercise the same class imbalance as the benchmark.
    from trialscreen.fixtures import load_label_distribution

    rows = load_label_distribution()
    return {cid: met / (met + notmet) for cid, met, notmet in rows}


def generate_synthetic_corpus(
    seed: int, n_patients: int
) -> tuple[list[PatientRecord], list[PlantedEvidence]]:
    """Deterministic corpus with planted criterion evidence.

    Each patient gets 2-5 filler notes; for each criterion an independent
    draw at benchmark prevalence decides whether a sentence lexically
    overlapping the criterion description is planted (label Met) or not
    (label NotMet). Returns the records plus the planting manifest.
    """
    if n_patients < 1:
        raise ValueError(f"n_patients must be >= 1, got {n_patients}")
    rng = random.Random(seed)
    prevalence = table1_prevalence()
    records: list[PatientRecord] = []
    manifest: list[PlantedEvidence] = []
    width = max(4, len(str(n_patients)))

    for p in range(n_patients):
        patient_id = f"synth-{p:0{width}d}"
        n_notes = rng.randint(2, 5)
        note_sentences: list[list[str]] = []
        base = dt.date(2060 + rng.randint(0, 30), rng.randint(1, 12), rng.randint(1, 28))
        dates: list[dt.date] = []
        for j in range(n_notes):
            target_tokens = rng.randint(700, 2600)
            sentences: list[str] = []
            total = 0
            while total < target_tokens:
                s = _filler_sentence(rng)
                sentences.append(s)
                total += count_tokens(s)
            note_sentences.append(sentences)
            base = base + dt.timedelta(days=rng.randint(20, 300))
            dates.append(base)

        labels: dict[str, EligibilityLabel] = {}
        for cid in criteria.CRITERION_IDS:
            if rng.random() < prevalence[cid]:
                labels[cid] = EligibilityLabel.MET
                note_idx = rng.randrange(n_notes)
                sentence = _planted_sentence(rng, cid)
                pos = rng.randint(0, len(note_sentences[note_idx]))
                note_sentences[note_idx].insert(pos, sentence)
                manifest.append(
                    PlantedEvidence(
                        patient_id=patient_id,
                        criterion_id=cid,
                        note_index=note_idx,
                        sentence=sentence,
                    )
                )
            else:
                labels[cid] = EligibilityLabel.NOT_MET

        notes = []
        for j, sentences in enumerate(note_sentences):
            paragraphs = []
            for start in range(0, len(sentences), 8):
                paragraphs.append(" ".join(sentences[start : start + 8]))
            text = f"Record date: {dates[j].isoformat()}\n\n" + "\n\n".join(paragraphs)
            notes.append(NoteDocument(note_index=j, record_date=dates[j], text=text))
        partition = "train" if rng.random() < 0.7 else "test"
        records.append(
            PatientRecord(
                patient_id=patient_id,
                notes=tuple(notes),
                labels=labels,
                partition=partition,
            )
        )
    return records, manifest


def save_planting_manifest(manifest: Sequence[PlantedEvidence], path) -> None:
    doc = {
        "plants": [
            {
                "patient_id": m.patient_id,
                "criterion_id": m.criterion_id,
                "note_index": m.note_index,
                "sentence": m.sentence,
            }
            for m in manifest
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_planting_manifest(path) -> list[PlantedEvidence]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [
        PlantedEvidence(
            patient_id=m["patient_id"],
            criterion_id=m["criterion_id"],
            note_index=m["note_index"],
            sentence=m["sentence"],
        )
        for m in doc["plants"]
    ]
