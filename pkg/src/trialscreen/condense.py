"""Entity-driven extractive condensation of patient records.

Keeps exactly the sentences that touch a problem-class entity, in original
temporal order, then truncates from the front so the most recent text
survives the token budget. Entity extraction is pluggable: a remote
clinical NER service, or an offline lexicon matcher.
"""

from __future__ import annotations

import re
import time
import warnings
from dataclasses import dataclass
from importlib import resources

import requests

from trialscreen.chunking import count_tokens, split_sentences, truncate_front
from trialscreen.corpus import PatientRecord
from trialscreen.errors import BackendError, FormatError

ENTITY_LABELS = ("problem", "treatment", "test")
ALLOWED_TOKEN_LIMITS = (512, 2048, 8192)


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    label: str  # "problem" | "treatment" | "test"
    surface: str


@dataclass(frozen=True)
class NerConfig:
    backend: str = "lexicon"  # "lexicon" | "remote"
    endpoint_url: str = ""
    lexicon_path: str | None = None  # None selects the shipped lexicon
    token_limit: int = 8192
    timeout: float = 30.0
    max_retries: int = 3
    retry_backoff_s: float = 0.5

    def __post_init__(self):
        if self.backend not in ("lexicon", "remote"):
            raise ValueError(f"unknown ner backend: {self.backend!r}")
        if self.token_limit not in ALLOWED_TOKEN_LIMITS:
            raise ValueError(
                f"token_limit must be one of {ALLOWED_TOKEN_LIMITS}, "
                f"got {self.token_limit}"
            )
        if self.backend == "remote" and not self.endpoint_url:
            raise ValueError("remote ner backend requires endpoint_url")

    def fingerprint(self) -> str:
        if self.backend == "lexicon":
            return f"ner:lexicon/limit={self.token_limit}"
        return f"ner:remote/limit={self.token_limit}"


def load_lexicon(path=None) -> list[tuple[str, str]]:
    """Load term -> label pairs from a tab-separated lexicon file."""
    if path is None:
        raw = (
            resources.files("trialscreen.data")
            .joinpath("problem_lexicon.tsv")
            .read_text(encoding="utf-8")
        )
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    out = []
    for line in raw.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        term, sep, label = line.partition("\t")
        if not sep:
            raise FormatError(f"lexicon line lacks a tab: {line!r}")
        label = label.strip().lower()
        if label not in ENTITY_LABELS:
            raise FormatError(f"lexicon label {label!r} for term {term!r}")
        out.append((term.strip(), label))
    return out


class LexiconMatcher:
    """Case-insensitive whole-word matcher with longest-match-first overlap
    resolution."""

    def __init__(self, entries: list[tuple[str, str]]):
        self.labels = {term.lower(): label for term, label in entries}
        terms = sorted(self.labels, key=len, reverse=True)
        if terms:
            # Zero-width lookahead so overlapping candidates are all found;
            # the longest-first alternation picks the longest term per start.
            alternation = "|".join(re.escape(t) for t in terms)
            self._pattern = re.compile(
                rf"(?=(?<![0-9A-Za-z])({alternation})(?![0-9A-Za-z]))",
                re.IGNORECASE,
            )
        else:
            self._pattern = None

    def find(self, text: str) -> list[EntitySpan]:
        if self._pattern is None:
            return []
        candidates = [
            EntitySpan(
                start=m.start(1),
                end=m.end(1),
                label=self.labels[m.group(1).lower()],
                surface=m.group(1),
            )
            for m in self._pattern.finditer(text)
        ]
        return _resolve_overlaps(candidates)


def _resolve_overlaps(spans: list[EntitySpan]) -> list[EntitySpan]:
    taken: list[EntitySpan] = []
    for span in sorted(spans, key=lambda s: (-(s.end - s.start), s.start)):
        if all(span.end <= t.start or span.start >= t.end for t in taken):
            taken.append(span)
    return sorted(taken, key=lambda s: s.start)


_SHIPPED_MATCHER: LexiconMatcher | None = None


def _matcher_for(config: NerConfig) -> LexiconMatcher:
    global _SHIPPED_MATCHER
    if config.lexicon_path is None:
        if _SHIPPED_MATCHER is None:
            _SHIPPED_MATCHER = LexiconMatcher(load_lexicon(None))
        return _SHIPPED_MATCHER
    return LexiconMatcher(load_lexicon(config.lexicon_path))


def _extract_remote(config: NerConfig, text: str) -> list[EntitySpan]:
    url = config.endpoint_url.rstrip("/") + "/ner"
    last_error: Exception | None = None
    for attempt in range(config.max_retries + 1):
        try:
            resp = requests.post(url, json={"text": text}, timeout=config.timeout)
        except requests.RequestException as exc:
            last_error = BackendError(f"ner request failed: {exc}")
        else:
            if resp.status_code == 200:
                body = resp.json()
                spans = []
                for ent in body.get("entities", []):
                    start, end = int(ent["start"]), int(ent["end"])
                    label = str(ent["label"]).lower()
                    if label not in ENTITY_LABELS:
                        raise BackendError(f"ner returned unknown label {label!r}")
                    if not (0 <= start < end <= len(text)):
                        raise BackendError(
                            f"ner span ({start}, {end}) outside text of length "
                            f"{len(text)}"
                        )
                    spans.append(
                        EntitySpan(start=start, end=end, label=label,
                                   surface=text[start:end])
                    )
                resolved = _resolve_overlaps(spans)
                if len(resolved) != len(spans):
                    warnings.warn(
                        f"ner returned {len(spans) - len(resolved)} overlapping "
                        f"spans; kept longest-first",
                        stacklevel=2,
                    )
                return resolved
            last_error = BackendError(
                f"ner service returned {resp.status_code}",
                status=resp.status_code,
                body=resp.text,
            )
        if attempt < config.max_retries:
            time.sleep(config.retry_backoff_s * (2**attempt))
    raise last_error  # type: ignore[misc]


def extract_entities(config: NerConfig, note_text: str) -> list[EntitySpan]:
    """Entity spans of one note, sorted by start, non-overlapping."""
    if not note_text:
        return []
    if config.backend == "lexicon":
        return _matcher_for(config).find(note_text)
    return _extract_remote(config, note_text)


@dataclass(frozen=True)
class CondenseResult:
    text: str
    dropped_tokens: int
    empty_summary: bool

    @property
    def pre_truncation_tokens(self) -> int:
        return count_tokens(self.text) + self.dropped_tokens


def condense(record: PatientRecord, config: NerConfig) -> CondenseResult:
    """Problem-sentence summary of a record, truncated to the token limit.

    Sentences overlapping at least one problem span are kept in note order,
    joined with single spaces, notes separated by a blank line. When the
    result exceeds the limit, tokens are dropped from the front so recent
    notes survive.
    """
    note_summaries: list[str] = []
    for note in record.notes:
        entities = extract_entities(config, note.text)
        problem_spans = [(e.start, e.end) for e in entities if e.label == "problem"]
        if not problem_spans:
            continue
        kept: list[str] = []
        for (s, e), sentence in split_sentences(note.text):
            if any(a < e and s < b for a, b in problem_spans):
                stripped = sentence.strip()
                if stripped:
                    kept.append(stripped)
        if kept:
            note_summaries.append(" ".join(kept))
    text = "\n\n".join(note_summaries)
    if not text:
        return CondenseResult(text="", dropped_tokens=0, empty_summary=True)
    text, dropped = truncate_front(text, config.token_limit)
    return CondenseResult(text=text, dropped_tokens=dropped, empty_summary=False)
