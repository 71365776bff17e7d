"""Approximate tokenization, sentence splitting, and note chunking.

The whitespace-plus-punctuation token rule defined here is normative for
every token budget in the pipeline; real model tokenizers differ, which is
why corpus-level token checks carry a tolerance.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

_PUNCT = frozenset(string.punctuation)

# Periods terminating these strings never end a sentence. Entries may
# contain internal periods ("e.g"); matching is case-insensitive.
DEFAULT_ABBREVIATIONS = ("Dr", "Mr", "Mrs", "vs", "mg", "e.g", "i.e")


def token_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of the approximate tokens of ``text``.

    Rule: split on whitespace, then peel each leading and trailing
    punctuation character of every piece off as its own token. Internal
    punctuation (hyphens, decimals) stays attached.
    """
    spans: list[tuple[int, int]] = []
    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        # piece is text[i:j]
        left, right = i, j
        while left < right and text[left] in _PUNCT:
            spans.append((left, left + 1))
            left += 1
        trailing: list[tuple[int, int]] = []
        while right > left and text[right - 1] in _PUNCT:
            trailing.append((right - 1, right))
            right -= 1
        if left < right:
            spans.append((left, right))
        spans.extend(reversed(trailing))
        i = j
    return spans


def tokenize(text: str) -> list[str]:
    return [text[a:b] for a, b in token_spans(text)]


def count_tokens(text: str) -> int:
    """Deterministic approximate token count; empty string counts 0."""
    return len(token_spans(text))


def truncate_front(text: str, max_tokens: int) -> tuple[str, int]:
    """Drop tokens from the front until ``text`` fits ``max_tokens``.

    Returns (suffix, dropped_token_count). The suffix is an exact character
    suffix of the input, starting at a token boundary, so the most recent
    text survives.
    """
    spans = token_spans(text)
    if len(spans) <= max_tokens:
        return text, 0
    drop = len(spans) - max_tokens
    return text[spans[drop][0]:], drop


def _period_in_abbreviation(text: str, i: int, abbreviations: tuple[str, ...]) -> bool:
    # True when the '.' at position i sits inside or terminates one of the
    # configured abbreviations (occurrence must not be glued to a preceding
    # letter, so "img." does not hit "mg").
    for abbrev in abbreviations:
        pattern = abbrev.lower() + "."
        for j, ch in enumerate(pattern):
            if ch != ".":
                continue
            start = i - j
            if start < 0:
                continue
            if text[start : start + len(pattern)].lower() != pattern:
                continue
            if start > 0 and text[start - 1].isalpha():
                continue
            return True
    return False


def split_sentences(
    text: str,
    abbreviations: tuple[str, ...] = DEFAULT_ABBREVIATIONS,
) -> list[tuple[tuple[int, int], str]]:
    """Partition ``text`` into sentence spans.

    Boundaries: '.', '!' or '?' followed by whitespace or end of text, and
    runs of newlines. A period ending a known abbreviation or sitting
    between digits (a decimal) is not a boundary. Spans are contiguous and
    concatenate back to the input exactly.
    """
    out: list[tuple[tuple[int, int], str]] = []
    n = len(text)
    start = 0
    i = 0
    while i < n:
        ch = text[i]
        if ch in ".!?":
            boundary = i + 1 >= n or text[i + 1].isspace()
            if boundary and ch == ".":
                if 0 < i < n - 1 and text[i - 1].isdigit() and text[i + 1].isdigit():
                    boundary = False
                elif _period_in_abbreviation(text, i, abbreviations):
                    boundary = False
            if boundary:
                out.append(((start, i + 1), text[start : i + 1]))
                start = i + 1
            i += 1
        elif ch in "\r\n":
            j = i
            while j < n and text[j] in "\r\n":
                j += 1
            out.append(((start, j), text[start:j]))
            start = j
            i = j
        else:
            i += 1
    if start < n:
        out.append(((start, n), text[start:n]))
    return out


@dataclass(frozen=True)
class ChunkPolicy:
    """Controls how notes are segmented into retrieval units."""

    max_chunk_tokens: int = 300
    overlap_tokens: int = 50
    sentence_aligned: bool = True

    def __post_init__(self):
        if not (0 <= self.overlap_tokens < self.max_chunk_tokens):
            raise ValueError(
                f"require 0 <= overlap_tokens < max_chunk_tokens, got "
                f"overlap={self.overlap_tokens}, max={self.max_chunk_tokens}"
            )

    def fingerprint(self) -> str:
        return (
            f"chunks:max={self.max_chunk_tokens},overlap={self.overlap_tokens},"
            f"sentence_aligned={str(self.sentence_aligned).lower()}"
        )


@dataclass(frozen=True)
class Chunk:
    """A contiguous token-bounded span of one note; the retrieval unit."""

    chunk_id: str
    patient_id: str
    note_index: int
    char_span: tuple[int, int]
    text: str
    token_count: int


def _emit(patient_id: str, note_index: int, ordinal: int, note_text: str,
          span: tuple[int, int]) -> Chunk:
    text = note_text[span[0] : span[1]]
    return Chunk(
        chunk_id=f"{patient_id}:{note_index}:{ordinal}",
        patient_id=patient_id,
        note_index=note_index,
        char_span=span,
        text=text,
        token_count=count_tokens(text),
    )


def _token_window_spans(spans: list[tuple[int, int]], max_tokens: int,
                        overlap: int) -> list[tuple[int, int]]:
    # Stride windows over a flat token list; coverage guaranteed.
    total = len(spans)
    stride = max_tokens - overlap
    out = []
    pos = 0
    while True:
        end = min(pos + max_tokens, total)
        out.append((spans[pos][0], spans[end - 1][1]))
        if end >= total:
            break
        pos += stride
    return out


def chunk_note(patient_id: str, note_index: int, note_text: str,
               policy: ChunkPolicy) -> list[Chunk]:
    """Segment one note into overlapping chunks.

    Whole sentences are packed greedily up to the token budget; a single
    sentence larger than the budget is split at token boundaries.
    Consecutive chunks re-include trailing context of at least
    ``overlap_tokens`` where the alignment mode permits (budget and forward
    progress win over overlap when a sentence alone nears the budget).
    """
    all_spans = token_spans(note_text)
    if not all_spans:
        return []

    if not policy.sentence_aligned:
        windows = _token_window_spans(
            all_spans, policy.max_chunk_tokens, policy.overlap_tokens
        )
        return [
            _emit(patient_id, note_index, k, note_text, w)
            for k, w in enumerate(windows)
        ]

    # Sentence-aligned: build (span, token_count) pieces, pre-splitting any
    # sentence that alone exceeds the budget.
    pieces: list[tuple[tuple[int, int], int]] = []
    for (s, e), _sent in split_sentences(note_text):
        spans = token_spans(note_text[s:e])
        if not spans:
            continue
        if len(spans) <= policy.max_chunk_tokens:
            pieces.append(((s + spans[0][0], s + spans[-1][1]), len(spans)))
        else:
            shifted = [(s + a, s + b) for a, b in spans]
            for w in _token_window_spans(
                shifted, policy.max_chunk_tokens, policy.overlap_tokens
            ):
                w_tokens = sum(1 for a, _ in shifted if w[0] <= a < w[1])
                pieces.append((w, w_tokens))

    chunks: list[Chunk] = []
    i = 0
    ordinal = 0
    while i < len(pieces):
        j = i
        budget = pieces[i][1]
        while j + 1 < len(pieces) and budget + pieces[j + 1][1] <= policy.max_chunk_tokens:
            j += 1
            budget += pieces[j][1]
        span = (pieces[i][0][0], pieces[j][0][1])
        chunks.append(_emit(patient_id, note_index, ordinal, note_text, span))
        ordinal += 1
        if j + 1 >= len(pieces):
            break
        # Back up whole pieces from the chunk end until the overlap target is
        # met. Never restart at or before the current chunk start, and keep
        # room in the budget for the first unseen piece.
        nxt = j + 1
        acc = 0
        first_new = pieces[j + 1][1]
        while (
            nxt - 1 > i
            and acc < policy.overlap_tokens
            and acc + pieces[nxt - 1][1] + first_new <= policy.max_chunk_tokens
        ):
            nxt -= 1
            acc += pieces[nxt][1]
        i = nxt
    return chunks


def chunk_record(patient_id: str, note_texts: list[str],
                 policy: ChunkPolicy) -> list[Chunk]:
    """Chunk every note of one patient, ids unique corpus-wide."""
    out: list[Chunk] = []
    for idx, text in enumerate(note_texts):
        out.extend(chunk_note(patient_id, idx, text, policy))
    return out
