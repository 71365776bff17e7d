"""Context assembly per screening strategy, prompt rendering, and verdict
parsing.

Three context strategies: the full concatenated record ("ori"), the
problem-sentence summary ("ner"), and criterion-conditioned retrieval
("rag"). All strategies emit a ContextBundle whose token count respects the
strategy's limit; the prompt template itself is fixed and byte-stable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from trialscreen.chunking import Chunk, count_tokens, truncate_front
from trialscreen.condense import NerConfig, condense
from trialscreen.corpus import EligibilityLabel, PatientRecord, original_text
from trialscreen.criteria import CriterionSpec
from trialscreen.embedding import EmbedderConfig, EmbeddingVector, embed_texts
from trialscreen.vector_index import VectorIndex, retrieve

STRATEGIES = ("ori", "ner", "rag")
ORI_TOKEN_LIMIT = 8192
NER_TOKEN_LIMITS = (512, 2048, 8192)
RAG_TOKEN_LIMIT = 2048
DEFAULT_RAG_K = 10

PROMPT_TEMPLATE = (
    "Context:\n"
    "\n"
    "{context}\n"
    "\n"
    "Question:\n"
    "\n"
    "Based on the patient's medical records provided, assess if the patient "
    "meets the criteria for {criterion_id}: {criterion_description}\n"
    "\n"
    "Only respond with 'met' if the criteria are met or 'not met' if they "
    "are not."
)


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str
    token_limit: int
    k: int = DEFAULT_RAG_K

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy: {self.strategy!r}")
        if self.strategy == "ori" and self.token_limit != ORI_TOKEN_LIMIT:
            raise ValueError(
                f"ori strategy runs with token_limit {ORI_TOKEN_LIMIT}, "
                f"got {self.token_limit}"
            )
        if self.strategy == "ner" and self.token_limit not in NER_TOKEN_LIMITS:
            raise ValueError(
                f"ner strategy token_limit must be one of {NER_TOKEN_LIMITS}, "
                f"got {self.token_limit}"
            )
        if self.strategy == "rag" and self.token_limit != RAG_TOKEN_LIMIT:
            raise ValueError(
                f"rag strategy runs with token_limit {RAG_TOKEN_LIMIT}, "
                f"got {self.token_limit}"
            )
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")


@dataclass
class StrategyDeps:
    """Backend handles a strategy may need; unused fields stay None."""

    embedder: EmbedderConfig | None = None
    index: VectorIndex | None = None
    chunks_by_id: dict[str, Chunk] = field(default_factory=dict)
    ner: NerConfig | None = None
    query_cache: dict[str, EmbeddingVector] = field(default_factory=dict)


@dataclass(frozen=True)
class ContextBundle:
    strategy: str
    patient_id: str
    context_text: str
    token_count: int
    evidence: tuple[tuple[str, float], ...] = ()
    truncated: bool = False
    warning: str | None = None


def _snippet_block(chunk: Chunk, score: float) -> str:
    ordinal = chunk.chunk_id.rsplit(":", 1)[1]
    header = f"[note {chunk.note_index} | chunk {ordinal} | score {score:.4f}]"
    return f"{header}\n{chunk.text}"


def _build_ori(record: PatientRecord, cfg: StrategyConfig) -> ContextBundle:
    text = original_text(record)
    text, dropped = truncate_front(text, cfg.token_limit)
    return ContextBundle(
        strategy="ori",
        patient_id=record.patient_id,
        context_text=text,
        token_count=count_tokens(text),
        truncated=dropped > 0,
    )


def _build_ner(record: PatientRecord, cfg: StrategyConfig,
               deps: StrategyDeps) -> ContextBundle:
    if deps.ner is None:
        raise ValueError("ner strategy requires a ner backend")
    result = condense(record, deps.ner)
    return ContextBundle(
        strategy="ner",
        patient_id=record.patient_id,
        context_text=result.text,
        token_count=count_tokens(result.text),
        truncated=result.dropped_tokens > 0,
        warning="empty-summary" if result.empty_summary else None,
    )


def _query_vector(criterion: CriterionSpec, deps: StrategyDeps) -> EmbeddingVector:
    # The patient identifier scopes retrieval via the index filter; only the
    # criterion description is embedded.
    cached = deps.query_cache.get(criterion.id)
    if cached is None:
        cached = embed_texts(deps.embedder, [criterion.description])[0]
        deps.query_cache[criterion.id] = cached
    return cached


def _build_rag(record: PatientRecord, criterion: CriterionSpec,
               cfg: StrategyConfig, deps: StrategyDeps) -> ContextBundle:
    if deps.embedder is None or deps.index is None:
        raise ValueError("rag strategy requires an embedder and an index")
    if not deps.index.has_patient(record.patient_id):
        return ContextBundle(
            strategy="rag",
            patient_id=record.patient_id,
            context_text="",
            token_count=0,
            warning="patient-missing-from-index",
        )
    query = _query_vector(criterion, deps)
    hits = retrieve(deps.index, query, record.patient_id, cfg.k)
    blocks = []
    for hit in hits:
        chunk = deps.chunks_by_id.get(hit.chunk_id)
        if chunk is None:
            raise KeyError(f"chunk {hit.chunk_id} not available for context assembly")
        blocks.append((hit, _snippet_block(chunk, hit.score)))

    # Drop whole lowest-score snippets from the end until within budget.
    truncated = False
    while blocks:
        text = "\n\n".join(b for _, b in blocks)
        if count_tokens(text) <= cfg.token_limit:
            break
        blocks.pop()
        truncated = True
    text = "\n\n".join(b for _, b in blocks)
    return ContextBundle(
        strategy="rag",
        patient_id=record.patient_id,
        context_text=text,
        token_count=count_tokens(text),
        evidence=tuple((h.chunk_id, h.score) for h, _ in blocks),
        truncated=truncated,
    )


def build_context(
    record: PatientRecord,
    criterion: CriterionSpec,
    cfg: StrategyConfig,
    deps: StrategyDeps,
) -> ContextBundle:
    """Assemble the context one strategy submits for (patient, criterion)."""
    if cfg.strategy == "ori":
        return _build_ori(record, cfg)
    if cfg.strategy == "ner":
        return _build_ner(record, cfg, deps)
    return _build_rag(record, criterion, cfg, deps)


def render_prompt(bundle: ContextBundle, criterion: CriterionSpec) -> str:
    """Fill the fixed template; byte-stable for fixed inputs."""
    return PROMPT_TEMPLATE.format(
        context=bundle.context_text,
        criterion_id=criterion.id,
        criterion_description=criterion.description,
    )


# Two interpolation points: the context block and the criterion id+description.
PROMPT_SHAPE_RE = re.compile(
    r"\AContext:\n\n(?P<context>.*)\n\nQuestion:\n\n"
    r"Based on the patient's medical records provided, assess if the patient "
    r"meets the criteria for (?P<criterion>[A-Z0-9-]+: .*)\n\n"
    r"Only respond with 'met' if the criteria are met or 'not met' if they "
    r"are not\.\Z",
    re.DOTALL,
)


@dataclass(frozen=True)
class ParseFailure:
    """Generator output that matched neither allowed answer; data, not an
    exception."""

    raw_text: str
    reason: str = "no met/not-met marker found"


def parse_verdict(generated_text: str) -> EligibilityLabel | ParseFailure:
    """Map generator output to a label; 'not met' wins over 'met'."""
    lowered = generated_text.strip().lower()
    if "not met" in lowered:
        return EligibilityLabel.NOT_MET
    if "met" in lowered:
        return EligibilityLabel.MET
    return ParseFailure(raw_text=generated_text)
