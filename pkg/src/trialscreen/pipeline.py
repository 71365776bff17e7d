"""Run orchestration: ingest -> chunk -> embed -> index -> screen -> score.

Screening writes an append-only JSONL manifest (header, one verdict per
line, summary footer) keyed by (patient, criterion), so interrupted runs
resume without re-querying completed pairs. With deterministic backends two
full runs produce byte-identical manifests; wall-clock timing lives only in
the footer's elapsed field.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from trialscreen import criteria
from trialscreen.chunking import Chunk, chunk_record
from trialscreen.condense import condense
from trialscreen.config import PipelineConfig
from trialscreen.corpus import (
    DatasetSplit,
    EligibilityLabel,
    PatientRecord,
    load_corpus,
    load_split,
    make_split,
    original_token_count,
)
from trialscreen.embedding import embed_texts
from trialscreen.errors import (
    BackendError,
    FormatError,
    IncompleteRunError,
    StaleIndexError,
    ValidationError,
)
from trialscreen.generate import Verdict, classify
from trialscreen.metrics import MetricsReport, score_run
from trialscreen.prompts import (
    StrategyDeps,
    build_context,
    rag_raw_context_tokens,
    render_prompt,
)
from trialscreen.vector_index import VectorIndex, build_index, load_index, save_index

MAX_BACKEND_FAILURE_FRACTION = 0.10


def corpus_fingerprint(records: list[PatientRecord]) -> str:
    h = hashlib.sha256()
    for rec in records:
        h.update(rec.patient_id.encode("utf-8"))
        for note in rec.notes:
            h.update(hashlib.sha256(note.text.encode("utf-8")).digest())
    return f"corpus:sha256/{h.hexdigest()[:16]}"


def chunk_all(records: list[PatientRecord], policy) -> tuple[list[Chunk], dict[str, Chunk]]:
    chunks: list[Chunk] = []
    for rec in records:
        chunks.extend(chunk_record(rec.patient_id, [n.text for n in rec.notes], policy))
    return chunks, {c.chunk_id: c for c in chunks}


def gold_from_records(records: list[PatientRecord]) -> dict[str, dict[str, EligibilityLabel]]:
    gold: dict[str, dict[str, EligibilityLabel]] = {}
    for rec in records:
        if rec.labels is None:
            continue
        gold[rec.patient_id] = dict(rec.labels)
    return gold


def answer_key_from_records(records: list[PatientRecord]) -> dict[tuple[str, str], EligibilityLabel]:
    key: dict[tuple[str, str], EligibilityLabel] = {}
    for rec in records:
        if rec.labels is None:
            continue
        for cid, label in rec.labels.items():
            key[(rec.patient_id, cid)] = label
    return key


def resolve_split(config: PipelineConfig, records: list[PatientRecord]) -> DatasetSplit:
    if config.split_file:
        return load_split(config.split_file)
    return make_split(records, config.split_seed)


def select_patients(records: list[PatientRecord], split: DatasetSplit | None,
                    selector: str) -> list[PatientRecord]:
    if selector == "all":
        return list(records)
    if split is None:
        raise ValidationError(f"split selector {selector!r} needs a resolvable split")
    wanted = {
        "train": set(split.train),
        "validation": set(split.validation),
        "test": set(split.test),
    }.get(selector)
    if wanted is None:
        raise ValidationError(f"unknown split selector {selector!r}")
    return [r for r in records if r.patient_id in wanted]


# --------------------------------------------------------------------------
# Index build with fingerprint caching

@dataclass
class IndexBuildResult:
    path: str
    rebuilt: bool
    n_entries: int
    dims: int


def cmd_index(config: PipelineConfig, records: list[PatientRecord] | None = None,
              quiet: bool = False) -> IndexBuildResult:
    """Chunk and embed every patient, then build and persist the index.

    Retrieval at screening time is always patient-local, so indexing the
    whole corpus leaks nothing across the split. A fingerprint match on an
    existing index file is a cache hit and skips the rebuild.
    """
    if records is None:
        records = load_corpus(config.corpus_path)
    fingerprints = {
        "embedder_fingerprint": config.embedder.fingerprint(),
        "chunk_fingerprint": config.chunk_policy.fingerprint(),
        "corpus_fingerprint": corpus_fingerprint(records),
    }
    path = Path(config.index_path)
    if path.exists():
        try:
            existing = load_index(path, expected_fingerprints=fingerprints)
            return IndexBuildResult(
                path=str(path), rebuilt=False,
                n_entries=len(existing), dims=existing.dims,
            )
        except (FormatError, StaleIndexError, OSError):
            pass  # stale or unreadable: rebuild below

    chunks, _ = chunk_all(records, config.chunk_policy)
    vectors = embed_texts(config.embedder, [c.text for c in chunks])
    metadata = dict(fingerprints)
    metadata["dims"] = config.embedder.dims
    index = build_index(
        [(c.chunk_id, c.patient_id) for c in chunks], vectors, metadata
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_index(index, tmp)
    os.replace(tmp, path)
    if not quiet:
        print(
            f"indexed {len(index)} chunks from {len(records)} patients "
            f"(dims={index.dims}) -> {path}"
        )
    return IndexBuildResult(
        path=str(path), rebuilt=True, n_entries=len(index), dims=index.dims
    )


def load_index_checked(config: PipelineConfig, records: list[PatientRecord],
                       force: bool = False) -> VectorIndex:
    fingerprints = {
        "embedder_fingerprint": config.embedder.fingerprint(),
        "chunk_fingerprint": config.chunk_policy.fingerprint(),
        "corpus_fingerprint": corpus_fingerprint(records),
    }
    return load_index(config.index_path, expected_fingerprints=fingerprints,
                      force=force)


# --------------------------------------------------------------------------
# Run manifests

def run_id_for(config: PipelineConfig, selector: str) -> str:
    canonical = json.dumps(
        {"config": config.snapshot, "selector": selector}, sort_keys=True
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _json_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _verdict_line(v: Verdict, context_tokens: int, truncated: bool) -> str:
    return _json_line(
        {
            "type": "verdict",
            "patient_id": v.patient_id,
            "criterion_id": v.criterion_id,
            "predicted": v.predicted.value,
            "met_score": v.met_score,
            "evidence": [[cid, score] for cid, score in v.evidence],
            "raw_text_sha256": hashlib.sha256(v.raw_text.encode("utf-8")).hexdigest(),
            "context_tokens": context_tokens,
            "truncated": truncated,
            "anomaly": v.anomaly,
        }
    )


@dataclass
class Manifest:
    header: dict
    verdicts: list[dict]
    summary: dict | None

    @property
    def complete(self) -> bool:
        return self.summary is not None


def read_manifest(path) -> Manifest:
    header = None
    verdicts: list[dict] = []
    summary = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except ValueError:
                # Tolerate a crash-truncated final line; anything earlier is
                # a real format problem.
                continue
            kind = obj.get("type")
            if kind == "header":
                if header is not None:
                    raise FormatError(f"{path}:{lineno}: duplicate manifest header")
                header = obj
            elif kind == "verdict":
                verdicts.append(obj)
            elif kind == "summary":
                summary = obj
            elif kind == "aborted":
                pass
            else:
                raise FormatError(f"{path}:{lineno}: unknown record type {kind!r}")
    if header is None:
        raise FormatError(f"{path}: manifest lacks a header line")
    return Manifest(header=header, verdicts=verdicts, summary=summary)


def manifest_verdicts(manifest: Manifest) -> list[Verdict]:
    out = []
    for obj in manifest.verdicts:
        out.append(
            Verdict(
                patient_id=obj["patient_id"],
                criterion_id=obj["criterion_id"],
                predicted=EligibilityLabel.parse(obj["predicted"]),
                met_score=float(obj["met_score"]),
                evidence=tuple((c, s) for c, s in obj["evidence"]),
                raw_text="",
                anomaly=obj.get("anomaly"),
            )
        )
    return out


# --------------------------------------------------------------------------
# Screening

@dataclass
class ScreenResult:
    manifest_path: str
    n_verdicts: int
    n_anomalies: int
    resumed_pairs: int


def _prepare_deps(config: PipelineConfig, records: list[PatientRecord],
                  force_stale: bool) -> StrategyDeps:
    strategy = config.strategy.strategy
    deps = StrategyDeps()
    if strategy == "ner":
        deps.ner = config.ner
    elif strategy == "rag":
        deps.embedder = config.embedder
        deps.index = load_index_checked(config, records, force=force_stale)
        _, by_id = chunk_all(records, config.chunk_policy)
        deps.chunks_by_id = by_id
    return deps


def _rewrite_without_partial_tail(path: Path) -> None:
    # Drop a crash-truncated final line so appends start on a fresh line.
    data = path.read_bytes()
    if not data or data.endswith(b"\n"):
        return
    cut = data.rfind(b"\n")
    path.write_bytes(data[: cut + 1] if cut >= 0 else b"")


def cmd_screen(
    config: PipelineConfig,
    selector: str = "all",
    records: list[PatientRecord] | None = None,
    manifest_path=None,
    force_stale: bool = False,
    quiet: bool = False,
    max_pairs: int | None = None,
) -> ScreenResult:
    """Screen every (patient, criterion) pair of the selected split.

    Resumable: pairs already present in the manifest are not re-queried.
    ``max_pairs`` bounds how many new pairs are processed this call (used to
    exercise interrupted runs). Aborts, preserving the partial manifest,
    when more than 10% of pairs hit backend errors.
    """
    started = time.monotonic()
    if records is None:
        records = load_corpus(config.corpus_path)
    split = None
    if selector != "all":
        split = resolve_split(config, records)
    patients = select_patients(records, split, selector)
    if not patients:
        raise ValidationError(f"selector {selector!r} matched no patients")

    gen_config = config.generator
    if gen_config.backend == "label-replay" and gen_config.answer_key is None:
        gen_config = dataclasses.replace(
            gen_config, answer_key=answer_key_from_records(records)
        )

    deps = _prepare_deps(config, records, force_stale)
    catalog = criteria.catalog()

    run_id = run_id_for(config, selector)
    header = {
        "type": "header",
        "run_id": run_id,
        "selector": selector,
        "strategy": config.strategy.strategy,
        "token_limit": config.strategy.token_limit,
        "fingerprints": config.fingerprints(),
        "config": config.snapshot,
    }

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = Path(manifest_path) if manifest_path else \
        out_dir / f"manifest-{config.strategy.strategy}-{selector}-{run_id}.jsonl"

    done: set[tuple[str, str]] = set()
    resumed = 0
    if path.exists():
        _rewrite_without_partial_tail(path)
        existing = read_manifest(path)
        if existing.header.get("run_id") != run_id:
            raise ValidationError(
                f"{path} belongs to run {existing.header.get('run_id')}, current "
                f"config is run {run_id}; remove the file or change out_dir"
            )
        if existing.complete:
            return ScreenResult(
                manifest_path=str(path),
                n_verdicts=len(existing.verdicts),
                n_anomalies=sum(1 for v in existing.verdicts if v.get("anomaly")),
                resumed_pairs=len(existing.verdicts),
            )
        done = {(v["patient_id"], v["criterion_id"]) for v in existing.verdicts}
        resumed = len(done)
        fh = open(path, "a", encoding="utf-8")
    else:
        fh = open(path, "w", encoding="utf-8")
        fh.write(_json_line(header))
        fh.flush()

    pairs = [
        (rec, catalog[cid])
        for rec in patients
        for cid in criteria.CRITERION_IDS
        if (rec.patient_id, cid) not in done
    ]
    total_pairs = len(pairs) + len(done)
    if max_pairs is not None:
        pairs = pairs[:max_pairs]

    def process(pair):
        rec, criterion = pair
        bundle = build_context(rec, criterion, config.strategy, deps)
        prompt = render_prompt(bundle, criterion)
        try:
            verdict = classify(gen_config, prompt, bundle, criterion)
            failed = False
        except BackendError as exc:
            verdict = Verdict(
                patient_id=rec.patient_id,
                criterion_id=criterion.id,
                predicted=EligibilityLabel.NOT_MET,
                met_score=0.0,
                evidence=bundle.evidence,
                raw_text="",
                anomaly=f"backend-error: {exc}",
            )
            failed = True
        return verdict, bundle, failed

    n_failures = 0
    n_written = 0
    counts = {"met": 0, "not met": 0, "anomalies": 0}
    token_sum = 0
    failure_budget = max(1, int(MAX_BACKEND_FAILURE_FRACTION * total_pairs))

    try:
        if gen_config.parallelism > 1:
            executor = ThreadPoolExecutor(max_workers=gen_config.parallelism)
            results = executor.map(process, pairs)
        else:
            executor = None
            results = map(process, pairs)
        for verdict, bundle, failed in results:
            if bundle.token_count > config.strategy.token_limit:
                raise ValidationError(
                    f"context for ({verdict.patient_id}, {verdict.criterion_id}) "
                    f"has {bundle.token_count} tokens, over the "
                    f"{config.strategy.token_limit} limit"
                )
            fh.write(_verdict_line(verdict, bundle.token_count, bundle.truncated))
            fh.flush()
            n_written += 1
            token_sum += bundle.token_count
            counts[verdict.predicted.value] += 1
            if verdict.anomaly:
                counts["anomalies"] += 1
            if failed:
                n_failures += 1
                if n_failures > failure_budget:
                    fh.write(
                        _json_line(
                            {
                                "type": "aborted",
                                "reason": f"{n_failures} backend failures out of "
                                          f"{n_written} pairs (budget "
                                          f"{failure_budget})",
                            }
                        )
                    )
                    raise BackendError(
                        f"aborting: {n_failures} backend failures exceed 10% of "
                        f"{total_pairs} pairs; partial manifest kept at {path}"
                    )
        if executor is not None:
            executor.shutdown()
    finally:
        fh.flush()

    finished = len(done) + n_written
    if max_pairs is not None and finished < total_pairs:
        fh.close()
        return ScreenResult(
            manifest_path=str(path),
            n_verdicts=finished,
            n_anomalies=counts["anomalies"],
            resumed_pairs=resumed,
        )

    # Recount over the whole file so a resumed run's summary equals an
    # uninterrupted one.
    fh.close()
    final = read_manifest(path)
    summary = {
        "type": "summary",
        "verdicts": len(final.verdicts),
        "met": sum(1 for v in final.verdicts if v["predicted"] == "met"),
        "not_met": sum(1 for v in final.verdicts if v["predicted"] == "not met"),
        "anomalies": sum(1 for v in final.verdicts if v.get("anomaly")),
        "context_tokens_mean": (
            sum(v["context_tokens"] for v in final.verdicts) / len(final.verdicts)
            if final.verdicts
            else 0.0
        ),
        "elapsed_s": round(time.monotonic() - started, 3),
    }
    with open(path, "a", encoding="utf-8") as out:
        out.write(_json_line(summary))
    if not quiet:
        print(
            f"screened {summary['verdicts']} pairs: {summary['met']} met, "
            f"{summary['not_met']} not met, {summary['anomalies']} anomalies "
            f"-> {path}"
        )
    return ScreenResult(
        manifest_path=str(path),
        n_verdicts=summary["verdicts"],
        n_anomalies=summary["anomalies"],
        resumed_pairs=resumed,
    )


# --------------------------------------------------------------------------
# Evaluation

def cmd_eval(
    manifest_path,
    records: list[PatientRecord],
    baseline_path=None,
) -> tuple[MetricsReport, MetricsReport | None]:
    """Score a completed manifest against the corpus gold labels."""
    manifest = read_manifest(manifest_path)
    gold = gold_from_records(records)
    covered = {(v["patient_id"], v["criterion_id"]) for v in manifest.verdicts}
    scored_gold = {
        pid: labels for pid, labels in gold.items()
        if any((pid, cid) in covered for cid in labels)
    }
    if not manifest.complete:
        expected = {
            (pid, cid) for pid, labels in scored_gold.items() for cid in labels
        }
        missing = sorted(expected - covered)
        raise IncompleteRunError(
            f"{manifest_path} is incomplete: {len(missing)} pairs missing "
            f"(first few: {missing[:5]}); resume the screen command first"
        )
    report = score_run(manifest_verdicts(manifest), scored_gold)
    if manifest.header.get("config", {}).get("generator_backend") == "label-replay":
        report.flags.append("label-replay backend (gold leakage by design)")
    baseline = None
    if baseline_path:
        baseline, _ = cmd_eval(baseline_path, records)
    return report, baseline


# --------------------------------------------------------------------------
# Token statistics providers

def ner_token_count_fn(config: PipelineConfig):
    def fn(record: PatientRecord) -> float:
        return condense(record, config.ner).pre_truncation_tokens

    return fn


def rag_token_count_fn(config: PipelineConfig, records: list[PatientRecord],
                       force_stale: bool = False):
    """Per-patient mean over the 13 criterion contexts, pre-truncation."""
    deps = _prepare_deps(config, records, force_stale)
    catalog = criteria.catalog()

    def fn(record: PatientRecord) -> float:
        totals = []
        from trialscreen.vector_index import retrieve
        from trialscreen.prompts import _query_vector, _snippet_block

        if not deps.index.has_patient(record.patient_id):
            return 0.0
        for cid in criteria.CRITERION_IDS:
            query = _query_vector(catalog[cid], deps)
            hits = retrieve(deps.index, query, record.patient_id, config.strategy.k)
            blocks = [
                _snippet_block(deps.chunks_by_id[h.chunk_id], h.score) for h in hits
            ]
            from trialscreen.chunking import count_tokens

            totals.append(count_tokens("\n\n".join(blocks)))
        return sum(totals) / len(totals)

    return fn
