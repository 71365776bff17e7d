"""Pipeline configuration: a flat key = value text file.

One key per configurable field, '#' comments, blank lines ignored. Relative
paths resolve against the config file's directory. Unknown keys fail
validation so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from trialscreen.chunking import ChunkPolicy
from trialscreen.condense import NerConfig
from trialscreen.corpus import EligibilityLabel
from trialscreen.embedding import EmbedderConfig
from trialscreen.errors import ValidationError
from trialscreen.generate import GeneratorConfig
from trialscreen.prompts import (
    NER_TOKEN_LIMITS,
    ORI_TOKEN_LIMIT,
    RAG_TOKEN_LIMIT,
    StrategyConfig,
)

_DEFAULTS: dict[str, str] = {
    "corpus_path": "",
    "split_seed": "42",
    "split_file": "",
    "chunk_max_tokens": "300",
    "chunk_overlap_tokens": "50",
    "chunk_sentence_aligned": "true",
    "embed_backend": "hashed-ngram",
    "embed_model_id": "",
    "embed_endpoint_url": "",
    "embed_api_shape": "native",
    "embed_dims": "256",
    "embed_batch_size": "32",
    "embed_timeout": "30",
    "embed_max_retries": "3",
    "ner_backend": "lexicon",
    "ner_endpoint_url": "",
    "ner_lexicon_path": "",
    "strategy": "ori",
    "token_limit": "",
    "rag_k": "10",
    "generator_backend": "constant",
    "generator_endpoint_url": "",
    "generator_model_id": "",
    "generator_api_shape": "native",
    "generator_rules_path": "",
    "generator_constant_label": "not met",
    "generator_max_new_tokens": "8",
    "generator_parallelism": "1",
    "generator_timeout": "60",
    "generator_max_retries": "3",
    "out_dir": "runs",
    "index_path": "",
}

_PATH_KEYS = (
    "corpus_path", "split_file", "ner_lexicon_path", "generator_rules_path",
    "out_dir", "index_path",
)


def _parse_flat(text: str, source: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key not in _DEFAULTS:
            raise ValidationError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ValidationError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = value.strip()
    return values


def _as_bool(key: str, raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise ValidationError(f"config key {key}: expected true/false, got {raw!r}")


def _as_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"config key {key}: expected integer, got {raw!r}") \
            from None


def _as_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(f"config key {key}: expected number, got {raw!r}") \
            from None


@dataclass(frozen=True)
class PipelineConfig:
    corpus_path: str
    split_seed: int
    split_file: str | None
    chunk_policy: ChunkPolicy
    embedder: EmbedderConfig
    ner: NerConfig
    strategy: StrategyConfig
    generator: GeneratorConfig
    out_dir: str
    index_path: str
    snapshot: dict[str, str]  # resolved flat key/value view, deterministic

    def fingerprints(self) -> dict[str, str]:
        return {
            "embedder_fingerprint": self.embedder.fingerprint(),
            "chunk_fingerprint": self.chunk_policy.fingerprint(),
            "ner_fingerprint": self.ner.fingerprint(),
            "generator_fingerprint": self.generator.fingerprint(),
        }


def _default_token_limit(strategy: str) -> int:
    if strategy == "ori":
        return ORI_TOKEN_LIMIT
    if strategy == "rag":
        return RAG_TOKEN_LIMIT
    return max(NER_TOKEN_LIMITS)


def build_config(values: dict[str, str], base_dir: Path) -> PipelineConfig:
    merged = dict(_DEFAULTS)
    merged.update(values)

    resolved: dict[str, str] = {}
    for key, raw in merged.items():
        if key in _PATH_KEYS and raw:
            raw = str((base_dir / raw).resolve()) if not Path(raw).is_absolute() \
                else raw
        resolved[key] = raw

    strategy_name = resolved["strategy"]
    if strategy_name not in ("ori", "ner", "rag"):
        raise ValidationError(f"config key strategy: unknown value {strategy_name!r}")
    limit_raw = resolved["token_limit"]
    token_limit = _as_int("token_limit", limit_raw) if limit_raw else \
        _default_token_limit(strategy_name)
    resolved["token_limit"] = str(token_limit)

    try:
        chunk_policy = ChunkPolicy(
            max_chunk_tokens=_as_int("chunk_max_tokens", resolved["chunk_max_tokens"]),
            overlap_tokens=_as_int(
                "chunk_overlap_tokens", resolved["chunk_overlap_tokens"]
            ),
            sentence_aligned=_as_bool(
                "chunk_sentence_aligned", resolved["chunk_sentence_aligned"]
            ),
        )
        embedder = EmbedderConfig(
            backend=resolved["embed_backend"],
            model_id=resolved["embed_model_id"],
            endpoint_url=resolved["embed_endpoint_url"],
            api_shape=resolved["embed_api_shape"],
            dims=_as_int("embed_dims", resolved["embed_dims"]),
            batch_size=_as_int("embed_batch_size", resolved["embed_batch_size"]),
            timeout=_as_float("embed_timeout", resolved["embed_timeout"]),
            max_retries=_as_int("embed_max_retries", resolved["embed_max_retries"]),
        )
        ner = NerConfig(
            backend=resolved["ner_backend"],
            endpoint_url=resolved["ner_endpoint_url"],
            lexicon_path=resolved["ner_lexicon_path"] or None,
            token_limit=token_limit if strategy_name == "ner" else 8192,
        )
        strategy = StrategyConfig(
            strategy=strategy_name,
            token_limit=token_limit,
            k=_as_int("rag_k", resolved["rag_k"]),
        )
        generator = GeneratorConfig(
            backend=resolved["generator_backend"],
            endpoint_url=resolved["generator_endpoint_url"],
            model_id=resolved["generator_model_id"],
            api_shape=resolved["generator_api_shape"],
            rules_path=resolved["generator_rules_path"] or None,
            constant_label=EligibilityLabel.parse(
                resolved["generator_constant_label"]
            ),
            max_new_tokens=_as_int(
                "generator_max_new_tokens", resolved["generator_max_new_tokens"]
            ),
            parallelism=_as_int(
                "generator_parallelism", resolved["generator_parallelism"]
            ),
            timeout=_as_float("generator_timeout", resolved["generator_timeout"]),
            max_retries=_as_int(
                "generator_max_retries", resolved["generator_max_retries"]
            ),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    out_dir = resolved["out_dir"]
    index_path = resolved["index_path"] or str(Path(out_dir) / "index.tsix")
    resolved["index_path"] = index_path

    return PipelineConfig(
        corpus_path=resolved["corpus_path"],
        split_seed=_as_int("split_seed", resolved["split_seed"]),
        split_file=resolved["split_file"] or None,
        chunk_policy=chunk_policy,
        embedder=embedder,
        ner=ner,
        strategy=strategy,
        generator=generator,
        out_dir=out_dir,
        index_path=index_path,
        snapshot=dict(sorted(resolved.items())),
    )


def load_config(path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Parse a config file, apply CLI overrides, and validate."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    values = _parse_flat(text, str(path))
    if overrides:
        for key, value in overrides.items():
            if key not in _DEFAULTS:
                raise ValidationError(f"unknown config override {key!r}")
            values[key] = value
    return build_config(values, path.parent.resolve())
