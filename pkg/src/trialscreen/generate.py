"""Generation backends that turn a prompt into an eligibility verdict.

The remote backend fronts an HTTP generation service; the three offline
backends (keyword oracle, label replay, constant) exist to exercise the
harness deterministically. Label replay reads the gold answer key and is
flagged in every report that includes it.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from importlib import resources

import requests

from trialscreen.corpus import EligibilityLabel
from trialscreen.criteria import CriterionSpec
from trialscreen.errors import BackendError, FormatError
from trialscreen.prompts import ContextBundle, ParseFailure, parse_verdict

BACKENDS = ("remote", "keyword-oracle", "label-replay", "constant")


@dataclass(frozen=True)
class Verdict:
    patient_id: str
    criterion_id: str
    predicted: EligibilityLabel
    met_score: float
    evidence: tuple[tuple[str, float], ...] = ()
    raw_text: str = ""
    anomaly: str | None = None

    def __post_init__(self):
        if not (0.0 <= self.met_score <= 1.0):
            raise ValueError(f"met_score out of range: {self.met_score}")
        if (self.predicted is EligibilityLabel.MET) != (self.met_score >= 0.5):
            raise ValueError(
                f"label/score incoherence: {self.predicted.value} with "
                f"met_score {self.met_score}"
            )


@dataclass(frozen=True)
class GeneratorConfig:
    backend: str = "constant"
    endpoint_url: str = ""
    model_id: str = ""
    api_shape: str = "native"  # "native" | "chat"
    rules_path: str | None = None  # None selects the shipped rules
    constant_label: EligibilityLabel = EligibilityLabel.NOT_MET
    max_new_tokens: int = 8
    parallelism: int = 1
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff_s: float = 0.5
    # label-replay answer key: (patient_id, criterion_id) -> label
    answer_key: dict[tuple[str, str], EligibilityLabel] | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown generator backend: {self.backend!r}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.backend == "remote" and not self.endpoint_url:
            raise ValueError("remote generator requires endpoint_url")

    def fingerprint(self) -> str:
        if self.backend == "remote":
            return f"generator:remote/{self.model_id}"
        if self.backend == "constant":
            return f"generator:constant/{self.constant_label.value}"
        return f"generator:{self.backend}"


def load_oracle_rules(path=None) -> dict[str, list[re.Pattern]]:
    """criterion -> compiled case-insensitive regexes."""
    if path is None:
        raw = (
            resources.files("trialscreen.data")
            .joinpath("oracle_rules.tsv")
            .read_text(encoding="utf-8")
        )
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    rules: dict[str, list[re.Pattern]] = {}
    for line in raw.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cid, sep, pattern = line.partition("\t")
        if not sep:
            raise FormatError(f"oracle rule line lacks a tab: {line!r}")
        try:
            compiled = re.compile(pattern.strip(), re.IGNORECASE)
        except re.error as exc:
            raise FormatError(f"bad oracle regex for {cid}: {exc}") from exc
        rules.setdefault(cid.strip(), []).append(compiled)
    return rules


_RULES_CACHE: dict[str | None, dict[str, list[re.Pattern]]] = {}


def _rules_for(config: GeneratorConfig) -> dict[str, list[re.Pattern]]:
    key = config.rules_path
    if key not in _RULES_CACHE:
        _RULES_CACHE[key] = load_oracle_rules(key)
    return _RULES_CACHE[key]


def _remote_generate(config: GeneratorConfig, prompt: str) -> tuple[str, float | None]:
    if config.api_shape == "chat":
        url = config.endpoint_url.rstrip("/") + "/v1/chat/completions"
        payload = {
            "model": config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": config.max_new_tokens,
        }
    else:
        url = config.endpoint_url.rstrip("/") + "/generate"
        payload = {
            "model": config.model_id,
            "prompt": prompt,
            "max_new_tokens": config.max_new_tokens,
        }
    last_error: Exception | None = None
    for attempt in range(config.max_retries + 1):
        try:
            resp = requests.post(url, json=payload, timeout=config.timeout)
        except requests.RequestException as exc:
            last_error = BackendError(f"generation request failed: {exc}")
        else:
            if resp.status_code == 200:
                body = resp.json()
                if config.api_shape == "chat":
                    return body["choices"][0]["message"]["content"], None
                return body["text"], body.get("met_score")
            last_error = BackendError(
                f"generation service returned {resp.status_code}",
                status=resp.status_code,
                body=resp.text,
            )
        if attempt < config.max_retries:
            time.sleep(config.retry_backoff_s * (2**attempt))
    raise last_error  # type: ignore[misc]


def _verdict(patient_id: str, criterion_id: str, label: EligibilityLabel,
             met_score: float, bundle: ContextBundle, raw_text: str,
             anomaly: str | None = None) -> Verdict:
    return Verdict(
        patient_id=patient_id,
        criterion_id=criterion_id,
        predicted=label,
        met_score=met_score,
        evidence=bundle.evidence,
        raw_text=raw_text,
        anomaly=anomaly,
    )


def classify(
    config: GeneratorConfig,
    prompt: str,
    bundle: ContextBundle,
    criterion: CriterionSpec,
) -> Verdict:
    """One verdict for (patient, criterion); evidence copied from the bundle."""
    pid = bundle.patient_id

    if config.backend == "constant":
        label = config.constant_label
        return _verdict(
            pid, criterion.id, label,
            1.0 if label is EligibilityLabel.MET else 0.0,
            bundle, raw_text=label.value,
        )

    if config.backend == "label-replay":
        if config.answer_key is None:
            raise BackendError("label-replay generator has no answer key loaded")
        try:
            label = config.answer_key[(pid, criterion.id)]
        except KeyError:
            raise BackendError(
                f"label-replay has no gold label for ({pid}, {criterion.id})"
            ) from None
        return _verdict(
            pid, criterion.id, label,
            1.0 if label is EligibilityLabel.MET else 0.0,
            bundle, raw_text=label.value,
        )

    if config.backend == "keyword-oracle":
        patterns = _rules_for(config).get(criterion.id, [])
        matched = any(p.search(bundle.context_text) for p in patterns)
        label = EligibilityLabel.MET if matched else EligibilityLabel.NOT_MET
        return _verdict(
            pid, criterion.id, label,
            1.0 if matched else 0.0,
            bundle, raw_text=label.value,
        )

    text, met_score = _remote_generate(config, prompt)
    parsed = parse_verdict(text)
    anomaly = None
    if isinstance(parsed, ParseFailure):
        label = EligibilityLabel.NOT_MET
        anomaly = f"parse-failure: {parsed.reason}"
        met_score = 0.0
    else:
        label = parsed
        if met_score is None:
            met_score = 1.0 if label is EligibilityLabel.MET else 0.0
        else:
            met_score = min(1.0, max(0.0, float(met_score)))
            if (label is EligibilityLabel.MET) != (met_score >= 0.5):
                anomaly = (
                    f"incoherent met_score {met_score} for label {label.value}; "
                    f"score snapped to the label"
                )
                met_score = 1.0 if label is EligibilityLabel.MET else 0.0
    return _verdict(pid, criterion.id, label, met_score, bundle, text, anomaly)
