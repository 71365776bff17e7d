"""Catalog of the 13 trial eligibility criteria.

The catalog ships as a data file so the verbatim descriptions stay
greppable; the loader validates the file against a pinned checksum so a
silent edit cannot skew screening or scoring.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

from trialscreen.errors import SchemaError

# sha256 of data/criteria.tsv; regenerate deliberately if the catalog changes.
_CATALOG_SHA256 = "025f84edf3e656ed29352ac7217250685f9e8c6d5a5ff92b3e53338ee9a84408"

CRITERION_IDS = (
    "ABDOMINAL",
    "ADVANCED-CAD",
    "ALCOHOL-ABUSE",
    "ASP-FOR-MI",
    "CREATININE",
    "DIETSUPP-2MOS",
    "DRUG-ABUSE",
    "ENGLISH",
    "HBA1C",
    "KETO-1YR",
    "MAJOR-DIABETES",
    "MAKES-DECISIONS",
    "MI-6MOS",
)

N_CRITERIA = len(CRITERION_IDS)


@dataclass(frozen=True)
class CriterionSpec:
    """One eligibility criterion: stable id plus its verbatim description."""

    id: str
    description: str


def _read_catalog_bytes() -> bytes:
    return resources.files("trialscreen.data").joinpath("criteria.tsv").read_bytes()


def load_catalog() -> dict[str, CriterionSpec]:
    """Load and validate the criterion catalog.

    Raises SchemaError if the file checksum, the id set, or the line format
    is off.
    """
    raw = _read_catalog_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != _CATALOG_SHA256:
        raise SchemaError(
            f"criterion catalog checksum mismatch: got {digest}, "
            f"expected {_CATALOG_SHA256}"
        )
    catalog: dict[str, CriterionSpec] = {}
    for line in raw.decode("utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cid, sep, description = line.partition("\t")
        if not sep or not description:
            raise SchemaError(f"malformed catalog line: {line!r}")
        if cid in catalog:
            raise SchemaError(f"duplicate criterion in catalog: {cid}")
        catalog[cid] = CriterionSpec(id=cid, description=description)
    if tuple(sorted(catalog)) != tuple(sorted(CRITERION_IDS)):
        missing = set(CRITERION_IDS) - set(catalog)
        extra = set(catalog) - set(CRITERION_IDS)
        raise SchemaError(f"catalog id mismatch: missing={missing}, extra={extra}")
    return {cid: catalog[cid] for cid in CRITERION_IDS}


_CACHE: dict[str, CriterionSpec] | None = None


def catalog() -> dict[str, CriterionSpec]:
    """Validated catalog, loaded once per process, ordered by criterion id."""
    global _CACHE
    if _CACHE is None:
        _CACHE = load_catalog()
    return _CACHE


def get(criterion_id: str) -> CriterionSpec:
    try:
        return catalog()[criterion_id]
    except KeyError:
        raise KeyError(f"unknown criterion id: {criterion_id!r}") from None
