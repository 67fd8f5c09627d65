"""NDC directory search, drug-label fetch with a disk cache, and file-backed prescription rates."""

from __future__ import annotations

import csv
import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

import requests

from .rag import atomic_write

logger = logging.getLogger(__name__)

NDC_URL = "https://api.fda.gov/drug/ndc.json"
LABEL_URL = "https://api.fda.gov/drug/label.json"

LABEL_SECTIONS = (
    "boxed_warning",
    "warnings",
    "warnings_and_cautions",
    "precautions",
    "adverse_reactions",
    "contraindications",
    "drug_interactions",
    "indications_and_usage",
    "use_in_specific_populations",
    "overdosage",
)

PHARM_CLASS_KEYS = ("pharm_class_epc", "pharm_class_moa", "pharm_class_cs", "pharm_class_pe")


class NotFound(LookupError):
    pass


class UpstreamError(RuntimeError):
    def __init__(self, message: str, status: int | None = None) -> None:
        super().__init__(message)
        self.status = status


class DatasetMissing(FileNotFoundError):
    pass


def normalize_name(name: str) -> str:
    return " ".join(name.split()).casefold()


def cache_key(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", normalize_name(name)).strip("_") or "_"


def truncate_extract(text: str, n: int = 3) -> str:
    """Keep the first and last ``n`` words of an extract."""
    words = text.split()
    if len(words) <= 2 * n:
        return " ".join(words)
    return " ".join(words[:n]) + " ... " + " ".join(words[-n:])


# ---------------------------------------------------------------- NDC


@dataclass(frozen=True)
class NdcDrugRecord:
    name: str
    pharm_classes: tuple[str, ...] = ()
    product_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("drug record needs a name")

    def matches(self, term: str) -> bool:
        t = normalize_name(term)
        return t in normalize_name(self.name) or any(t in normalize_name(c) for c in self.pharm_classes)


def _ndc_record(raw: dict[str, Any]) -> NdcDrugRecord | None:
    name = raw.get("generic_name") or raw.get("brand_name") or ""
    if not name.strip():
        return None
    classes = list(raw.get("pharm_class") or [])
    openfda = raw.get("openfda") or {}
    for key in PHARM_CLASS_KEYS:
        classes.extend(openfda.get(key) or [])
    pid = raw.get("product_id") or raw.get("product_ndc")
    return NdcDrugRecord(" ".join(name.split()), tuple(classes), (pid,) if pid else ())


def _merge(records: Iterable[NdcDrugRecord]) -> list[NdcDrugRecord]:
    merged: dict[str, NdcDrugRecord] = {}
    for r in records:
        key = normalize_name(r.name)
        if key in merged:
            old = merged[key]
            classes = old.pharm_classes + tuple(c for c in r.pharm_classes if c not in old.pharm_classes)
            pids = old.product_ids + tuple(p for p in r.product_ids if p not in old.product_ids)
            merged[key] = NdcDrugRecord(old.name, classes, pids)
        else:
            merged[key] = r
    return [merged[k] for k in sorted(merged)]


class NdcDirectory:
    """Search the NDC directory by name or pharmacologic class.

    Offline it reads a JSON file shaped like an openFDA NDC response
    (``{"results": [...]}``); otherwise it queries ``url``.
    """

    def __init__(self, fixture: str | Path | None = None, *, url: str = NDC_URL, session: requests.Session | None = None, timeout: float = 30.0):
        self.fixture = Path(fixture) if fixture else None
        self.url = url
        self.session = session or requests.Session()
        self.timeout = timeout
        self._records: list[NdcDrugRecord] | None = None

    def _fixture_records(self) -> list[NdcDrugRecord]:
        if self._records is None:
            assert self.fixture is not None
            if not self.fixture.exists():
                raise DatasetMissing(f"NDC fixture not found: {self.fixture}")
            data = json.loads(self.fixture.read_text(encoding="utf-8"))
            rows = data.get("results", data) if isinstance(data, dict) else data
            self._records = [r for r in map(_ndc_record, rows) if r is not None]
        return self._records

    def _live_records(self, term: str) -> list[NdcDrugRecord]:
        quoted = term.replace('"', "")
        search = "+".join(f'{f}:"{quoted}"' for f in ("generic_name", "brand_name", "pharm_class"))
        resp = self.session.get(self.url, params={"search": search, "limit": 1000}, timeout=self.timeout)
        if resp.status_code == 404:
            return []
        if resp.status_code != 200:
            raise UpstreamError(f"NDC search failed with status {resp.status_code}", resp.status_code)
        return [r for r in map(_ndc_record, resp.json().get("results", [])) if r is not None]

    def find_category_drugs(self, terms: Iterable[str]) -> list[NdcDrugRecord]:
        terms = list(terms)
        if not terms or any(not t.strip() for t in terms):
            raise ValueError("search terms must be non-empty")
        found = []
        for term in dict.fromkeys(normalize_name(t) for t in terms):
            pool = self._fixture_records() if self.fixture else self._live_records(term)
            found.extend(r for r in pool if r.matches(term))
        return _merge(found)


# ---------------------------------------------------------------- prescriptions


@dataclass(frozen=True)
class PrescriptionRate:
    name: str
    count: int
    rate: float


class PrescriptionRates:
    """Prescription events from a CSV with a ``drug`` column (one row per event)."""

    def __init__(self, path: str | Path, column: str = "drug") -> None:
        self.path = Path(path)
        self.column = column
        self._counts: Counter[str] | None = None
        self._total = 0

    def _load(self) -> Counter[str]:
        if self._counts is None:
            if not self.path.exists():
                raise DatasetMissing(f"prescriptions dataset not found: {self.path}")
            with self.path.open(newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None or self.column not in reader.fieldnames:
                    raise DatasetMissing(f"{self.path}: no `{self.column}` column")
                counts = Counter(normalize_name(row[self.column] or "") for row in reader)
            self._total = sum(counts.values())
            self._counts = counts
        return self._counts

    def rates(self, names: Iterable[str]) -> list[PrescriptionRate]:
        counts = self._load()
        out = []
        for name in names:
            n = counts.get(normalize_name(name), 0)
            out.append(PrescriptionRate(name, n, n / self._total if self._total else 0.0))
        return out


# ---------------------------------------------------------------- labels


@dataclass(frozen=True)
class DrugLabel:
    drug: str
    sections: dict[str, str]
    source_id: str
    fetched_at: float
    effective_time: str = ""
    candidates: int = 1

    def __post_init__(self) -> None:
        if not self.sections:
            raise ValueError("a label needs at least one section")

    def to_json(self) -> dict[str, Any]:
        return {
            "drug": self.drug,
            "sections": self.sections,
            "source_id": self.source_id,
            "fetched_at": self.fetched_at,
            "effective_time": self.effective_time,
            "candidates": self.candidates,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> DrugLabel:
        return cls(
            drug=d["drug"],
            sections=dict(d["sections"]),
            source_id=d["source_id"],
            fetched_at=d["fetched_at"],
            effective_time=d.get("effective_time", ""),
            candidates=d.get("candidates", 1),
        )


def label_sections(doc: dict[str, Any]) -> dict[str, str]:
    out = {}
    for key in LABEL_SECTIONS:
        value = doc.get(key)
        if isinstance(value, list):
            value = "\n".join(str(v) for v in value)
        if isinstance(value, str) and value.strip():
            out[key] = value.strip()
    return out


def _names(doc: dict[str, Any], key: str) -> set[str]:
    return {normalize_name(n) for n in (doc.get("openfda") or {}).get(key, [])}


def best_label(drug: str, docs: list[dict[str, Any]]) -> dict[str, Any]:
    """Exact generic-name match, then exact brand-name match, then newest ``effective_time``."""
    want = normalize_name(drug)
    usable = [d for d in docs if label_sections(d)]
    if not usable:
        raise NotFound(f"no label with usable sections for {drug}")

    def rank(d: dict[str, Any]) -> tuple[int, int, str, str]:
        return (
            want in _names(d, "generic_name"),
            want in _names(d, "brand_name"),
            str(d.get("effective_time", "")),
            str(d.get("id", "")),
        )

    usable.sort(key=rank, reverse=True)
    if len(usable) > 1:
        logger.info("%d label documents match %s; using %s", len(usable), drug, usable[0].get("id"))
    return usable[0]


class LabelClient:
    """Fetches drug labels from a fixture directory or the openFDA label endpoint.

    Labels are cached as ``<cache_dir>/<key>.json`` where ``key`` is the
    normalised drug name with non-alphanumerics replaced by ``_``.
    """

    def __init__(
        self,
        fixture_dir: str | Path | None = None,
        *,
        cache_dir: str | Path | None = None,
        url: str = LABEL_URL,
        refresh: bool = False,
        session: requests.Session | None = None,
        timeout: float = 30.0,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.fixture_dir = Path(fixture_dir) if fixture_dir else None
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.url = url
        self.refresh = refresh
        self.session = session or requests.Session()
        self.timeout = timeout
        self.clock = clock
        self._fixture_docs: list[dict[str, Any]] | None = None
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._refreshed: set[str] = set()

    def _lock(self, key: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(key, threading.Lock())

    def fetch_label(self, drug: str) -> DrugLabel:
        if not drug.strip():
            raise ValueError("drug name is empty")
        key = cache_key(drug)
        with self._lock(key):
            path = self.cache_dir / f"{key}.json" if self.cache_dir else None
            stale = self.refresh and key not in self._refreshed
            if path is not None and path.exists() and not stale:
                return DrugLabel.from_json(json.loads(path.read_text(encoding="utf-8")))
            docs = self._fixture_matches(drug) if self.fixture_dir else self._live_matches(drug)
            if not docs:
                raise NotFound(f"no label found for {drug}")
            doc = best_label(drug, docs)
            label = DrugLabel(
                drug=drug,
                sections=label_sections(doc),
                source_id=str(doc.get("id") or doc.get("set_id") or ""),
                fetched_at=self.clock(),
                effective_time=str(doc.get("effective_time", "")),
                candidates=len(docs),
            )
            if path is not None:
                atomic_write(path, json.dumps(label.to_json(), ensure_ascii=False, indent=1, sort_keys=True))
            self._refreshed.add(key)
            return label

    def _fixture_matches(self, drug: str) -> list[dict[str, Any]]:
        if self._fixture_docs is None:
            assert self.fixture_dir is not None
            if not self.fixture_dir.is_dir():
                raise DatasetMissing(f"label fixture directory not found: {self.fixture_dir}")
            docs = []
            for p in sorted(self.fixture_dir.glob("*.json")):
                data = json.loads(p.read_text(encoding="utf-8"))
                docs.extend(data.get("results", [data]) if isinstance(data, dict) else data)
            self._fixture_docs = docs
        want = normalize_name(drug)
        return [d for d in self._fixture_docs if want in _names(d, "generic_name") | _names(d, "brand_name")]

    def _live_matches(self, drug: str) -> list[dict[str, Any]]:
        name = drug.replace('"', "")
        params: dict[str, Any] = {"search": f'openfda.generic_name:"{name}"+openfda.brand_name:"{name}"', "limit": 100}
        if os.environ.get("OPENFDA_API_KEY"):
            params["api_key"] = os.environ["OPENFDA_API_KEY"]
        try:
            resp = self.session.get(self.url, params=params, timeout=self.timeout)
        except requests.RequestException as exc:
            raise UpstreamError(f"label request failed: {exc}") from exc
        if resp.status_code == 404:
            return []
        if resp.status_code != 200:
            raise UpstreamError(f"label request failed with status {resp.status_code}", resp.status_code)
        return list(resp.json().get("results", []))
