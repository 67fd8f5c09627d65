"""Chunked document store with hybrid (cosine + BM25) retrieval."""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import requests

CHUNK_SIZE = 1200
CHUNK_OVERLAP = 180
RRF_K = 60
BM25_K1 = 1.5
BM25_B = 0.75
DEFAULT_K = 4
SCORE_DECIMALS = 12
INDEX_FORMAT = "malade-index"
INDEX_VERSION = 1

NO_PASSAGES = "(no relevant passages found)"

_TOKEN = re.compile(r"[a-z0-9]+")
_SENTENCE_END = re.compile(r"[.!?](?=\s)|\n")


class EmbeddingError(RuntimeError):
    def __init__(self, message: str, chunk_id: str | None = None) -> None:
        super().__init__(f"{message} (chunk {chunk_id})" if chunk_id else message)
        self.chunk_id = chunk_id


class IndexFormatError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def split_text(text: str, size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP) -> list[str]:
    """Split into windows of at most ``size`` chars overlapping by ``overlap``.

    A window is shortened to end at the last sentence boundary in its second
    half when there is one. Text no longer than ``size`` is a single chunk.
    """
    if not 0 <= overlap < size // 2:
        raise ValueError("overlap must be non-negative and under half the chunk size")
    text = text.strip()
    if len(text) <= size:
        return [text] if text else []
    out = []
    start = 0
    n = len(text)
    while True:
        end = min(start + size, n)
        if end == n:
            out.append(text[start:])
            return [c for c in out if c.strip()]
        cut = end
        floor = start + size // 2
        for m in _SENTENCE_END.finditer(text, floor, end):
            cut = m.end()
        out.append(text[start:cut])
        start = cut - overlap


class Embedder(Protocol):
    dim: int
    name: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Deterministic signed feature hashing of lowercase word tokens, L2-normalised."""

    name = "hash"

    def __init__(self, dim: int = 256) -> None:
        self.dim = dim

    def vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in tokenize(text):
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "big")
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.array([self.vector(t) for t in texts]).reshape(len(texts), self.dim)


class RemoteEmbedder:
    """OpenAI-style ``/embeddings`` endpoint."""

    name = "remote"

    def __init__(self, model: str, dim: int, *, base_url: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.model = model
        self.dim = dim
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("OPENAI_API_KEY", "")
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            rows = sorted(resp.json()["data"], key=lambda d: d["index"])
            arr = np.array([r["embedding"] for r in rows], dtype=float)
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise EmbeddingError(f"embedding request failed: {exc}") from exc
        if arr.shape != (len(texts), self.dim):
            raise EmbeddingError(f"expected {len(texts)}x{self.dim} embeddings, got {arr.shape}")
        norms = np.linalg.norm(arr, axis=1, keepdims=True)
        return np.divide(arr, norms, out=np.zeros_like(arr), where=norms > 0)


def drug_tag(name: str) -> str:
    return " ".join(name.split()).upper()


@dataclass(frozen=True)
class Chunk:
    id: str
    drug: str
    section: str
    text: str
    embedding: tuple[float, ...]
    ordinal: int
    terms: dict[str, int] = field(default_factory=dict, compare=False, hash=False)

    @property
    def length(self) -> int:
        return sum(self.terms.values())


@dataclass(frozen=True)
class RetrievalQuery:
    """``mode`` picks the rankings to fuse: hybrid (default), semantic or lexical.

    ``embedding`` overrides the query vector; with empty ``text`` no lexical
    ranking is computed.
    """

    text: str
    k: int = DEFAULT_K
    filter_drugs: tuple[str, ...] | None = None
    embedding: tuple[float, ...] | None = None
    mode: str = "hybrid"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.mode not in ("hybrid", "semantic", "lexical"):
            raise ValueError(f"unknown retrieval mode {self.mode!r}")
        if self.filter_drugs is not None:
            object.__setattr__(self, "filter_drugs", tuple(self.filter_drugs))


def bm25_scores(query_terms: Iterable[str], docs: Sequence[Chunk], k1: float = BM25_K1, b: float = BM25_B) -> list[float]:
    """BM25 with IDF over ``docs`` only, so scores depend on the filtered candidate set."""
    n = len(docs)
    if n == 0:
        return []
    avgdl = sum(d.length for d in docs) / n or 1.0
    qs = sorted(set(query_terms))
    df = {t: sum(1 for d in docs if t in d.terms) for t in qs}
    scores = []
    for d in docs:
        s = 0.0
        for t in qs:
            tf = d.terms.get(t, 0)
            if not tf:
                continue
            idf = math.log(1.0 + (n - df[t] + 0.5) / (df[t] + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * d.length / avgdl))
        scores.append(s)
    return scores


class DocumentStore:
    """In-memory chunk index, persisted as one versioned JSON file.

    Reads may run concurrently; ``ingest`` holds the write lock while it
    replaces a drug's sections.
    """

    def __init__(self, embedder: Embedder | None = None, *, size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP) -> None:
        self.embedder = embedder or HashEmbedder()
        self.size = size
        self.overlap = overlap
        self._chunks: dict[str, Chunk] = {}
        self._next = 0
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._chunks)

    @property
    def chunks(self) -> list[Chunk]:
        with self._lock:
            return sorted(self._chunks.values(), key=lambda c: c.ordinal)

    def drugs(self) -> set[str]:
        with self._lock:
            return {c.drug for c in self._chunks.values()}

    def has_drug(self, name: str) -> bool:
        return drug_tag(name) in self.drugs()

    def ingest(self, drug: str, sections: dict[str, str]) -> list[str]:
        if not sections:
            raise ValueError("ingest needs at least one section")
        tag = drug_tag(drug)
        pieces = {section: split_text(text, self.size, self.overlap) for section, text in sections.items()}
        with self._lock:
            # Unchanged sections keep their chunks (and ordinals).
            unchanged = {s for s, ps in pieces.items() if ps and [c.text for c in self._section(tag, s)] == ps}
        planned = [
            (f"{tag}/{section}/{i}", section, piece)
            for section, ps in pieces.items()
            if section not in unchanged
            for i, piece in enumerate(ps)
        ]
        vectors = self._embed(planned)
        with self._lock:
            for section in pieces:
                if section in unchanged:
                    continue
                for c in self._section(tag, section):
                    del self._chunks[c.id]
            for (cid, section, piece), vec in zip(planned, vectors):
                self._chunks[cid] = Chunk(
                    id=cid,
                    drug=tag,
                    section=section,
                    text=piece,
                    embedding=tuple(float(x) for x in vec),
                    ordinal=self._next,
                    terms=dict(Counter(tokenize(piece))),
                )
                self._next += 1
            return [c.id for s in pieces for c in self._section(tag, s)]

    def _section(self, tag: str, section: str) -> list[Chunk]:
        return sorted((c for c in self._chunks.values() if c.drug == tag and c.section == section), key=lambda c: c.ordinal)

    def _embed(self, planned: list[tuple[str, str, str]]) -> np.ndarray:
        if not planned:
            return np.zeros((0, self.embedder.dim))
        try:
            vecs = self.embedder.embed([p[2] for p in planned])
        except EmbeddingError as exc:
            raise EmbeddingError(str(exc), exc.chunk_id or planned[0][0]) from exc
        for (cid, _, _), v in zip(planned, vecs):
            if len(v) != self.embedder.dim or not np.all(np.isfinite(v)):
                raise EmbeddingError("bad embedding", cid)
        return vecs

    def candidates(self, filter_drugs: Iterable[str] | None) -> list[Chunk]:
        chunks = self.chunks
        if filter_drugs is None:
            return chunks
        wanted = {drug_tag(d) for d in filter_drugs}
        return [c for c in chunks if c.drug in wanted]

    def retrieve(self, q: RetrievalQuery) -> list[tuple[Chunk, float]]:
        cands = self.candidates(q.filter_drugs)
        if not cands:
            return []
        fused = {c.id: 0.0 for c in cands}
        if q.mode in ("hybrid", "semantic"):
            qv = np.asarray(q.embedding, dtype=float) if q.embedding is not None else self.embedder.embed([q.text])[0]
            mat = np.array([c.embedding for c in cands])
            qn = np.linalg.norm(qv)
            sims = mat @ qv / qn if qn > 0 else np.zeros(len(cands))
            # Rounded so last-bit differences between BLAS builds cannot reorder near-ties.
            sims = np.round(sims, SCORE_DECIMALS)
            order = sorted(range(len(cands)), key=lambda i: (-sims[i], cands[i].ordinal))
            for rank, i in enumerate(order, start=1):
                fused[cands[i].id] += 1.0 / (RRF_K + rank)
        if q.mode in ("hybrid", "lexical") and q.text.strip():
            scores = [round(x, SCORE_DECIMALS) for x in bm25_scores(tokenize(q.text), cands)]
            hits = [i for i in range(len(cands)) if scores[i] > 0]
            hits.sort(key=lambda i: (-scores[i], cands[i].ordinal))
            for rank, i in enumerate(hits, start=1):
                fused[cands[i].id] += 1.0 / (RRF_K + rank)
        ranked = sorted(cands, key=lambda c: (-fused[c.id], c.ordinal))
        return [(c, fused[c.id]) for c in ranked[: q.k]]

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with self._lock:
            doc = {
                "format": INDEX_FORMAT,
                "version": INDEX_VERSION,
                "embedder": self.embedder.name,
                "dim": self.embedder.dim,
                "chunking": {"size": self.size, "overlap": self.overlap},
                "next_ordinal": self._next,
                "chunks": [
                    {
                        "id": c.id,
                        "drug": c.drug,
                        "section": c.section,
                        "ordinal": c.ordinal,
                        "text": c.text,
                        "terms": c.terms,
                        "embedding": list(c.embedding),
                    }
                    for c in self.chunks
                ],
            }
        atomic_write(path, json.dumps(doc, ensure_ascii=False, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path, embedder: Embedder | None = None) -> DocumentStore:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IndexFormatError(f"{path}: not a JSON index ({exc.msg})") from None
        if doc.get("format") != INDEX_FORMAT or doc.get("version") != INDEX_VERSION:
            raise IndexFormatError(f"{path}: unsupported index format/version")
        embedder = embedder or HashEmbedder(doc["dim"])
        if embedder.dim != doc["dim"] or embedder.name != doc["embedder"]:
            raise IndexFormatError(f"{path}: index was built with {doc['embedder']}/{doc['dim']}")
        store = cls(embedder, size=doc["chunking"]["size"], overlap=doc["chunking"]["overlap"])
        for c in doc["chunks"]:
            store._chunks[c["id"]] = Chunk(
                id=c["id"],
                drug=c["drug"],
                section=c["section"],
                text=c["text"],
                embedding=tuple(c["embedding"]),
                ordinal=c["ordinal"],
                terms=dict(c["terms"]),
            )
        store._next = doc["next_ordinal"]
        return store


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_passage(i: int, chunk: Chunk) -> str:
    return f"[{i}] {chunk.drug}: {chunk.section}:\n{chunk.text}"


def augment_prompt(question: str, passages: Sequence[Chunk]) -> str:
    """Number the passages with their provenance, then ask for a grounded answer."""
    if passages:
        body = "\n\n".join(format_passage(i, c) for i, c in enumerate(passages, start=1))
    else:
        body = NO_PASSAGES
    return (
        f"Reference passages:\n{body}\n\n"
        f"Question: {question}\n"
        "Answer only from the reference passages and give the numbers of the passages you relied on."
    )
