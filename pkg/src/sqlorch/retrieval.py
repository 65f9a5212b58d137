"""Vector-similarity retrieval over the knowledge base and schema repository.

Builds a flat index of knowledge documents and table schemas, embeds them with
a deterministic feature-hashing embedder (character 3-5-grams into 512
dimensions, L2-normalized), and assembles the prompt context for a query by
cosine top-k over each pool. Exact brute-force scan; correctness over speed at
the corpus sizes this serves.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sqltext
from .errors import SqlorchError, SqlParseError

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 512
_NGRAM_SIZES = (3, 4, 5)


@dataclass(frozen=True)
class KnowledgeDoc:
    id: str
    title: str
    body: str
    tags: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.body.strip():
            raise SqlorchError(f"knowledge doc {self.id!r} has an empty body")


@dataclass(frozen=True)
class TableSchema:
    table_name: str
    columns: tuple[dict, ...]  # {name, type, comment}
    ddl: str
    description: str = ""


@dataclass
class RetrievalContext:
    """Assembled context for one query: ranked hits plus the rendered block."""

    query: str
    knowledge_hits: list[tuple[str, float]]
    schema_hits: list[tuple[str, float]]
    rendered: str

    def as_dict(self) -> dict:
        return {
            "query": self.query,
            "knowledge_hits": [[i, s] for i, s in self.knowledge_hits],
            "schema_hits": [[t, s] for t, s in self.schema_hits],
            "rendered": self.rendered,
        }


@dataclass
class IndexStats:
    docs: int = 0
    tables: int = 0
    rejected_tables: int = 0
    rejections: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "docs": self.docs,
            "tables": self.tables,
            "rejected_tables": self.rejected_tables,
            "rejections": list(self.rejections),
        }


def embed(text: str, dim: int = EMBEDDING_DIM) -> np.ndarray:
    """Deterministic hashing embedder: signed character n-gram features.

    Case-folded, whitespace-collapsed text is decomposed into character 3-, 4-
    and 5-grams; each gram is hashed (blake2b) to a dimension and a sign. The
    result is L2-normalized. No model, no state: the same text always maps to
    the same unit vector, on any platform.
    """
    if not text.strip():
        raise SqlorchError("cannot embed empty text")
    processed = " ".join(text.lower().split())
    grams = [
        processed[i : i + n]
        for n in _NGRAM_SIZES
        for i in range(len(processed) - n + 1)
    ]
    if not grams:
        grams = [processed]
    vec = np.zeros(dim, dtype=np.float64)
    for gram in grams:
        h = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big")
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[h % dim] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # Degenerate cancellation on tiny inputs; fall back to a unit axis.
        h = int.from_bytes(hashlib.blake2b(processed.encode("utf-8"), digest_size=8).digest(), "big")
        vec[h % dim] = 1.0
        return vec
    return vec / norm


def _doc_text(doc: KnowledgeDoc) -> str:
    return "\n".join(filter(None, [doc.title, doc.body, " ".join(doc.tags)]))


def _table_text(table: TableSchema) -> str:
    cols = " ".join(
        f"{c['name']} {c.get('comment', '')}".strip() for c in table.columns
    )
    return "\n".join(filter(None, [table.table_name, table.description, cols]))


class Index:
    """Immutable in-memory index over knowledge docs and table schemas."""

    def __init__(self, dim: int = EMBEDDING_DIM):
        self.dim = dim
        self._ids: dict[str, list[str]] = {"knowledge": [], "schema": []}
        self._payloads: dict[str, dict[str, dict]] = {"knowledge": {}, "schema": {}}
        self._vectors: dict[str, np.ndarray] = {
            "knowledge": np.zeros((0, dim)),
            "schema": np.zeros((0, dim)),
        }
        self.stats = IndexStats()

    @classmethod
    def build(
        cls,
        docs: list[KnowledgeDoc],
        tables: list[TableSchema],
        dim: int = EMBEDDING_DIM,
    ) -> "Index":
        """Embed every doc and table. Tables whose DDL fails validation or that
        declare duplicate column names are rejected and counted, not fatal.
        """
        index = cls(dim=dim)
        k_vecs, k_ids = [], []
        for doc in docs:
            k_ids.append(doc.id)
            k_vecs.append(embed(_doc_text(doc), dim))
            index._payloads["knowledge"][doc.id] = {
                "id": doc.id,
                "title": doc.title,
                "body": doc.body,
                "tags": list(doc.tags),
            }
        s_vecs, s_ids = [], []
        for table in tables:
            problem = _validate_table(table)
            if problem:
                index.stats.rejected_tables += 1
                index.stats.rejections.append(f"{table.table_name}: {problem}")
                logger.warning("rejected table %s: %s", table.table_name, problem)
                continue
            s_ids.append(table.table_name)
            s_vecs.append(embed(_table_text(table), dim))
            index._payloads["schema"][table.table_name] = {
                "table_name": table.table_name,
                "columns": list(table.columns),
                "ddl": table.ddl,
                "description": table.description,
            }
        index._ids["knowledge"] = k_ids
        index._ids["schema"] = s_ids
        index._vectors["knowledge"] = np.array(k_vecs) if k_vecs else np.zeros((0, dim))
        index._vectors["schema"] = np.array(s_vecs) if s_vecs else np.zeros((0, dim))
        index.stats.docs = len(k_ids)
        index.stats.tables = len(s_ids)
        return index

    def save(self, path: str | Path) -> None:
        """Persist as JSONL {id, kind, vector, payload}, written atomically."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".index-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                for kind in ("knowledge", "schema"):
                    for i, item_id in enumerate(self._ids[kind]):
                        fh.write(
                            json.dumps(
                                {
                                    "id": item_id,
                                    "kind": kind,
                                    "vector": self._vectors[kind][i].tolist(),
                                    "payload": self._payloads[kind][item_id],
                                },
                                ensure_ascii=False,
                            )
                            + "\n"
                        )
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | Path, dim: int = EMBEDDING_DIM) -> "Index":
        index = cls(dim=dim)
        vecs: dict[str, list] = {"knowledge": [], "schema": []}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                kind = row["kind"]
                index._ids[kind].append(row["id"])
                vecs[kind].append(np.array(row["vector"], dtype=np.float64))
                index._payloads[kind][row["id"]] = row["payload"]
        for kind in ("knowledge", "schema"):
            index._vectors[kind] = np.array(vecs[kind]) if vecs[kind] else np.zeros((0, dim))
        index.stats.docs = len(index._ids["knowledge"])
        index.stats.tables = len(index._ids["schema"])
        return index

    def _top_k(self, kind: str, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
        ids = self._ids[kind]
        if k <= 0 or not ids:
            return []
        scores = self._vectors[kind] @ query_vec
        ranked = sorted(zip(ids, scores), key=lambda pair: (-pair[1], pair[0]))
        return [(item_id, float(score)) for item_id, score in ranked[:k]]

    def retrieve(self, query: str, k_knowledge: int = 4, k_schema: int = 3) -> RetrievalContext:
        """Top-k by cosine per pool (ties by lexicographic id), plus the
        rendered context block: schemas first, then knowledge snippets.
        """
        if not query.strip():
            raise SqlorchError("cannot retrieve for an empty query")
        query_vec = embed(query, self.dim)
        knowledge_hits = self._top_k("knowledge", query_vec, k_knowledge)
        schema_hits = self._top_k("schema", query_vec, k_schema)
        rendered = self._render(query, knowledge_hits, schema_hits)
        return RetrievalContext(
            query=query,
            knowledge_hits=knowledge_hits,
            schema_hits=schema_hits,
            rendered=rendered,
        )

    def _render(
        self,
        query: str,
        knowledge_hits: list[tuple[str, float]],
        schema_hits: list[tuple[str, float]],
    ) -> str:
        lines = [f"# Query\n{query}"]
        if schema_hits:
            lines.append("\n## Schemas")
            for table_name, _score in schema_hits:
                payload = self._payloads["schema"][table_name]
                lines.append(payload["ddl"].strip())
                for col in payload["columns"]:
                    comment = col.get("comment", "")
                    if comment:
                        lines.append(f"-- {payload['table_name']}.{col['name']}: {comment}")
                if payload.get("description"):
                    lines.append(f"-- {payload['table_name']}: {payload['description']}")
        if knowledge_hits:
            lines.append("\n## Knowledge")
            for doc_id, _score in knowledge_hits:
                payload = self._payloads["knowledge"][doc_id]
                lines.append(f"[{payload['title']}] {payload['body']}")
        return "\n".join(lines)


def load_knowledge_jsonl(path: str | Path) -> list[KnowledgeDoc]:
    """Knowledge input JSONL: {id, title, body, tags}."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            docs.append(
                KnowledgeDoc(
                    id=str(row["id"]),
                    title=row.get("title", ""),
                    body=row["body"],
                    tags=tuple(row.get("tags", [])),
                )
            )
    return docs


def load_tablehub_jsonl(path: str | Path) -> list[TableSchema]:
    """Schema repository input JSONL: {table_name, ddl, description, column_comments}.

    Columns (name, type) are extracted from the DDL; comments come from the
    column_comments map. Tables with unparseable DDL are still returned here
    and rejected with a diagnostic at index time.
    """
    tables = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ddl = row["ddl"]
            comments = row.get("column_comments", {})
            try:
                _name, cols = sqltext.parse_create_table(ddl)
                columns = tuple(
                    {"name": c.name, "type": c.type, "comment": comments.get(c.name, "")}
                    for c in cols
                )
            except SqlParseError:
                columns = ()
            tables.append(
                TableSchema(
                    table_name=str(row["table_name"]),
                    columns=columns,
                    ddl=ddl,
                    description=row.get("description", ""),
                )
            )
    return tables


def _validate_table(table: TableSchema) -> str | None:
    try:
        sqltext.parse_create_table(table.ddl)
    except SqlParseError as exc:
        return f"DDL does not parse: {exc}"
    names = [c["name"] for c in table.columns]
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        return f"duplicate column names: {', '.join(dupes)}"
    return None
