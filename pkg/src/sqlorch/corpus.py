"""Training-corpus pipeline: ingest annotated SQL, reverse-generate queries,
export supervised fine-tuning datasets.

Ingests developer <SQL, comment> pairs, validates and dedupes them, renders
them into a JSONL SFT file for the reverse-generation model, drives that model
over raw SQL to produce pseudo-annotated <query, SQL> pairs, and exports the
downstream NL2SQL SFT file. Fine-tuning itself is external; models appear only
as provider references.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import sqltext
from .errors import IngestError, SqlorchError, SqlParseError, TransportError
from .llm import ModelRef, Provider, complete_with_retries, get_template

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SqlCommentRecord:
    """One annotated <SQL, comment> pair from development practice."""

    id: str
    sql: str
    comment: str
    source: str = ""


@dataclass(frozen=True)
class RawSqlRecord:
    """One raw SQL statement awaiting a generated description."""

    id: str
    sql: str
    source: str = ""


@dataclass(frozen=True)
class QuerySqlPair:
    """A <query, SQL> training pair; origin marks generated vs hand-annotated."""

    id: str
    query: str
    sql: str
    origin: str = "generated"


@dataclass(frozen=True)
class SftExample:
    """One prompt/completion line of an SFT dataset."""

    prompt: str
    completion: str
    meta: str

    def to_json_line(self) -> str:
        return json.dumps(
            {"prompt": self.prompt, "completion": self.completion, "meta": self.meta},
            ensure_ascii=False,
        )


@dataclass
class IngestStats:
    read: int = 0
    kept: int = 0
    rejected_parse: int = 0
    rejected_empty: int = 0

    def as_dict(self) -> dict:
        return {
            "read": self.read,
            "kept": self.kept,
            "rejected_parse": self.rejected_parse,
            "rejected_empty": self.rejected_empty,
        }


@dataclass
class GenStats:
    requested: int = 0
    generated: int = 0
    dropped_empty: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "requested": self.requested,
            "generated": self.generated,
            "dropped_empty": self.dropped_empty,
            "failed": self.failed,
            "failures": list(self.failures),
        }


def _content_id(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


def ingest_sql_comments(
    paths: list[str | Path], dialect: str = "ansi"
) -> tuple[list[SqlCommentRecord], IngestStats]:
    """Read <SQL, comment> JSONL files, keeping rows that parse and carry a
    non-empty comment.

    Malformed JSON lines and unparseable SQL are counted as rejected, never
    fatal; an unreadable file is.
    """
    stats = IngestStats()
    records: list[SqlCommentRecord] = []
    for path in paths:
        for row in _read_jsonl_rows(path, stats):
            sql = row.get("sql")
            if not isinstance(sql, str) or not sqltext.parses(sql):
                stats.rejected_parse += 1
                continue
            comment = row.get("comment")
            comment = comment.strip() if isinstance(comment, str) else ""
            if not comment:
                stats.rejected_empty += 1
                continue
            rec_id = str(row.get("id") or _content_id(sql, comment))
            records.append(
                SqlCommentRecord(
                    id=rec_id, sql=sql, comment=comment, source=str(row.get("source", path))
                )
            )
            stats.kept += 1
    return records, stats


def ingest_raw_sql(
    paths: list[str | Path], dialect: str = "ansi"
) -> tuple[list[RawSqlRecord], IngestStats]:
    """Read raw-SQL JSONL files ({id?, sql, source?}), keeping rows that parse."""
    stats = IngestStats()
    records: list[RawSqlRecord] = []
    for path in paths:
        for row in _read_jsonl_rows(path, stats):
            sql = row.get("sql")
            if not isinstance(sql, str) or not sqltext.parses(sql):
                stats.rejected_parse += 1
                continue
            rec_id = str(row.get("id") or _content_id(sql))
            records.append(RawSqlRecord(id=rec_id, sql=sql, source=str(row.get("source", path))))
            stats.kept += 1
    return records, stats


def _read_jsonl_rows(path: str | Path, stats: IngestStats):
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    with fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            stats.read += 1
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                stats.rejected_parse += 1
                continue
            if not isinstance(row, dict):
                stats.rejected_parse += 1
                continue
            yield row


def dedupe(records: list, dialect: str = "ansi") -> list:
    """Keep the first record per normalized-SQL key, preserving order.

    Works on any record type with a .sql field. Idempotent.
    """
    seen: set[str] = set()
    out = []
    for rec in records:
        try:
            key = sqltext.normalize_sql(rec.sql, dialect)
        except SqlParseError:
            key = rec.sql
        if key in seen:
            continue
        seen.add(key)
        out.append(rec)
    return out


def build_revllm_sft(
    records: list[SqlCommentRecord],
    template_id: str = "revllm_sft_v1",
    out_path: str | Path | None = None,
) -> list[SftExample]:
    """Render the reverse-generation SFT dataset: SQL in the prompt, the
    developer comment as the completion. Writes JSONL when out_path is given.
    """
    if not records:
        raise SqlorchError("empty dataset: no records to export")
    template = get_template(template_id)
    examples = [
        SftExample(
            prompt=template.render({"sql": rec.sql}),
            completion=rec.comment,
            meta=rec.id,
        )
        for rec in records
    ]
    if out_path is not None:
        write_sft_file(examples, out_path)
    return examples


def build_sqlllm_sft(
    pairs: list[QuerySqlPair],
    template_id: str = "sqlllm_sft_v1",
    out_path: str | Path | None = None,
    schema_context: str | None = None,
) -> list[SftExample]:
    """Render the NL2SQL SFT dataset: query (plus schema context when the
    template asks for it) in the prompt, the SQL as the completion.

    Duplicate (query, sql) pairs collapse to a single line.
    """
    if not pairs:
        raise SqlorchError("empty dataset: no pairs to export")
    template = get_template(template_id)
    seen: set[tuple[str, str]] = set()
    examples: list[SftExample] = []
    for pair in pairs:
        key = (pair.query, pair.sql)
        if key in seen:
            continue
        seen.add(key)
        variables = {"query": pair.query}
        if "schema" in template.required_placeholders:
            variables["schema"] = schema_context or "(no schema provided)"
        examples.append(
            SftExample(prompt=template.render(variables), completion=pair.sql, meta=pair.id)
        )
    if out_path is not None:
        write_sft_file(examples, out_path)
    return examples


def write_sft_file(examples: list[SftExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json_line() + "\n")


def read_sft_file(path: str | Path) -> list[SftExample]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            examples.append(
                SftExample(prompt=row["prompt"], completion=row["completion"], meta=row["meta"])
            )
    return examples


def generate_queries(
    raw: list[RawSqlRecord],
    model: ModelRef,
    llm: Provider,
    template_id: str = "revllm_gen_v1",
    parallelism: int = 1,
    retries: int = 2,
    backoff_base_s: float = 0.5,
) -> tuple[list[QuerySqlPair], GenStats]:
    """Generate a natural-language query for each raw SQL statement.

    One provider call per record, concurrent up to `parallelism`; output order
    always equals input order. Transport errors are retried, then isolated to
    the failing record. Empty completions are dropped and counted.
    """
    stats = GenStats(requested=len(raw))
    template = get_template(template_id)

    def _one(rec: RawSqlRecord) -> tuple[RawSqlRecord, str | None, str | None]:
        prompt = template.render({"sql": rec.sql})
        try:
            completion = complete_with_retries(
                llm, model, prompt, retries=retries, backoff_base_s=backoff_base_s
            )
        except TransportError as exc:
            return rec, None, str(exc)
        return rec, completion.text.strip(), None

    if parallelism > 1 and len(raw) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_one, raw))
    else:
        results = [_one(rec) for rec in raw]

    pairs: list[QuerySqlPair] = []
    for rec, query, error in results:
        if error is not None:
            stats.failed += 1
            stats.failures.append(f"{rec.id}: {error}")
            logger.warning("generation failed for %s: %s", rec.id, error)
            continue
        if not query:
            stats.dropped_empty += 1
            continue
        pairs.append(QuerySqlPair(id=rec.id, query=query, sql=rec.sql, origin="generated"))
        stats.generated += 1
    return pairs, stats


def write_pairs_file(pairs: list[QuerySqlPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {"id": p.id, "query": p.query, "sql": p.sql, "origin": p.origin},
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_pairs_file(path: str | Path) -> list[QuerySqlPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            pairs.append(
                QuerySqlPair(
                    id=str(row.get("id", "")),
                    query=row["query"],
                    sql=row["sql"],
                    origin=row.get("origin", "generated"),
                )
            )
    return pairs
