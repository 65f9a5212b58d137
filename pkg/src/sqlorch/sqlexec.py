"""SQL execution engine: runs statements against an embedded database and
canonicalizes results for comparison and prompt injection.

The reference engine is SQLite; the connection spec string keeps the engine
choice abstract ("sqlite:<path>" today). Evaluation mode enforces a read-only
guardrail before anything reaches the engine.
"""

from __future__ import annotations

import math
import sqlite3
import time
from dataclasses import dataclass
from pathlib import Path

from . import sqltext
from .errors import ExecutionError, GuardrailError, SqlorchError, SqlParseError, SqlTimeoutError

DEFAULT_ROW_LIMIT = 1000
DEFAULT_TIMEOUT_MS = 10_000


@dataclass
class ResultTable:
    """Canonical tabular result: column names, rows of scalars, truncation mark."""

    columns: list[str]
    rows: list[tuple]
    truncated: bool = False
    row_limit: int = DEFAULT_ROW_LIMIT

    def as_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "rows": [list(r) for r in self.rows],
            "truncated": self.truncated,
            "row_limit": self.row_limit,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResultTable":
        return cls(
            columns=list(data["columns"]),
            rows=[tuple(r) for r in data["rows"]],
            truncated=bool(data.get("truncated", False)),
            row_limit=int(data.get("row_limit", DEFAULT_ROW_LIMIT)),
        )


def parse_connection_spec(spec: str) -> tuple[str, str]:
    """Split a connection spec into (engine, target). Bare paths mean sqlite."""
    if ":" in spec:
        engine, _, target = spec.partition(":")
        if engine in ("sqlite", "file"):
            return "sqlite", target
        if len(engine) == 1:  # windows-style drive letter, treat as a path
            return "sqlite", spec
        return engine, target
    return "sqlite", spec


def connect(spec: str, read_only: bool = False) -> sqlite3.Connection:
    """Open a connection for the spec. Unknown engines are an error."""
    engine, target = parse_connection_spec(spec)
    if engine != "sqlite":
        raise ExecutionError(f"unsupported engine '{engine}' in connection spec {spec!r}")
    if not target:
        raise ExecutionError(f"connection spec {spec!r} has no database path")
    try:
        if target == ":memory:":
            return sqlite3.connect(":memory:")
        if read_only:
            uri = f"file:{Path(target).as_posix()}?mode=ro"
            return sqlite3.connect(uri, uri=True)
        return sqlite3.connect(target)
    except sqlite3.Error as exc:
        raise ExecutionError(f"cannot open database {spec!r}: {exc}") from exc


def execute_sql(
    sql: str,
    db: str | sqlite3.Connection,
    row_limit: int = DEFAULT_ROW_LIMIT,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
    mode: str = "evaluation",
) -> ResultTable:
    """Execute one statement and return its result table.

    Evaluation mode rejects anything not positively classified as a read
    before it reaches the engine; sandbox mode permits writes. Rows are capped
    at row_limit with the truncated flag set when the source had more.
    """
    if mode not in ("evaluation", "sandbox"):
        raise SqlorchError(f"unknown execution mode '{mode}'")
    try:
        kind = sqltext.classify_statement(sql)
    except SqlParseError as exc:
        raise ExecutionError(f"statement rejected by validator: {exc}") from exc
    if mode == "evaluation" and kind is not sqltext.StatementKind.READ:
        raise GuardrailError(
            f"evaluation mode only permits read statements (classified {kind.value})"
        )

    own_connection = isinstance(db, str)
    conn = connect(db, read_only=(mode == "evaluation")) if own_connection else db
    deadline = time.monotonic() + timeout_ms / 1000.0
    conn.set_progress_handler(lambda: 1 if time.monotonic() > deadline else 0, 5000)
    try:
        cur = conn.execute(sql)
        if cur.description is None:
            if own_connection:
                conn.commit()
            return ResultTable(columns=[], rows=[], truncated=False, row_limit=row_limit)
        columns = [d[0] for d in cur.description]
        fetched = cur.fetchmany(row_limit + 1)
        truncated = len(fetched) > row_limit
        rows = [tuple(r) for r in fetched[:row_limit]]
        return ResultTable(columns=columns, rows=rows, truncated=truncated, row_limit=row_limit)
    except sqlite3.OperationalError as exc:
        if "interrupted" in str(exc).lower():
            raise SqlTimeoutError(f"statement exceeded {timeout_ms} ms") from exc
        raise ExecutionError(f"execution failed: {exc}") from exc
    except sqlite3.Error as exc:
        raise ExecutionError(f"execution failed: {exc}") from exc
    finally:
        conn.set_progress_handler(None, 0)
        if own_connection:
            conn.close()


def render_scalar(value) -> str:
    """Type-tagged canonical rendering of one cell.

    Numeric values share one representation so INTEGER 1 and REAL 1.0 compare
    equal (engine type affinity makes the distinction an artifact of storage,
    not meaning); floats use 9 significant digits. Tags keep text "1" distinct
    from the number 1, and "?null" sorts before every tagged value.
    """
    if value is None:
        return "?null"
    if isinstance(value, bool):
        return f"n:{int(value)}"
    if isinstance(value, int):
        return f"n:{value}"
    if isinstance(value, float):
        if math.isnan(value):
            return "n:nan"
        if value.is_integer() and abs(value) < 2**53:
            return f"n:{int(value)}"
        return "n:%.9g" % value
    if isinstance(value, bytes):
        return "x:" + value.hex()
    return "s:" + str(value)


def canonicalize(result: ResultTable, order_sensitive: bool = False) -> list[tuple[str, ...]]:
    """Canonical form of a result: rows of rendered cells, values only.

    Column names are excluded (they are aliases); column order within a row is
    preserved (projection order is meaning). Unless order_sensitive, rows are
    sorted under a total order where nulls come first.
    """
    rendered = [tuple(render_scalar(v) for v in row) for row in result.rows]
    if order_sensitive:
        return rendered
    return sorted(rendered)


def results_equal(
    gen: ResultTable, gold: ResultTable, order_sensitive: bool = False
) -> tuple[bool, str]:
    """Compare two results under the canonicalization rules.

    Returns (equal, detail). Truncated results compare as unequal unless both
    are truncated with equal prefixes, in which case the detail flags that the
    comparison only covers the prefix.
    """
    if gen.truncated != gold.truncated:
        return False, "one result was truncated at its row limit, the other was not"
    gen_canon = canonicalize(gen, order_sensitive)
    gold_canon = canonicalize(gold, order_sensitive)
    if gen_canon != gold_canon:
        return False, _diff_detail(gen_canon, gold_canon)
    if gen.truncated:
        return True, "equal prefixes; both results truncated at their row limit"
    return True, "results match"


def _diff_detail(gen_canon: list, gold_canon: list) -> str:
    if len(gen_canon) != len(gold_canon):
        return f"row counts differ: generated {len(gen_canon)} vs gold {len(gold_canon)}"
    for i, (a, b) in enumerate(zip(gen_canon, gold_canon)):
        if a != b:
            return f"first differing row at index {i}: generated {a} vs gold {b}"
    return "results differ"


def order_sensitive_for(gold_sql: str, policy: str = "gold_order_by") -> bool:
    """Row-order sensitivity for an EXE comparison.

    gold_order_by (default): sensitive iff the gold statement has a top-level
    ORDER BY. always / never: fixed.
    """
    if policy == "always":
        return True
    if policy == "never":
        return False
    if policy != "gold_order_by":
        raise SqlorchError(f"unknown order sensitivity policy '{policy}'")
    try:
        return sqltext.has_top_level_order_by(gold_sql)
    except SqlParseError:
        return False


def apply_fixture(seed_sql_path: str | Path, db_path: str | Path) -> None:
    """Create a fresh database file from a SQL seed script (DDL + INSERTs)."""
    db_path = Path(db_path)
    if db_path.exists():
        db_path.unlink()
    seed = Path(seed_sql_path).read_text(encoding="utf-8")
    conn = sqlite3.connect(db_path)
    try:
        conn.executescript(seed)
        conn.commit()
    finally:
        conn.close()


def render_result_table(result: ResultTable, max_rows: int = 20) -> str:
    """Compact text rendering for prompt injection, capped at max_rows."""
    header = " | ".join(result.columns) if result.columns else "(no columns)"
    lines = [header, "-" * len(header)]
    shown = result.rows[:max_rows]
    for row in shown:
        lines.append(" | ".join(_display_scalar(v) for v in row))
    hidden = len(result.rows) - len(shown)
    if hidden > 0:
        lines.append(f"... ({hidden} more rows)")
    if result.truncated:
        lines.append(f"... (source truncated at {result.row_limit} rows)")
    return "\n".join(lines)


def _display_scalar(value) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, float) and value.is_integer() and abs(value) < 2**53:
        return str(int(value))
    return str(value)
