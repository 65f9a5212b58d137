"""Lightweight SQL text machinery: tokenizing, validation, normalization, classification.

This is not a full SQL grammar. It is a deterministic tokenizer for a generic
ANSI-ish dialect plus the handful of structural checks the rest of the package
needs: single-statement validation, canonical normalization for dedupe keys,
read/mutation classification for the execution guardrail, top-level ORDER BY
detection for result comparison, and CREATE TABLE column extraction for the
schema repository.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import SqlParseError

# Keywords uppercased by normalize_sql. Deliberately keywords only: identifier
# case is engine-dependent, so touching it would not be identity-preserving.
KEYWORDS = frozenset(
    """
    ALL ALTER AND ANY AS ASC BEGIN BETWEEN BY CASCADE CASE CAST CHECK COLLATE
    COLUMN COMMIT CONSTRAINT CREATE CROSS CURRENT_DATE CURRENT_TIME
    CURRENT_TIMESTAMP DEFAULT DELETE DESC DISTINCT DROP ELSE END ESCAPE EXCEPT
    EXISTS EXPLAIN FALSE FETCH FOREIGN FROM FULL GRANT GROUP HAVING IF IN INDEX
    INNER INSERT INTERSECT INTO IS JOIN KEY LEFT LIKE LIMIT NATURAL NOT NULL
    OFFSET ON OR ORDER OUTER OVER PARTITION PRIMARY RECURSIVE REFERENCES
    REPLACE RESTRICT REVOKE RIGHT ROLLBACK ROW ROWS SELECT SET TABLE TEMP
    TEMPORARY THEN TRUE TRUNCATE UNION UNIQUE UPDATE USING VALUES VIEW WHEN
    WHERE WINDOW WITH
    """.split()
)

# First keyword a statement may open with under the generic dialect.
STATEMENT_STARTERS = frozenset(
    """
    SELECT WITH VALUES INSERT UPDATE DELETE CREATE DROP ALTER TRUNCATE REPLACE
    EXPLAIN PRAGMA GRANT REVOKE BEGIN COMMIT ROLLBACK VACUUM ANALYZE
    """.split()
)

# Any of these appearing as a bare word anywhere in the statement marks it as
# mutating for the guardrail, catching DML hidden inside CTEs and subclauses.
MUTATING_KEYWORDS = frozenset(
    """
    INSERT UPDATE DELETE CREATE DROP ALTER TRUNCATE REPLACE GRANT REVOKE
    VACUUM ATTACH DETACH REINDEX MERGE
    """.split()
)

_MULTI_CHAR_OPS = ("<=", ">=", "<>", "!=", "||", "::", "->>", "->")
_SINGLE_CHAR = set("+-*/%<>=,().;?:$&|!~[]")


class TokenKind(enum.Enum):
    WORD = "word"
    STRING = "string"
    QUOTED_IDENT = "qident"
    NUMBER = "number"
    OP = "op"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    pos: int

    def is_word(self, upper: str) -> bool:
        return self.kind is TokenKind.WORD and self.text.upper() == upper


class StatementKind(enum.Enum):
    READ = "read"
    MUTATION = "mutation"
    OTHER = "other"


def tokenize(sql: str) -> list[Token]:
    """Tokenize SQL, dropping comments. Raises SqlParseError on malformed input."""
    tokens: list[Token] = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch.isspace():
            i += 1
            continue
        if sql.startswith("--", i):
            end = sql.find("\n", i)
            i = n if end < 0 else end + 1
            continue
        if sql.startswith("/*", i):
            end = sql.find("*/", i + 2)
            if end < 0:
                raise SqlParseError("unterminated block comment", sql, i)
            i = end + 2
            continue
        if ch == "'":
            text, i = _scan_quoted(sql, i, "'", "unterminated string literal")
            tokens.append(Token(TokenKind.STRING, text, i - len(text)))
            continue
        if ch == '"':
            text, i = _scan_quoted(sql, i, '"', "unterminated quoted identifier")
            tokens.append(Token(TokenKind.QUOTED_IDENT, text, i - len(text)))
            continue
        if ch == "`":
            text, i = _scan_quoted(sql, i, "`", "unterminated quoted identifier")
            tokens.append(Token(TokenKind.QUOTED_IDENT, text, i - len(text)))
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and sql[i + 1].isdigit()):
            start = i
            i = _scan_number(sql, i)
            tokens.append(Token(TokenKind.NUMBER, sql[start:i], start))
            continue
        if ch.isalpha() or ch == "_":
            start = i
            while i < n and (sql[i].isalnum() or sql[i] in "_$"):
                i += 1
            tokens.append(Token(TokenKind.WORD, sql[start:i], start))
            continue
        matched = False
        for op in _MULTI_CHAR_OPS:
            if sql.startswith(op, i):
                tokens.append(Token(TokenKind.OP, op, i))
                i += len(op)
                matched = True
                break
        if matched:
            continue
        if ch in _SINGLE_CHAR:
            tokens.append(Token(TokenKind.OP, ch, i))
            i += 1
            continue
        raise SqlParseError(f"unexpected character {ch!r}", sql, i)
    return tokens


def _scan_quoted(sql: str, start: int, quote: str, err: str) -> tuple[str, int]:
    """Scan a quoted region with doubled-quote escaping; returns (text, next index)."""
    i = start + 1
    n = len(sql)
    while i < n:
        if sql[i] == quote:
            if i + 1 < n and sql[i + 1] == quote:
                i += 2
                continue
            return sql[start : i + 1], i + 1
        i += 1
    raise SqlParseError(err, sql, start)


def _scan_number(sql: str, start: int) -> int:
    i, n = start, len(sql)
    if sql.startswith(("0x", "0X"), i):
        i += 2
        while i < n and sql[i] in "0123456789abcdefABCDEF":
            i += 1
        return i
    while i < n and sql[i].isdigit():
        i += 1
    if i < n and sql[i] == ".":
        i += 1
        while i < n and sql[i].isdigit():
            i += 1
    if i < n and sql[i] in "eE":
        j = i + 1
        if j < n and sql[j] in "+-":
            j += 1
        if j < n and sql[j].isdigit():
            i = j
            while i < n and sql[i].isdigit():
                i += 1
    return i


def parse_statement(sql: str) -> list[Token]:
    """Validate that sql is a single well-formed statement; returns its tokens.

    Checks: non-empty, known opening keyword, balanced parentheses, exactly one
    statement (trailing semicolons allowed). Trailing semicolons are stripped
    from the returned token list.
    """
    tokens = tokenize(sql)
    while tokens and tokens[-1].kind is TokenKind.OP and tokens[-1].text == ";":
        tokens.pop()
    if not tokens:
        raise SqlParseError("empty statement", sql)
    first = tokens[0]
    if first.kind is not TokenKind.WORD or first.text.upper() not in STATEMENT_STARTERS:
        raise SqlParseError(f"statement does not begin with a known keyword: {first.text!r}", sql, first.pos)
    depth = 0
    for tok in tokens:
        if tok.kind is TokenKind.OP:
            if tok.text == "(":
                depth += 1
            elif tok.text == ")":
                depth -= 1
                if depth < 0:
                    raise SqlParseError("unbalanced closing parenthesis", sql, tok.pos)
            elif tok.text == ";":
                raise SqlParseError("multiple statements in one input", sql, tok.pos)
    if depth != 0:
        raise SqlParseError("unbalanced opening parenthesis", sql)
    return tokens


def parses(sql: str) -> bool:
    """True if parse_statement accepts the text."""
    try:
        parse_statement(sql)
        return True
    except SqlParseError:
        return False


# Spacing rules for rendering a normalized token stream.
_NO_SPACE_BEFORE = {",", ")", ".", ";"}
_NO_SPACE_AFTER = {"(", "."}


def normalize_sql(sql: str, dialect: str = "ansi") -> str:
    """Render a statement in canonical form: keywords uppercased, whitespace
    collapsed, comments and trailing semicolon stripped.

    Identity-preserving only; identifiers, literals, and clause structure are
    untouched. Deterministic and idempotent, suitable as a dedupe key.
    """
    tokens = parse_statement(sql)
    parts: list[str] = []
    prev: Token | None = None
    for tok in tokens:
        text = tok.text
        if tok.kind is TokenKind.WORD and text.upper() in KEYWORDS:
            text = text.upper()
        if prev is None:
            parts.append(text)
        else:
            sep = " "
            if tok.kind is TokenKind.OP and tok.text in _NO_SPACE_BEFORE:
                sep = ""
            elif prev.kind is TokenKind.OP and prev.text in _NO_SPACE_AFTER:
                sep = ""
            elif tok.kind is TokenKind.OP and tok.text == "(" and prev.kind is TokenKind.WORD and prev.text.upper() not in KEYWORDS:
                sep = ""  # function-call style: count(*)
            parts.append(sep + text)
        prev = tok
    return "".join(parts)


def classify_statement(sql: str) -> StatementKind:
    """Classify a statement for the execution guardrail.

    Conservative: a read must open with SELECT/WITH/VALUES/EXPLAIN and contain
    no mutating keyword at any nesting depth (this also catches DML buried in
    CTEs). Anything not positively identified as a read or a known mutation is
    OTHER, which evaluation mode also rejects.
    """
    tokens = parse_statement(sql)
    starter = tokens[0].text.upper()
    words = {t.text.upper() for t in tokens if t.kind is TokenKind.WORD}
    if starter in {"SELECT", "WITH", "VALUES", "EXPLAIN"}:
        if words & MUTATING_KEYWORDS:
            return StatementKind.MUTATION
        return StatementKind.READ
    if starter in MUTATING_KEYWORDS:
        return StatementKind.MUTATION
    return StatementKind.OTHER


def has_top_level_order_by(sql: str) -> bool:
    """True if the statement has an ORDER BY outside any parentheses.

    An ORDER BY after a UNION/INTERSECT/EXCEPT is top-level (it orders the
    whole result); one inside a subquery is not.
    """
    tokens = parse_statement(sql)
    depth = 0
    for i, tok in enumerate(tokens):
        if tok.kind is TokenKind.OP:
            if tok.text == "(":
                depth += 1
            elif tok.text == ")":
                depth -= 1
        elif depth == 0 and tok.is_word("ORDER"):
            if i + 1 < len(tokens) and tokens[i + 1].is_word("BY"):
                return True
    return False


@dataclass(frozen=True)
class ColumnDef:
    name: str
    type: str


_CONSTRAINT_STARTERS = frozenset(
    "PRIMARY FOREIGN UNIQUE CHECK CONSTRAINT KEY EXCLUDE".split()
)
_COLUMN_TYPE_TERMINATORS = frozenset(
    "PRIMARY NOT NULL DEFAULT UNIQUE CHECK REFERENCES COLLATE GENERATED CONSTRAINT COMMENT AUTOINCREMENT".split()
)


def parse_create_table(ddl: str) -> tuple[str, list[ColumnDef]]:
    """Extract (table_name, column definitions) from a CREATE TABLE statement.

    Handles quoted and dotted names, skips table-level constraints, and joins
    multi-token types like VARCHAR(20). Raises SqlParseError if the statement
    is not a CREATE TABLE.
    """
    tokens = parse_statement(ddl)
    if not tokens[0].is_word("CREATE"):
        raise SqlParseError("not a CREATE statement", ddl, tokens[0].pos)
    idx = 1
    while idx < len(tokens) and not tokens[idx].is_word("TABLE"):
        idx += 1
    if idx >= len(tokens):
        raise SqlParseError("CREATE without TABLE", ddl)
    idx += 1
    # Skip IF NOT EXISTS.
    if idx + 2 < len(tokens) and tokens[idx].is_word("IF"):
        idx += 3
    name_parts: list[str] = []
    while idx < len(tokens) and tokens[idx].kind in (TokenKind.WORD, TokenKind.QUOTED_IDENT):
        name_parts.append(_unquote(tokens[idx]))
        if idx + 1 < len(tokens) and tokens[idx + 1].kind is TokenKind.OP and tokens[idx + 1].text == ".":
            idx += 2
        else:
            idx += 1
            break
    if not name_parts:
        raise SqlParseError("CREATE TABLE without a table name", ddl)
    table_name = ".".join(name_parts)
    if idx >= len(tokens) or tokens[idx].text != "(":
        raise SqlParseError("CREATE TABLE without a column list", ddl)

    # Split the parenthesized body on depth-1 commas.
    items: list[list[Token]] = [[]]
    depth = 0
    for tok in tokens[idx:]:
        if tok.kind is TokenKind.OP and tok.text == "(":
            depth += 1
            if depth == 1:
                continue
        elif tok.kind is TokenKind.OP and tok.text == ")":
            depth -= 1
            if depth == 0:
                break
        elif tok.kind is TokenKind.OP and tok.text == "," and depth == 1:
            items.append([])
            continue
        items[-1].append(tok)

    columns: list[ColumnDef] = []
    for item in items:
        if not item:
            continue
        head = item[0]
        if head.kind is TokenKind.WORD and head.text.upper() in _CONSTRAINT_STARTERS:
            continue
        col_name = _unquote(head)
        type_parts: list[str] = []
        for tok in item[1:]:
            if tok.kind is TokenKind.WORD and tok.text.upper() in _COLUMN_TYPE_TERMINATORS:
                break
            type_parts.append(tok.text)
        col_type = _join_type(type_parts)
        columns.append(ColumnDef(name=col_name, type=col_type))
    return table_name, columns


def _unquote(tok: Token) -> str:
    if tok.kind is TokenKind.QUOTED_IDENT:
        q = tok.text[0]
        return tok.text[1:-1].replace(q + q, q)
    return tok.text


def _join_type(parts: list[str]) -> str:
    out = ""
    for p in parts:
        if out and p not in ("(", ")", ",") and not out.endswith("("):
            out += " "
        out += p
    return out
