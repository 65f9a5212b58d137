"""Tri-modal SQL evaluation: execution comparison plus two judge-model modes.

EXE executes generated and gold SQL and compares canonical results. QSE asks a
judge model whether the generated SQL matches the question's intent. SSE asks
a judge model to compare generated and gold SQL structurally and semantically.
Per-item verdicts aggregate into a report with per-mode pass percentages.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import sqlexec
from .errors import ExecutionError, SqlorchError, TransportError
from .llm import ModelRef, Provider, complete_with_retries, render
from .retrieval import RetrievalContext

logger = logging.getLogger(__name__)

MODES = ("exe", "qse", "sse")

_VERDICT_RE = re.compile(r"VERDICT\s*:\s*(INCONSISTENT|CONSISTENT)", re.IGNORECASE)


@dataclass
class EvalItem:
    id: str
    query: str = ""
    sql_gen: str = ""
    sql_gold: str | None = None
    db_ref: str | None = None
    context: RetrievalContext | None = None


@dataclass
class Verdict:
    mode: str
    passed: bool
    rationale: str
    raw: str = ""
    skipped: bool = False
    parse_failed: bool = False

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "passed": self.passed,
            "rationale": self.rationale,
            "raw": self.raw,
            "skipped": self.skipped,
            "parse_failed": self.parse_failed,
        }


@dataclass
class EvalReport:
    counts: dict[str, dict[str, int]]
    percentages: dict[str, float | None]
    items: list[dict]
    method: str = "sqlorch"

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "counts": self.counts,
            "percentages": self.percentages,
            "items": self.items,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True, ensure_ascii=False)


@dataclass(frozen=True)
class VerdictParse:
    """Total parse of a judge response: consistent, inconsistent, or unparseable."""

    status: str  # consistent | inconsistent | unparseable
    rationale: str


def parse_verdict(text) -> VerdictParse:
    """Map any provider string to exactly one parse outcome. Never raises.

    The last VERDICT line wins; its trailing text (or, failing that, the full
    response) becomes the rationale.
    """
    if not isinstance(text, str):
        return VerdictParse(status="unparseable", rationale="non-text judge output")
    matches = list(_VERDICT_RE.finditer(text))
    if not matches:
        return VerdictParse(status="unparseable", rationale="no verdict line in judge output")
    last = matches[-1]
    status = "consistent" if last.group(1).upper() == "CONSISTENT" else "inconsistent"
    line_end = text.find("\n", last.end())
    tail = text[last.end() : line_end if line_end >= 0 else len(text)]
    rationale = tail.strip(" \t-—:.") or text.strip()
    return VerdictParse(status=status, rationale=rationale)


def exe_score(
    item: EvalItem,
    db: str,
    row_limit: int = sqlexec.DEFAULT_ROW_LIMIT,
    timeout_ms: int = sqlexec.DEFAULT_TIMEOUT_MS,
    order_policy: str = "gold_order_by",
) -> Verdict:
    """Execute generated and gold SQL and compare canonical results.

    A gold-side execution error marks the item skipped (dataset defect); a
    generated-side error is a plain fail with the engine diagnostic.
    """
    if not item.sql_gold:
        return Verdict(
            mode="exe", passed=False, rationale="no gold SQL for this item", skipped=True
        )
    # An unreachable database is a batch-level transport problem, not a
    # per-item verdict: abort rather than mislabel items as dataset defects.
    try:
        sqlexec.connect(db, read_only=True).close()
    except ExecutionError as exc:
        raise TransportError(f"evaluation database unreachable: {exc}") from exc
    try:
        gold_result = sqlexec.execute_sql(
            item.sql_gold, db, row_limit=row_limit, timeout_ms=timeout_ms, mode="evaluation"
        )
    except ExecutionError as exc:
        return Verdict(
            mode="exe",
            passed=False,
            rationale=f"dataset defect: gold SQL failed to execute: {exc}",
            skipped=True,
        )
    try:
        gen_result = sqlexec.execute_sql(
            item.sql_gen, db, row_limit=row_limit, timeout_ms=timeout_ms, mode="evaluation"
        )
    except ExecutionError as exc:
        return Verdict(mode="exe", passed=False, rationale=f"generated SQL failed: {exc}")

    order_sensitive = sqlexec.order_sensitive_for(item.sql_gold, order_policy)
    equal, detail = sqlexec.results_equal(gen_result, gold_result, order_sensitive)
    raw = json.dumps(
        {
            "gen": [list(r) for r in sqlexec.canonicalize(gen_result, order_sensitive)],
            "gold": [list(r) for r in sqlexec.canonicalize(gold_result, order_sensitive)],
            "order_sensitive": order_sensitive,
        },
        ensure_ascii=False,
    )
    return Verdict(mode="exe", passed=equal, rationale=detail, raw=raw)


def _judged_score(
    mode: str,
    template_id: str,
    variables: dict[str, str],
    model: ModelRef,
    llm: Provider,
    retries: int = 2,
    backoff_base_s: float = 0.5,
) -> Verdict:
    """Shared QSE/SSE flow: prompt, parse, one repair round-trip, conservative fail."""
    prompt = render(template_id, variables)
    try:
        completion = complete_with_retries(
            llm, model, prompt, retries=retries, backoff_base_s=backoff_base_s
        )
    except TransportError as exc:
        return Verdict(mode=mode, passed=False, rationale=f"judge unavailable: {exc}", skipped=True)

    parsed = parse_verdict(completion.text)
    raw = completion.text
    if parsed.status == "unparseable":
        repair_prompt = render("verdict_repair_v1", {"previous": completion.text})
        try:
            repair = complete_with_retries(
                llm, model, repair_prompt, retries=retries, backoff_base_s=backoff_base_s
            )
        except TransportError as exc:
            return Verdict(
                mode=mode, passed=False, rationale=f"judge unavailable: {exc}", skipped=True
            )
        parsed = parse_verdict(repair.text)
        raw = repair.text
    if parsed.status == "unparseable":
        return Verdict(
            mode=mode,
            passed=False,
            rationale="unparseable judge output",
            raw=raw,
            parse_failed=True,
        )
    return Verdict(
        mode=mode,
        passed=parsed.status == "consistent",
        rationale=parsed.rationale,
        raw=raw,
    )


def qse_score(
    item: EvalItem,
    model: ModelRef,
    llm: Provider,
    retries: int = 2,
    backoff_base_s: float = 0.5,
) -> Verdict:
    """Judge whether the generated SQL matches the question's intent."""
    if not item.query:
        return Verdict(mode="qse", passed=False, rationale="no query for this item", skipped=True)
    context_text = item.context.rendered if item.context is not None else "none"
    return _judged_score(
        "qse",
        "judge_qse_v1",
        {"query": item.query, "sql": item.sql_gen, "context": context_text},
        model,
        llm,
        retries=retries,
        backoff_base_s=backoff_base_s,
    )


def sse_score(
    item: EvalItem,
    model: ModelRef,
    llm: Provider,
    retries: int = 2,
    backoff_base_s: float = 0.5,
) -> Verdict:
    """Judge structural and semantic equivalence of generated vs gold SQL."""
    if not item.sql_gold:
        return Verdict(
            mode="sse", passed=False, rationale="no gold SQL for this item", skipped=True
        )
    return _judged_score(
        "sse",
        "judge_sse_v1",
        {"sql_gen": item.sql_gen, "sql_gold": item.sql_gold},
        model,
        llm,
        retries=retries,
        backoff_base_s=backoff_base_s,
    )


def evaluate_dataset(
    items: list[EvalItem],
    modes: tuple[str, ...] = MODES,
    db: str | None = None,
    judge_models: dict[str, ModelRef] | None = None,
    llm: Provider | None = None,
    parallelism: int = 1,
    row_limit: int = sqlexec.DEFAULT_ROW_LIMIT,
    timeout_ms: int = sqlexec.DEFAULT_TIMEOUT_MS,
    order_policy: str = "gold_order_by",
    method: str = "sqlorch",
) -> EvalReport:
    """Score every item in every requested mode and aggregate.

    Items missing a mode's required fields are counted skipped for that mode.
    Per-item failures become failed or skipped verdicts, never batch failures.
    The report is a deterministic fold in item order however the per-item
    evaluation is scheduled.
    """
    modes = tuple(m.lower() for m in modes)
    for m in modes:
        if m not in MODES:
            raise SqlorchError(f"unknown evaluation mode '{m}'")
    judge_models = judge_models or {}

    def eval_item(item: EvalItem) -> list[Verdict]:
        verdicts = []
        for mode in modes:
            if mode == "exe":
                item_db = item.db_ref or db
                if not item_db or not item.sql_gold:
                    verdicts.append(
                        Verdict(
                            mode="exe",
                            passed=False,
                            rationale="missing gold SQL or database reference",
                            skipped=True,
                        )
                    )
                    continue
                verdicts.append(
                    exe_score(
                        item,
                        item_db,
                        row_limit=row_limit,
                        timeout_ms=timeout_ms,
                        order_policy=order_policy,
                    )
                )
            elif mode == "qse":
                model = judge_models.get("qse")
                if model is None or llm is None or not item.query:
                    verdicts.append(
                        Verdict(
                            mode="qse",
                            passed=False,
                            rationale="missing query or judge model",
                            skipped=True,
                        )
                    )
                    continue
                verdicts.append(qse_score(item, model, llm))
            else:
                model = judge_models.get("sse")
                if model is None or llm is None or not item.sql_gold:
                    verdicts.append(
                        Verdict(
                            mode="sse",
                            passed=False,
                            rationale="missing gold SQL or judge model",
                            skipped=True,
                        )
                    )
                    continue
                verdicts.append(sse_score(item, model, llm))
        return verdicts

    if parallelism > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            all_verdicts = list(pool.map(eval_item, items))
    else:
        all_verdicts = [eval_item(item) for item in items]

    counts = {m: {"passed": 0, "failed": 0, "skipped": 0} for m in modes}
    report_items = []
    for item, verdicts in zip(items, all_verdicts):
        for v in verdicts:
            if v.skipped:
                counts[v.mode]["skipped"] += 1
            elif v.passed:
                counts[v.mode]["passed"] += 1
            else:
                counts[v.mode]["failed"] += 1
        report_items.append({"id": item.id, "verdicts": [v.as_dict() for v in verdicts]})

    percentages: dict[str, float | None] = {}
    for m in modes:
        denom = counts[m]["passed"] + counts[m]["failed"]
        percentages[m] = round(100.0 * counts[m]["passed"] / denom, 1) if denom else None

    return EvalReport(counts=counts, percentages=percentages, items=report_items, method=method)


def render_report_table(report: EvalReport) -> str:
    """Aligned text table with the same row shape as the offline-evaluation
    tables: one method row, EXE/QSE/SSE percentage columns."""
    headers = ["Method", "EXE (%)", "QSE (%)", "SSE (%)"]
    pct = {m: report.percentages.get(m) for m in MODES}
    row = [report.method] + [("-" if pct[m] is None else f"{pct[m]:.1f}") for m in MODES]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    sep = "-+-".join("-" * w for w in widths)
    head = " | ".join(h.ljust(w) for h, w in zip(headers, widths))
    body = " | ".join(v.ljust(w) for v, w in zip(row, widths))
    counts_lines = []
    for m in MODES:
        if m in report.counts:
            c = report.counts[m]
            counts_lines.append(
                f"{m.upper()}: passed={c['passed']} failed={c['failed']} skipped={c['skipped']}"
            )
    return "\n".join([head, sep, body, "", *counts_lines])


def load_eval_items(path: str) -> list[EvalItem]:
    """Eval dataset JSONL: {id, query, sql_gen?, sql_gold?, db_ref?}."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            items.append(
                EvalItem(
                    id=str(row["id"]),
                    query=row.get("query", ""),
                    sql_gen=row.get("sql_gen", ""),
                    sql_gold=row.get("sql_gold"),
                    db_ref=row.get("db_ref"),
                )
            )
    return items
