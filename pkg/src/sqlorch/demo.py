"""Bundled end-to-end demo: the best-selling-products scenario on a miniature
trade database, with every model call replayed from a pinned cassette.

Running it twice produces byte-identical artifacts: retrieval context, plan,
outcome, trace, and evaluation report. The cassette was recorded once from the
scripted rules below (scripts/record_demo_cassette.py refreshes it when
templates or assets change).
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from . import judge, retrieval, sqlexec, workflow
from .llm import CassetteProvider, ModelRef, Provider, ScriptedProvider

DEMO_QUERY = (
    "Which products sold best for our own stores and for competitors over the last six months?"
)

PLANNER = ModelRef(provider_name="demo", model_id="demo-planner")
SQLGEN = ModelRef(provider_name="demo", model_id="demo-sqlgen")
SUMMARIZER = ModelRef(provider_name="demo", model_id="demo-summarizer")
JUDGE = ModelRef(provider_name="demo", model_id="demo-judge")

_PLAN_JSON = """Here is the decomposition.

```json
[
  {"task_id": "own_sales", "instruction": "Rank our own-store products by total units sold in the window 2025-01-01 to 2025-06-30 and keep the top 3.", "depends_on": [], "kind": "sql"},
  {"task_id": "competitor_sales", "instruction": "Rank competitor-owned products by total units sold in the window 2025-01-01 to 2025-06-30 and keep the top 3.", "depends_on": [], "kind": "sql"},
  {"task_id": "compare", "instruction": "Compare the own-store and competitor best sellers and name the stronger category overall.", "depends_on": ["own_sales", "competitor_sales"], "kind": "reasoning"}
]
```"""

_OWN_SQL = """SELECT p.name, SUM(o.quantity) AS units
FROM orders o
JOIN products p ON p.product_id = o.product_id
JOIN merchants m ON m.merchant_id = p.merchant_id
WHERE m.is_competitor = 0 AND o.order_date BETWEEN '2025-01-01' AND '2025-06-30'
GROUP BY p.name
ORDER BY units DESC
LIMIT 3"""

_COMPETITOR_SQL = _OWN_SQL.replace("is_competitor = 0", "is_competitor = 1")

_COMPARE_TEXT = (
    "Outdoor gear leads on both sides: the Solar Garden Lantern tops our list at 46 units "
    "while LED String Lights top the competitor list at 52 units."
)

_SUMMARY_TEXT = (
    "Our best seller over the last six months was the Solar Garden Lantern (46 units), ahead of "
    "the Folding Camp Chair (31) and the Bamboo Cutlery Set (25). Competitors were led by LED "
    "String Lights (52 units), then the Steel Thermos Flask (38) and the Canvas Tote Bag (20). "
    "Outdoor products dominate both lists."
)


def demo_scripted_rules() -> list[tuple[str, str]]:
    """Ordered regex-to-response rules that stand in for every demo model call.

    Used to record the pinned cassette; kept here so the recording is
    reproducible. Order matters: the reasoning task's prompt embeds the sql
    tasks' instructions, so its rule comes first.
    """
    return [
        (r"planning assistant for a data-analysis system", _PLAN_JSON),
        (r"Compare the own-store", _COMPARE_TEXT),
        (r"own-store products", _OWN_SQL),
        (r"competitor-owned products", _COMPETITOR_SQL),
        (r"Answer the user's question using the task results", _SUMMARY_TEXT),
        # QSE verdicts, keyed on the audited question.
        (
            r"auditing a generated SQL.*List competitor merchant names",
            "The statement selects competitor merchant names and sorts them alphabetically, "
            "exactly as asked.\nVERDICT: CONSISTENT",
        ),
        (
            r"auditing a generated SQL.*at least 100 lifetime sales",
            "sales is an integer counter, so filtering with > 99 returns precisely the products "
            "with at least 100 sales.\nVERDICT: CONSISTENT",
        ),
        (
            r"auditing a generated SQL.*How many competitor merchants",
            "Counting merchants flagged as competitors answers the question directly."
            "\nVERDICT: CONSISTENT",
        ),
        (
            r"auditing a generated SQL.*Total revenue from kitchen products",
            "The statement sums order quantities over every order; the question asks for revenue "
            "restricted to kitchen products.\nVERDICT: INCONSISTENT",
        ),
        # SSE verdicts, keyed on a fragment unique to each generated statement.
        (
            r"comparing two SQL statements.*select name from merchants",
            "Identical projection, filter, and ordering; only keyword case differs."
            "\nVERDICT: CONSISTENT",
        ),
        (
            r"comparing two SQL statements.*sales > 99",
            "Both join products to product_stats and filter the integer sales column; > 99 and "
            ">= 100 select the same rows.\nVERDICT: CONSISTENT",
        ),
        (
            r"comparing two SQL statements.*COUNT\(\*\) FROM merchants",
            "The statements are identical.\nVERDICT: CONSISTENT",
        ),
        (
            r"comparing two SQL statements.*SUM\(quantity\) FROM orders",
            "Different tables, aggregates, and filters; these cannot be equivalent."
            "\nVERDICT: INCONSISTENT",
        ),
    ]


def _assets_dir():
    return resources.files("sqlorch").joinpath("demo_assets")


def bundled_cassette_path() -> Path:
    return Path(str(_assets_dir().joinpath("demo_cassette.jsonl")))


def _copy_asset(name: str, out_dir: Path) -> Path:
    target = out_dir / name
    target.write_text(_assets_dir().joinpath(name).read_text(encoding="utf-8"), encoding="utf-8")
    return target


def _dump_json(payload: dict, path: Path) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def run_demo(
    out_dir: str | Path,
    record: bool = False,
    cassette_path: str | Path | None = None,
) -> dict:
    """Run the bundled scenario end to end; artifacts land under out_dir.

    record=True re-records the cassette from the scripted rules instead of
    replaying; everything else is identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cassette = Path(cassette_path) if cassette_path is not None else bundled_cassette_path()

    seed_path = _copy_asset("seed_trade.sql", out)
    knowledge_path = _copy_asset("knowledge.jsonl", out)
    tablehub_path = _copy_asset("tablehub.jsonl", out)
    eval_path = _copy_asset("eval_items.jsonl", out)

    db_path = out / "trade.db"
    sqlexec.apply_fixture(seed_path, db_path)

    index = retrieval.Index.build(
        retrieval.load_knowledge_jsonl(knowledge_path),
        retrieval.load_tablehub_jsonl(tablehub_path),
    )
    index.save(out / "index.jsonl")
    context = index.retrieve(DEMO_QUERY, k_knowledge=4, k_schema=3)
    _dump_json(context.as_dict(), out / "context.json")

    if record:
        if cassette.exists():
            cassette.unlink()
        provider: Provider = CassetteProvider(
            cassette, mode="record", inner=ScriptedProvider(demo_scripted_rules())
        )
    else:
        provider = CassetteProvider(cassette, mode="replay")

    plan = workflow.plan(DEMO_QUERY, context, PLANNER, provider)
    _dump_json(plan.as_dict(), out / "plan.json")

    outcome = workflow.execute(
        plan,
        SQLGEN,
        provider,
        db=str(db_path),
        parallelism=1,
        summary_model=SUMMARIZER,
        summary_mode="llm",
    )
    _dump_json(outcome.as_dict(), out / "outcome.json")
    (out / "trace.jsonl").write_text(outcome.trace_jsonl(), encoding="utf-8")

    items = judge.load_eval_items(str(eval_path))
    report = judge.evaluate_dataset(
        items,
        modes=("exe", "qse", "sse"),
        db=str(db_path),
        judge_models={"qse": JUDGE, "sse": JUDGE},
        llm=provider,
        method="sqlorch-demo",
    )
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(judge.render_report_table(report) + "\n", encoding="utf-8")

    return {
        "answer": outcome.answer,
        "tasks": len(plan.tasks),
        "partial_failure": outcome.partial_failure,
        "percentages": report.percentages,
        "artifacts": sorted(p.name for p in out.iterdir()),
    }
