"""Acceptance suite: one test per release criterion, each printing a PASS line.

Every expected value here is either trivial arithmetic or produced by an
independent oracle implemented inside the test (brute-force execution,
exhaustive scan, recomputation) rather than by the code under test.
"""

import json
import random
import sqlite3
import string
import time

import numpy as np
import pytest

from sqlorch import corpus, judge, retrieval, workflow
from sqlorch.demo import run_demo
from sqlorch.judge import EvalItem, evaluate_dataset, parse_verdict
from sqlorch.llm import Completion, ModelRef, ScriptedProvider
from sqlorch.retrieval import Index, KnowledgeDoc
from sqlorch.workflow import TaskNode, WorkflowPlan, execute, plan

MODEL = ModelRef(provider_name="test", model_id="acceptance")


def _ok(name):
    print(f"ACCEPTANCE {name}: PASS")


# ---------------------------------------------------------------------------
# End-to-end determinism
# ---------------------------------------------------------------------------


def test_demo_determinism(tmp_path):
    started = time.monotonic()
    run_demo(tmp_path / "first")
    run_demo(tmp_path / "second")
    elapsed = time.monotonic() - started

    compared = 0
    for artifact in sorted((tmp_path / "first").iterdir()):
        if artifact.suffix not in (".json", ".jsonl", ".txt", ".sql"):
            continue
        twin = tmp_path / "second" / artifact.name
        assert artifact.read_bytes() == twin.read_bytes(), f"{artifact.name} differs between runs"
        compared += 1
    assert compared >= 8
    assert elapsed < 10.0, f"demo pair took {elapsed:.1f}s"
    _ok(f"end-to-end determinism ({compared} artifacts byte-identical, {elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# EXE oracle suite
# ---------------------------------------------------------------------------

# (sql_gen, sql_gold, equivalent?) — labels confirmed by the brute-force
# oracle below; order sensitivity follows the gold statement's ORDER BY.
EXE_PAIRS = [
    # equivalent
    ("SELECT p.name FROM products p JOIN product_stats s ON s.product_id = p.product_id WHERE s.sales > 99",
     "SELECT p.name FROM products p JOIN product_stats s ON s.product_id = p.product_id WHERE s.sales >= 100", True),
    ("SELECT name FROM merchants WHERE is_competitor = 1",
     "SELECT name FROM merchants WHERE is_competitor = 1", True),
    ("select  name   from merchants where is_competitor = 1",
     "SELECT name FROM merchants WHERE is_competitor = 1", True),
    ("SELECT name FROM merchants WHERE is_competitor = 1 -- competitors only",
     "SELECT name FROM merchants WHERE is_competitor = 1", True),
    ("SELECT name FROM merchants WHERE is_competitor = 1;",
     "SELECT name FROM merchants WHERE is_competitor = 1", True),
    ("SELECT name FROM products WHERE category = 'kitchen' AND unit_price > 10",
     "SELECT name FROM products WHERE unit_price > 10 AND category = 'kitchen'", True),
    ("SELECT p.name FROM products p, merchants m WHERE m.merchant_id = p.merchant_id AND m.is_competitor = 1",
     "SELECT p.name FROM products p JOIN merchants m ON m.merchant_id = p.merchant_id WHERE m.is_competitor = 1", True),
    ("SELECT name FROM products WHERE merchant_id = 2 OR merchant_id = 3",
     "SELECT name FROM products WHERE merchant_id IN (2, 3)", True),
    ("SELECT order_id FROM orders WHERE quantity >= 10 AND quantity <= 20",
     "SELECT order_id FROM orders WHERE quantity BETWEEN 10 AND 20", True),
    ("SELECT name AS product_title FROM products",
     "SELECT name AS n FROM products", True),
    ("SELECT DISTINCT category FROM products",
     "SELECT category FROM products GROUP BY category", True),
    ("SELECT name FROM products WHERE merchant_id IN (SELECT merchant_id FROM merchants WHERE is_competitor = 0)",
     "SELECT p.name FROM products p JOIN merchants m ON m.merchant_id = p.merchant_id WHERE m.is_competitor = 0", True),
    ("SELECT name FROM products WHERE category = 'kitchen' UNION ALL SELECT name FROM products WHERE category <> 'kitchen'",
     "SELECT name FROM products", True),
    ("SELECT name FROM merchants WHERE 1 = 1 AND is_competitor = 0",
     "SELECT name FROM merchants WHERE is_competitor = 0", True),
    ("SELECT CAST(quantity AS REAL) FROM orders WHERE order_id = 1",
     "SELECT quantity FROM orders WHERE order_id = 1", True),
    ("SELECT m.name, p.name FROM merchants m JOIN products p ON p.merchant_id = m.merchant_id",
     "SELECT m.name, p.name FROM products p JOIN merchants m ON p.merchant_id = m.merchant_id", True),
    ("SELECT name FROM merchants ORDER BY name",
     "SELECT name FROM merchants ORDER BY name ASC", True),
    # inequivalent
    ("SELECT p.name FROM products p JOIN product_stats s ON s.product_id = p.product_id WHERE s.sales > 100",
     "SELECT p.name FROM products p JOIN product_stats s ON s.product_id = p.product_id WHERE s.sales >= 100", False),
    ("SELECT name FROM merchants",
     "SELECT name FROM merchants WHERE is_competitor = 1", False),
    ("SELECT name FROM merchants WHERE is_competitor = 1",
     "SELECT name FROM products WHERE merchant_id = 2", False),
    ("SELECT COUNT(quantity) FROM orders",
     "SELECT SUM(quantity) FROM orders", False),
    ("SELECT category, name FROM products WHERE product_id = 101",
     "SELECT name, category FROM products WHERE product_id = 101", False),
    ("SELECT name, category FROM products WHERE product_id = 101",
     "SELECT name FROM products WHERE product_id = 101", False),
    ("SELECT name FROM merchants ORDER BY name DESC",
     "SELECT name FROM merchants ORDER BY name", False),
    ("SELECT name FROM products ORDER BY product_id LIMIT 3",
     "SELECT name FROM products ORDER BY product_id LIMIT 4", False),
    ("SELECT name FROM products WHERE category = 'outdoor'",
     "SELECT name FROM products WHERE category = 'kitchen'", False),
    ("SELECT COUNT(category) FROM products",
     "SELECT COUNT(DISTINCT category) FROM products", False),
    ("SELECT m.name FROM merchants m JOIN competitors c ON c.merchant_id = m.merchant_id",
     "SELECT m.name FROM merchants m LEFT JOIN competitors c ON c.merchant_id = m.merchant_id", False),
    ("SELECT name FROM merchants WHERE is_competitor != 1",
     "SELECT name FROM merchants WHERE is_competitor = 1", False),
    ("SELECT category, COUNT(*) FROM products GROUP BY category",
     "SELECT merchant_id, COUNT(*) FROM products GROUP BY merchant_id", False),
    ("SELECT category FROM products GROUP BY category HAVING COUNT(*) > 2",
     "SELECT category FROM products GROUP BY category HAVING COUNT(*) > 1", False),
    ("SELECT order_id FROM orders WHERE order_date < '2025-06-24'",
     "SELECT order_id FROM orders WHERE order_date <= '2025-06-24'", False),
]


def _oracle_rows(db_path, sql):
    conn = sqlite3.connect(db_path)
    try:
        rows = conn.execute(sql).fetchall()
    finally:
        conn.close()
    # Independent normalization: all numbers through float, then repr rows.
    return [tuple(float(v) if isinstance(v, (int, float)) else v for v in row) for row in rows]


def _oracle_has_order_by(sql):
    # Independent of the package tokenizer: strip strings, then scan for
    # ORDER BY at parenthesis depth zero.
    depth = 0
    in_string = False
    cleaned = []
    i = 0
    while i < len(sql):
        ch = sql[i]
        if in_string:
            if ch == "'":
                in_string = False
            i += 1
            continue
        if ch == "'":
            in_string = True
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif depth == 0:
            cleaned.append(ch)
        i += 1
    return "ORDER BY" in "".join(cleaned).upper()


def test_exe_oracle_suite(trade_db):
    assert len(EXE_PAIRS) >= 30
    # Fixture breadth: the criterion wants at least five tables.
    conn = sqlite3.connect(trade_db)
    tables = conn.execute("SELECT name FROM sqlite_master WHERE type = 'table'").fetchall()
    conn.close()
    assert len(tables) >= 5

    agreements = 0
    for sql_gen, sql_gold, intended in EXE_PAIRS:
        order_sensitive = _oracle_has_order_by(sql_gold)
        gen_rows = _oracle_rows(trade_db, sql_gen)
        gold_rows = _oracle_rows(trade_db, sql_gold)
        if order_sensitive:
            oracle_equal = gen_rows == gold_rows
        else:
            oracle_equal = sorted(map(repr, gen_rows)) == sorted(map(repr, gold_rows))
        assert oracle_equal == intended, f"fixture drift: oracle disagrees with label for {sql_gen!r}"

        verdict = judge.exe_score(
            EvalItem(id="pair", sql_gen=sql_gen, sql_gold=sql_gold), trade_db
        )
        assert not verdict.skipped
        assert verdict.passed == oracle_equal, (
            f"exe_score={verdict.passed} oracle={oracle_equal} for {sql_gen!r}: {verdict.rationale}"
        )
        agreements += 1
    assert agreements == len(EXE_PAIRS)
    _ok(f"EXE oracle suite ({agreements}/{agreements} agreement incl. integer threshold pair)")


# ---------------------------------------------------------------------------
# EXE rewrite invariance
# ---------------------------------------------------------------------------


def _random_fixture_query(rng):
    table, columns = rng.choice(
        [
            ("merchants", ["merchant_id", "name", "is_competitor", "country"]),
            ("products", ["product_id", "merchant_id", "name", "category", "unit_price"]),
            ("orders", ["order_id", "product_id", "quantity", "amount", "order_date"]),
            ("competitors", ["competitor_id", "merchant_id", "region", "tier"]),
            ("product_stats", ["stat_id", "product_id", "sales", "revenue"]),
        ]
    )
    cols = rng.sample(columns, rng.randint(1, min(3, len(columns))))
    sql = f"SELECT {', '.join(cols)} FROM {table}"
    if rng.random() < 0.6:
        numeric = [c for c in columns if c.endswith("_id") or c in ("quantity", "sales", "tier", "is_competitor")]
        col = rng.choice(numeric)
        sql += f" WHERE {col} {rng.choice(['>', '>=', '<', '<=', '='])} {rng.randint(0, 150)}"
    if rng.random() < 0.3:
        sql += f" ORDER BY {cols[0]}"
    return sql


def _normalize_class_rewrite(sql, rng):
    """Apply the inverse of the normalizer's transforms: keyword-case noise,
    whitespace noise, inserted comments, trailing semicolon."""
    from sqlorch import sqltext

    tokens = sqltext.tokenize(sql)
    parts = []
    for tok in tokens:
        text = tok.text
        if tok.kind is sqltext.TokenKind.WORD and text.upper() in sqltext.KEYWORDS:
            text = rng.choice([text.upper(), text.lower(), text.capitalize()])
        parts.append(text)
        if rng.random() < 0.15:
            parts.append("/* noise */")
    mangled = (" " * rng.randint(1, 3)).join(parts)
    if rng.random() < 0.5:
        mangled += " -- trailing note"
        mangled = mangled + "\n;" if rng.random() < 0.5 else mangled
    elif rng.random() < 0.5:
        mangled += ";"
    return mangled


def test_exe_rewrite_invariance(trade_db):
    rng = random.Random(20250810)
    flips = 0
    checked = 0
    for _ in range(100):
        gold = _random_fixture_query(rng)
        baseline = judge.exe_score(EvalItem(id="b", sql_gen=gold, sql_gold=gold), trade_db)
        assert baseline.passed, gold
        rewritten = _normalize_class_rewrite(gold, rng)
        verdict = judge.exe_score(EvalItem(id="r", sql_gen=rewritten, sql_gold=gold), trade_db)
        if not verdict.passed:
            flips += 1
            print(f"FLIP: {rewritten!r} vs {gold!r}: {verdict.rationale}")
        checked += 1
    assert checked == 100
    assert flips == 0
    _ok("EXE rewrite invariance (100 queries, 0 flips)")


# ---------------------------------------------------------------------------
# Scheduler soundness and equivalence
# ---------------------------------------------------------------------------


def _random_dag(rng, max_nodes=10):
    n = rng.randint(1, max_nodes)
    tasks = []
    for i in range(n):
        deps = tuple(f"t{j}" for j in range(i) if rng.random() < 0.35)
        tasks.append(TaskNode(task_id=f"t{i}", instruction=f"step {i}", depends_on=deps))
    return tasks


def _check_trace(trace, tasks):
    done_at = {e.task_id: e.ts for e in trace if e.event == "task_done"}
    for event in trace:
        if event.event != "task_start":
            continue
        node = next(t for t in tasks if t.task_id == event.task_id)
        for dep in node.depends_on:
            assert dep in done_at and done_at[dep] < event.ts, (
                f"{event.task_id} started before dependency {dep} finished"
            )


@pytest.fixture(scope="module")
def scratch_db(tmp_path_factory):
    db = tmp_path_factory.mktemp("sched") / "scratch.db"
    conn = sqlite3.connect(db)
    conn.execute("CREATE TABLE one (x INTEGER)")
    conn.execute("INSERT INTO one VALUES (1)")
    conn.commit()
    conn.close()
    return str(db)


def test_scheduler_soundness(scratch_db):
    rng = random.Random(42)
    context = Index.build([], []).retrieve("scheduler")

    class LatencyProvider:
        def complete(self, model, prompt):
            time.sleep(rng.uniform(0, 0.0015))
            return Completion(text="SELECT x FROM one")

    started = time.monotonic()
    runs = 0
    for i in range(1000):
        tasks = _random_dag(rng)
        p = WorkflowPlan(query="q", context=context, tasks=tasks, max_tasks=10)
        parallelism = (1, 2, 4)[i % 3]
        outcome = execute(p, MODEL, LatencyProvider(), db=scratch_db, parallelism=parallelism)
        assert len(outcome.task_results) == len(tasks), "not every task reached a terminal state"
        assert all(r.error is None for r in outcome.task_results.values())
        _check_trace(outcome.trace, tasks)
        runs += 1
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"scheduler soundness took {elapsed:.1f}s"
    _ok(f"scheduler soundness (1000 DAGs, parallelism 1/2/4, {elapsed:.1f}s)")


def test_scheduler_equivalence(scratch_db):
    rng = random.Random(42)
    context = Index.build([], []).retrieve("scheduler")
    provider = ScriptedProvider([(r"step (\d+)", "SELECT x FROM one")])

    for _ in range(1000):
        tasks = _random_dag(rng)
        p = WorkflowPlan(query="q", context=context, tasks=tasks, max_tasks=10)
        serial = execute(p, MODEL, provider, db=scratch_db, parallelism=1)
        wide = execute(p, MODEL, provider, db=scratch_db, parallelism=4)

        def result_set(outcome):
            return {
                (tid, r.sql, r.error, tuple(map(tuple, r.result.rows)) if r.result else None)
                for tid, r in outcome.task_results.items()
            }

        assert result_set(serial) == result_set(wide)
    _ok("scheduler equivalence (1000 DAGs, parallelism 1 == 4)")


# ---------------------------------------------------------------------------
# Retrieval exactness
# ---------------------------------------------------------------------------


def test_retrieval_exactness():
    rng = random.Random(7)
    vocab = [
        "order", "shipment", "invoice", "customs", "tariff", "product", "merchant",
        "quota", "revenue", "units", "export", "import", "category", "price",
    ]
    docs = [
        KnowledgeDoc(
            id=f"d{i:04d}",
            title=f"note {i}",
            body=" ".join(rng.choice(vocab) for _ in range(rng.randint(5, 15))),
        )
        for i in range(1000)
    ]
    index = Index.build(docs, [])

    # Oracle: exhaustive scan with an independently computed cosine.
    doc_vectors = {doc.id: retrieval.embed(retrieval._doc_text(doc)) for doc in docs}

    checked = 0
    for _ in range(100):
        query = " ".join(rng.choice(vocab) for _ in range(rng.randint(2, 6)))
        qv = retrieval.embed(query)
        scored = []
        for doc_id, dv in doc_vectors.items():
            cosine = float(np.dot(qv, dv) / (np.linalg.norm(qv) * np.linalg.norm(dv)))
            scored.append((doc_id, cosine))
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        for k in (1, 3, 10):
            expected = [doc_id for doc_id, _ in scored[:k]]
            got = [doc_id for doc_id, _ in index.retrieve(query, k_knowledge=k).knowledge_hits]
            assert got == expected, f"k={k} query={query!r}"
        checked += 1
    assert checked == 100
    _ok("retrieval exactness (1000 docs, 100 queries, k in {1,3,10})")


# ---------------------------------------------------------------------------
# Corpus pipeline integrity
# ---------------------------------------------------------------------------


def test_corpus_pipeline_integrity(tmp_path):
    rng = random.Random(11)
    rows = []
    for i in range(500):
        roll = rng.random()
        if roll < 0.08:
            rows.append({"sql": f"SELEC broken {i}", "comment": f"bad {i}"})
        elif roll < 0.16:
            rows.append({"sql": f"SELECT {i} FROM t", "comment": "   "})
        elif roll < 0.40:
            base = rng.randint(0, 40)  # deliberate duplicates after normalization
            rows.append({"sql": f"select  col_{base} from t;", "comment": f"dup {i}"})
        else:
            rows.append({"sql": f"SELECT col_{i} FROM t WHERE k = {i}", "comment": f"row {i}"})
    src = tmp_path / "records.jsonl"
    with open(src, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")

    records, stats = corpus.ingest_sql_comments([src])
    assert stats.read == 500
    assert stats.kept == len(records)
    assert stats.kept == stats.read - stats.rejected_parse - stats.rejected_empty
    assert stats.rejected_parse > 0 and stats.rejected_empty > 0

    deduped = corpus.dedupe(records)
    assert corpus.dedupe(deduped) == deduped
    assert len(deduped) <= len(records)

    out = tmp_path / "sft.jsonl"
    examples = corpus.build_revllm_sft(deduped, out_path=out)
    lines = out.read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(deduped) == len(examples)
    assert corpus.read_sft_file(out) == examples
    _ok(
        f"corpus pipeline integrity (500 -> kept {stats.kept} -> deduped {len(deduped)}, "
        "round-trip identity)"
    )


# ---------------------------------------------------------------------------
# Judge-parser totality fuzz
# ---------------------------------------------------------------------------


def test_judge_parser_totality_fuzz():
    rng = random.Random(99)
    alphabet = string.printable + "VERDICT:CONSISTENTé中文 "
    outcomes = set()
    for i in range(10_000):
        if i % 7 == 0:
            text = "VERDICT:" + "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 40)))
        elif i % 13 == 0:
            text = "".join(rng.choice(["VERDICT", ":", "IN", "CONSISTENT", " ", "\n"]) for _ in range(rng.randint(1, 12)))
        else:
            text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 80)))
        parsed = parse_verdict(text)
        if parsed.status == "consistent":
            outcomes.add("passed")
        elif parsed.status == "inconsistent":
            outcomes.add("failed")
        else:
            outcomes.add("failed-with-parse-flag")
        assert parsed.status in ("consistent", "inconsistent", "unparseable")
    assert outcomes <= {"passed", "failed", "failed-with-parse-flag"}
    assert "failed-with-parse-flag" in outcomes  # random text mostly lands here
    _ok("judge-parser totality fuzz (10000 strings, no crash)")


# ---------------------------------------------------------------------------
# Report arithmetic
# ---------------------------------------------------------------------------


def test_report_arithmetic(trade_db):
    rng = random.Random(5)
    for round_no in range(30):
        items = []
        for i in range(rng.randint(1, 40)):
            roll = rng.random()
            if roll < 0.5:
                items.append(EvalItem(id=f"{round_no}-{i}", sql_gen="SELECT 1", sql_gold="SELECT 1"))
            elif roll < 0.8:
                items.append(EvalItem(id=f"{round_no}-{i}", sql_gen="SELECT 1", sql_gold="SELECT 2"))
            else:
                items.append(EvalItem(id=f"{round_no}-{i}", sql_gen="SELECT 1"))  # skipped
        report = evaluate_dataset(items, modes=("exe",), db=trade_db)
        counts = report.counts["exe"]
        assert counts["passed"] + counts["failed"] + counts["skipped"] == len(items)
        denominator = counts["passed"] + counts["failed"]
        if denominator == 0:
            assert report.percentages["exe"] is None
        else:
            assert report.percentages["exe"] == round(100.0 * counts["passed"] / denominator, 1)

    # Same law through a judged mode.
    provider = ScriptedProvider(
        [(r"even", "VERDICT: CONSISTENT"), (r".", "VERDICT: INCONSISTENT")]
    )
    items = [
        EvalItem(id=f"q{i}", query=f"{'even' if i % 2 == 0 else 'odd'} question {i}", sql_gen="SELECT 1")
        for i in range(20)
    ]
    report = evaluate_dataset(
        items, modes=("qse",), judge_models={"qse": MODEL}, llm=provider
    )
    counts = report.counts["qse"]
    assert counts == {"passed": 10, "failed": 10, "skipped": 0}
    assert report.percentages["qse"] == 50.0
    _ok("report arithmetic (30 randomized EXE sets + judged mode, exact)")


# ---------------------------------------------------------------------------
# Fallback behavior
# ---------------------------------------------------------------------------


def _malformed_plan_text(rng):
    kind = rng.randrange(7)
    if kind == 0:
        return "".join(rng.choice(string.printable) for _ in range(rng.randint(0, 120)))
    if kind == 1:
        return "```json\n[{\"task_id\": \"a\", \"instruction\":\n```"  # broken JSON
    if kind == 2:
        return json.dumps({"task_id": "a", "instruction": "not an array"})
    if kind == 3:  # cycle
        return json.dumps(
            [
                {"task_id": "a", "instruction": "x", "depends_on": ["b"]},
                {"task_id": "b", "instruction": "y", "depends_on": ["a"]},
            ]
        )
    if kind == 4:  # unknown dependency
        return json.dumps([{"task_id": "a", "instruction": "x", "depends_on": ["ghost"]}])
    if kind == 5:  # over budget
        return json.dumps(
            [{"task_id": f"t{i}", "instruction": "x", "depends_on": []} for i in range(25)]
        )
    return json.dumps([{"task_id": "a", "instruction": "x", "kind": "interpretive-dance"}])


def test_fallback_behavior():
    rng = random.Random(3)
    context = Index.build([], []).retrieve("fallback")
    crashes = 0
    for i in range(100):
        text = _malformed_plan_text(rng)
        provider = ScriptedProvider([], default_response=text)  # repair gets garbage too
        try:
            result = plan(f"question {i}", context, MODEL, provider)
        except Exception as exc:  # the criterion counts any crash
            crashes += 1
            print(f"CRASH on {text!r}: {exc}")
            continue
        assert result.fallback
        assert len(result.tasks) == 1
        assert result.tasks[0].instruction == f"question {i}"
        assert result.tasks[0].kind == "sql"
        workflow.validate_tasks(result.tasks, result.max_tasks)
        assert result.warnings
    assert crashes == 0
    _ok("fallback behavior (100 malformed generator outputs, 0 crashes)")
