"""Operator-facing command line: corpus building, indexing, workflow runs,
evaluation, and the bundled demo.

Errors leave a single machine-parseable line on stderr; configuration problems
exit 78, other pipeline failures exit 1, usage errors exit 2.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import corpus, demo as demo_mod, judge, retrieval, workflow
from .config import Config, load_config
from .errors import ConfigError, SqlorchError

EXIT_CONFIG = 78


def _dump_json(payload, path: Path) -> None:
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def pipeline_command(fn):
    """Map package errors to exit codes with a one-line stderr diagnostic."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except SqlorchError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _load_cfg(config_path: str | None) -> Config:
    return load_config(config_path)


@click.group()
@click.version_option(package_name="sqlorch")
def cli():
    """NL2SQL orchestration: corpus, retrieval, workflow execution, evaluation."""


@cli.group()
def corpus_group():
    """Training-corpus pipelines."""


# click derives the name from the function; override for the spec'd surface.
corpus_group.name = "corpus"


@corpus_group.command("ingest")
@click.option("--input", "inputs", multiple=True, required=True, type=click.Path(), help="Input JSONL file(s) of {id?, sql, comment?, source?} rows.")
@click.option("--dialect", default="ansi", show_default=True, help="SQL dialect tag for parsing.")
@click.option("--raw", is_flag=True, help="Ingest raw SQL (no comment requirement).")
@click.option("--no-dedupe", is_flag=True, help="Skip dedupe by normalized SQL.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@pipeline_command
def corpus_ingest(inputs, dialect, raw, no_dedupe, out):
    """Ingest annotated or raw SQL records, filter, dedupe, and write them out."""
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if raw:
        records, stats = corpus.ingest_raw_sql(list(inputs), dialect)
    else:
        records, stats = corpus.ingest_sql_comments(list(inputs), dialect)
    if not no_dedupe:
        records = corpus.dedupe(records, dialect)
    records_path = out_dir / "records.jsonl"
    with open(records_path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {"id": rec.id, "sql": rec.sql, "source": rec.source}
            if hasattr(rec, "comment"):
                row["comment"] = rec.comment
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    _dump_json({**stats.as_dict(), "after_dedupe": len(records)}, out_dir / "ingest_stats.json")
    click.echo(
        f"ingested {stats.read} rows: kept={stats.kept} rejected_parse={stats.rejected_parse} "
        f"rejected_empty={stats.rejected_empty} after_dedupe={len(records)}"
    )


@corpus_group.command("gen-queries")
@click.option("--input", "input_path", required=True, type=click.Path(), help="Raw SQL JSONL ({id?, sql, source?}).")
@click.option("--config", "config_path", type=click.Path(), help="TOML config with a [models.revllm] table.")
@click.option("--parallelism", default=1, show_default=True, type=int)
@click.option("--dialect", default="ansi", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@pipeline_command
def corpus_gen_queries(input_path, config_path, parallelism, dialect, out):
    """Generate a natural-language query per raw SQL statement via the reverse model."""
    cfg = _load_cfg(config_path)
    model, provider = cfg.provider_for("revllm")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, ingest_stats = corpus.ingest_raw_sql([input_path], dialect)
    pairs, gen_stats = corpus.generate_queries(records, model, provider, parallelism=parallelism)
    corpus.write_pairs_file(pairs, out_dir / "pairs.jsonl")
    _dump_json(
        {"ingest": ingest_stats.as_dict(), "generation": gen_stats.as_dict()},
        out_dir / "gen_stats.json",
    )
    click.echo(
        f"generated {gen_stats.generated} pairs from {gen_stats.requested} statements "
        f"(dropped_empty={gen_stats.dropped_empty} failed={gen_stats.failed})"
    )


@corpus_group.command("export-sft")
@click.option("--records", "records_path", type=click.Path(), help="Annotated records JSONL (reverse-model dataset).")
@click.option("--pairs", "pairs_path", type=click.Path(), help="Query/SQL pairs JSONL (NL2SQL dataset).")
@click.option("--template", "template_id", default=None, help="Template id; defaults per dataset kind.")
@click.option("--schema-file", type=click.Path(), help="Optional schema context file injected into prompts.")
@click.option("--dialect", default="ansi", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output JSONL file.")
@pipeline_command
def corpus_export_sft(records_path, pairs_path, template_id, schema_file, dialect, out):
    """Export an SFT JSONL dataset from ingested records or generated pairs."""
    if bool(records_path) == bool(pairs_path):
        raise ConfigError("exactly one of --records or --pairs is required")
    out_path = Path(out)
    if out_path.parent:
        out_path.parent.mkdir(parents=True, exist_ok=True)
    if records_path:
        records, _ = corpus.ingest_sql_comments([records_path], dialect)
        examples = corpus.build_revllm_sft(
            records, template_id or "revllm_sft_v1", out_path=out_path
        )
    else:
        schema_context = None
        if schema_file:
            schema_context = Path(schema_file).read_text(encoding="utf-8")
        pairs = corpus.read_pairs_file(pairs_path)
        examples = corpus.build_sqlllm_sft(
            pairs, template_id or "sqlllm_sft_v1", out_path=out_path, schema_context=schema_context
        )
    click.echo(f"wrote {len(examples)} examples to {out_path}")


@cli.group()
def kb():
    """Knowledge-base and schema-repository indexing."""


@kb.command("index")
@click.option("--knowledge", "knowledge_path", type=click.Path(), help="Knowledge JSONL ({id, title, body, tags}).")
@click.option("--tables", "tables_path", type=click.Path(), help="Schema repository JSONL ({table_name, ddl, description, column_comments}).")
@click.option("--out", required=True, type=click.Path(), help="Output index file.")
@pipeline_command
def kb_index(knowledge_path, tables_path, out):
    """Embed documents and table schemas into a persisted index."""
    docs = retrieval.load_knowledge_jsonl(knowledge_path) if knowledge_path else []
    tables = retrieval.load_tablehub_jsonl(tables_path) if tables_path else []
    index = retrieval.Index.build(docs, tables)
    out_path = Path(out)
    if out_path.parent:
        out_path.parent.mkdir(parents=True, exist_ok=True)
    index.save(out_path)
    stats = index.stats
    click.echo(
        f"indexed docs={stats.docs} tables={stats.tables} rejected_tables={stats.rejected_tables}"
    )
    for rejection in stats.rejections:
        click.echo(f"  rejected: {rejection}", err=True)


@kb.command("query")
@click.option("--index", "index_path", required=True, type=click.Path(), help="Index file from `kb index`.")
@click.option("--query", "query_text", required=True, help="Query text.")
@click.option("--k-knowledge", default=4, show_default=True, type=int)
@click.option("--k-schema", default=3, show_default=True, type=int)
@click.option("--out", type=click.Path(), help="Write the context JSON here instead of stdout.")
@pipeline_command
def kb_query(index_path, query_text, k_knowledge, k_schema, out):
    """Retrieve the top-k context for a query."""
    index = retrieval.Index.load(index_path)
    context = index.retrieve(query_text, k_knowledge=k_knowledge, k_schema=k_schema)
    if out:
        out_path = Path(out)
        if out_path.parent:
            out_path.parent.mkdir(parents=True, exist_ok=True)
        _dump_json(context.as_dict(), out_path)
        click.echo(f"wrote context to {out_path}")
    else:
        click.echo(context.rendered)


@cli.command("run")
@click.option("--query", "query_text", required=True, help="Natural-language question.")
@click.option("--config", "config_path", type=click.Path(), help="TOML config with [models.planner] and [models.sqlgen].")
@click.option("--db", "db_spec", required=True, help="Connection spec (path or sqlite:<path>).")
@click.option("--index", "index_path", type=click.Path(), help="Optional retrieval index; omitted means empty context.")
@click.option("--parallelism", default=None, type=int, help="Overrides workflow.parallelism.")
@click.option("--summary-mode", type=click.Choice(["llm", "concat"]), default=None, help="Overrides workflow.summary_mode.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@pipeline_command
def run_cmd(query_text, config_path, db_spec, index_path, parallelism, summary_mode, out):
    """Decompose a query, execute the sub-tasks, and aggregate the answer."""
    cfg = _load_cfg(config_path)
    if parallelism is not None:
        cfg.workflow.parallelism = parallelism
    if summary_mode is not None:
        cfg.workflow.summary_mode = summary_mode
    cfg.validate()
    planner_model, planner_provider = cfg.provider_for("planner")
    sql_model, sql_provider = cfg.provider_for("sqlgen")
    if cfg.workflow.summary_mode == "llm":
        summary_model, _ = cfg.provider_for("summarizer")
    else:
        summary_model = sql_model

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if index_path:
        index = retrieval.Index.load(index_path)
    else:
        index = retrieval.Index.build([], [])
    context = index.retrieve(
        query_text, k_knowledge=cfg.retrieval.k_knowledge, k_schema=cfg.retrieval.k_schema
    )
    plan = workflow.plan(
        query_text, context, planner_model, planner_provider, max_tasks=cfg.workflow.max_tasks
    )
    _dump_json(plan.as_dict(), out_dir / "plan.json")
    outcome = workflow.execute(
        plan,
        sql_model,
        sql_provider,
        db=db_spec,
        parallelism=cfg.workflow.parallelism,
        row_limit=cfg.exec.row_limit,
        timeout_ms=cfg.exec.timeout_ms,
        exec_mode=cfg.exec.mode,
        summary_model=summary_model,
        summary_mode=cfg.workflow.summary_mode,
    )
    _dump_json(outcome.as_dict(), out_dir / "outcome.json")
    (out_dir / "trace.jsonl").write_text(outcome.trace_jsonl(), encoding="utf-8")
    click.echo(outcome.answer)


@cli.command("eval")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(), help="Eval JSONL ({id, query, sql_gen?, sql_gold?, db_ref?}).")
@click.option("--modes", default="exe,qse,sse", show_default=True, help="Comma-separated subset of exe,qse,sse.")
@click.option("--db", "db_spec", default=None, help="Default connection spec for items without db_ref.")
@click.option("--config", "config_path", type=click.Path(), help="TOML config with judge model roles.")
@click.option("--method", default="sqlorch", show_default=True, help="Method label for the report row.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@pipeline_command
def eval_cmd(dataset_path, modes, db_spec, config_path, method, out):
    """Score a dataset with the requested evaluation modes and write the report."""
    cfg = _load_cfg(config_path)
    mode_tuple = tuple(m.strip().lower() for m in modes.split(",") if m.strip())
    judge_models = {}
    provider = None
    for mode, role in (("qse", "judge_qse"), ("sse", "judge_sse")):
        if mode in mode_tuple and role in cfg.models:
            model, provider_obj = cfg.provider_for(role)
            judge_models[mode] = model
            provider = provider_obj
    items = judge.load_eval_items(dataset_path)
    # When sql_gen is absent, generate it through the workflow first.
    missing = [item for item in items if not item.sql_gen]
    if missing:
        _generate_missing_sql(missing, cfg, db_spec)
    report = judge.evaluate_dataset(
        items,
        modes=mode_tuple,
        db=db_spec,
        judge_models=judge_models,
        llm=provider,
        parallelism=cfg.judge.parallelism,
        row_limit=cfg.exec.row_limit,
        timeout_ms=cfg.exec.timeout_ms,
        order_policy=cfg.exec.order_sensitivity_policy,
        method=method,
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    table = judge.render_report_table(report)
    (out_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)


def _generate_missing_sql(items, cfg: Config, db_spec: str | None) -> None:
    """End-to-end mode: produce sql_gen for items that lack it."""
    planner_model, planner_provider = cfg.provider_for("planner")
    sql_model, sql_provider = cfg.provider_for("sqlgen")
    empty_index = retrieval.Index.build([], [])
    for item in items:
        context = empty_index.retrieve(item.query) if item.query else None
        if context is None:
            continue
        plan = workflow.plan(
            item.query, context, planner_model, planner_provider, max_tasks=cfg.workflow.max_tasks
        )
        outcome = workflow.execute(
            plan,
            sql_model,
            sql_provider,
            db=item.db_ref or db_spec or ":memory:",
            parallelism=1,
            exec_mode=cfg.exec.mode,
        )
        for result in outcome.task_results.values():
            if result.sql:
                item.sql_gen = result.sql
                break


@cli.command("demo")
@click.option("--out", required=True, type=click.Path(), help="Output directory for demo artifacts.")
@pipeline_command
def demo_cmd(out):
    """Run the bundled trade-analysis scenario end to end against pinned cassettes."""
    summary = demo_mod.run_demo(out)
    click.echo(f"demo complete: {summary['tasks']} tasks, artifacts in {out}")
    click.echo(f"answer: {summary['answer']}")
    pct = ", ".join(
        f"{mode.upper()}={'-' if v is None else v}" for mode, v in summary["percentages"].items()
    )
    click.echo(f"evaluation: {pct}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=True)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except SqlorchError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
