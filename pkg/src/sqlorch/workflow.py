"""Query decomposition and dependency-aware execution.

A generator model turns a question plus retrieved context into a plan of
sub-tasks with explicit dependencies. The scheduler runs tasks concurrently up
to a parallelism limit, injecting each task's prerequisite results into its
prompt, executing generated SQL, and aggregating everything into one outcome
with an append-only trace.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from collections import defaultdict
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from typing import Callable

from . import sqlexec
from .errors import ExecutionError, PlanValidationError, SqlorchError, TransportError, WorkflowError
from .llm import ModelRef, Provider, complete_with_retries, render
from .retrieval import RetrievalContext

logger = logging.getLogger(__name__)

DEFAULT_MAX_TASKS = 10
DEP_RESULT_ROW_CAP = 20

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


@dataclass
class TaskNode:
    task_id: str
    instruction: str
    depends_on: tuple[str, ...] = ()
    kind: str = "sql"  # sql | reasoning
    state: str = "pending"  # pending | ready | running | done | failed


@dataclass
class WorkflowPlan:
    query: str
    context: RetrievalContext
    tasks: list[TaskNode]
    max_tasks: int = DEFAULT_MAX_TASKS
    fallback: bool = False
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "query": self.query,
            "tasks": [
                {
                    "task_id": t.task_id,
                    "instruction": t.instruction,
                    "depends_on": list(t.depends_on),
                    "kind": t.kind,
                }
                for t in self.tasks
            ],
            "fallback": self.fallback,
            "warnings": list(self.warnings),
        }


@dataclass
class TaskResult:
    task_id: str
    sql: str | None = None
    result: sqlexec.ResultTable | None = None
    error: str | None = None
    elapsed_ms: float = 0.0

    def as_dict(self, include_timing: bool = False) -> dict:
        out = {
            "task_id": self.task_id,
            "sql": self.sql,
            "result": self.result.as_dict() if self.result is not None else None,
            "error": self.error,
        }
        if include_timing:
            out["elapsed_ms"] = self.elapsed_ms
        return out


@dataclass(frozen=True)
class TraceEvent:
    ts: int  # logical, monotonically increasing event sequence
    event: str
    task_id: str


@dataclass
class WorkflowOutcome:
    answer: str
    task_results: dict[str, TaskResult]
    trace: list[TraceEvent]
    warnings: list[str] = field(default_factory=list)
    partial_failure: bool = False
    summary_fallback: bool = False

    def as_dict(self, include_timing: bool = False) -> dict:
        return {
            "answer": self.answer,
            "task_results": {
                tid: tr.as_dict(include_timing) for tid, tr in sorted(self.task_results.items())
            },
            "trace": [{"ts": e.ts, "event": e.event, "task_id": e.task_id} for e in self.trace],
            "warnings": list(self.warnings),
            "partial_failure": self.partial_failure,
            "summary_fallback": self.summary_fallback,
        }

    def trace_jsonl(self) -> str:
        return "".join(
            json.dumps({"ts": e.ts, "event": e.event, "task_id": e.task_id}) + "\n"
            for e in self.trace
        )


def parse_plan_text(text: str) -> list[TaskNode]:
    """Parse the generator's fenced JSON array into task nodes.

    Lenient on optional keys (missing depends_on means none, missing kind
    means sql) but strict on types. Raises PlanValidationError otherwise.
    """
    candidates = [m.strip() for m in _FENCE_RE.findall(text)]
    candidates.append(text.strip())
    payload = None
    for candidate in candidates:
        try:
            payload = json.loads(candidate)
            break
        except json.JSONDecodeError:
            continue
    if payload is None:
        raise PlanValidationError("no parseable JSON array in generator output")
    if not isinstance(payload, list):
        raise PlanValidationError("generator output is not a JSON array")
    tasks: list[TaskNode] = []
    for i, item in enumerate(payload):
        if not isinstance(item, dict):
            raise PlanValidationError(f"plan element {i} is not an object")
        task_id = item.get("task_id")
        instruction = item.get("instruction")
        if not isinstance(task_id, str) or not task_id.strip():
            raise PlanValidationError(f"plan element {i} has no usable task_id")
        if not isinstance(instruction, str) or not instruction.strip():
            raise PlanValidationError(f"task {task_id!r} has no usable instruction")
        depends_on = item.get("depends_on", [])
        if not isinstance(depends_on, list) or not all(isinstance(d, str) for d in depends_on):
            raise PlanValidationError(f"task {task_id!r} has a malformed depends_on")
        kind = item.get("kind", "sql")
        if kind not in ("sql", "reasoning"):
            raise PlanValidationError(f"task {task_id!r} has unknown kind {kind!r}")
        tasks.append(
            TaskNode(
                task_id=task_id.strip(),
                instruction=instruction.strip(),
                depends_on=tuple(depends_on),
                kind=kind,
            )
        )
    return tasks


def validate_tasks(tasks: list[TaskNode], max_tasks: int = DEFAULT_MAX_TASKS) -> None:
    """Reject empty, over-budget, dangling, self-referential, or cyclic plans."""
    if not tasks:
        raise PlanValidationError("plan has no tasks")
    if len(tasks) > max_tasks:
        raise PlanValidationError(f"plan has {len(tasks)} tasks, budget is {max_tasks}")
    ids = [t.task_id for t in tasks]
    if len(ids) != len(set(ids)):
        raise PlanValidationError("duplicate task ids in plan")
    known = set(ids)
    for t in tasks:
        for dep in t.depends_on:
            if dep not in known:
                raise PlanValidationError(f"task {t.task_id!r} depends on unknown task {dep!r}")
            if dep == t.task_id:
                raise PlanValidationError(f"task {t.task_id!r} depends on itself")
    # Kahn's algorithm; leftovers mean a cycle.
    remaining = {t.task_id: set(t.depends_on) for t in tasks}
    dependents = defaultdict(set)
    for t in tasks:
        for dep in t.depends_on:
            dependents[dep].add(t.task_id)
    queue = [tid for tid, deps in remaining.items() if not deps]
    seen = 0
    while queue:
        tid = queue.pop()
        seen += 1
        for child in dependents[tid]:
            remaining[child].discard(tid)
            if not remaining[child]:
                queue.append(child)
    if seen != len(tasks):
        cyclic = sorted(tid for tid, deps in remaining.items() if deps)
        raise PlanValidationError(f"dependency cycle involving: {', '.join(cyclic)}")


def single_task_fallback(query: str, context: RetrievalContext, reason: str) -> WorkflowPlan:
    """The whole query as one sql task; used when the generator output is unusable."""
    return WorkflowPlan(
        query=query,
        context=context,
        tasks=[TaskNode(task_id="task_1", instruction=query, kind="sql")],
        fallback=True,
        warnings=[f"plan fallback: {reason}"],
    )


def plan(
    query: str,
    context: RetrievalContext,
    model: ModelRef,
    llm: Provider,
    max_tasks: int = DEFAULT_MAX_TASKS,
    retries: int = 2,
    backoff_base_s: float = 0.5,
) -> WorkflowPlan:
    """Ask the generator for a task decomposition and validate it.

    One automatic repair round-trip on unusable output, then a single-task
    fallback plan. Transport failure after retries is a workflow error: there
    is no model output to repair or fall back from safely.
    """
    prompt = render("plan_v1", {"query": query, "context": context.rendered})
    try:
        completion = complete_with_retries(
            llm, model, prompt, retries=retries, backoff_base_s=backoff_base_s
        )
    except TransportError as exc:
        raise WorkflowError(f"plan generation failed after retries: {exc}") from exc

    first_error: str
    try:
        tasks = parse_plan_text(completion.text)
        validate_tasks(tasks, max_tasks)
        return WorkflowPlan(query=query, context=context, tasks=tasks, max_tasks=max_tasks)
    except PlanValidationError as exc:
        first_error = str(exc)

    repair_prompt = render(
        "plan_repair_v1", {"previous": completion.text, "error": first_error}
    )
    try:
        repair = complete_with_retries(
            llm, model, repair_prompt, retries=retries, backoff_base_s=backoff_base_s
        )
        tasks = parse_plan_text(repair.text)
        validate_tasks(tasks, max_tasks)
    except TransportError as exc:
        raise WorkflowError(f"plan repair failed after retries: {exc}") from exc
    except PlanValidationError as exc:
        fallback = single_task_fallback(query, context, f"{first_error}; after repair: {exc}")
        fallback.max_tasks = max_tasks
        logger.warning("plan fallback: %s", fallback.warnings[0])
        return fallback
    plan_obj = WorkflowPlan(query=query, context=context, tasks=tasks, max_tasks=max_tasks)
    plan_obj.warnings.append(f"plan repaired after: {first_error}")
    return plan_obj


class _Tracer:
    """Append-only, totally ordered event log with a logical clock."""

    def __init__(self):
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()
        self._next = 0

    def emit(self, event: str, task_id: str) -> None:
        with self._lock:
            self._events.append(TraceEvent(ts=self._next, event=event, task_id=task_id))
            self._next += 1

    @property
    def events(self) -> list[TraceEvent]:
        return self._events


def extract_sql(text: str) -> str:
    """Pull the SQL statement out of a model completion (fences tolerated)."""
    fenced = re.search(r"```(?:sql)?\s*\n(.*?)```", text, re.DOTALL)
    if fenced:
        return fenced.group(1).strip()
    return text.strip()


def execute(
    plan: WorkflowPlan,
    sql_model: ModelRef,
    llm: Provider,
    db: str,
    parallelism: int = 1,
    row_limit: int = sqlexec.DEFAULT_ROW_LIMIT,
    timeout_ms: int = sqlexec.DEFAULT_TIMEOUT_MS,
    exec_mode: str = "evaluation",
    summary_model: ModelRef | None = None,
    summary_mode: str = "concat",
    retries: int = 2,
    backoff_base_s: float = 0.5,
    replan_hook: Callable[[WorkflowPlan, dict[str, TaskResult]], list[TaskNode] | None] | None = None,
) -> WorkflowOutcome:
    """Run a validated plan to completion.

    Tasks whose dependencies are all done run concurrently up to `parallelism`
    (one database connection per task). A failed task marks every transitive
    dependent failed-skipped; the rest still runs. The optional replan hook is
    consulted when a frontier drains and may append more tasks within budget.
    """
    if parallelism < 1:
        raise SqlorchError("parallelism must be >= 1")
    validate_tasks(plan.tasks, max(plan.max_tasks, len(plan.tasks)))

    tracer = _Tracer()
    for warning in plan.warnings:
        tracer.emit("plan_warning", "")

    # Fresh copies: execution state never leaks into the caller's plan,
    # so the same plan can be executed repeatedly.
    tasks = [replace(t, state="pending") for t in plan.tasks]
    by_id = {t.task_id: t for t in tasks}
    order = {t.task_id: i for i, t in enumerate(tasks)}
    deps_remaining = {t.task_id: set(t.depends_on) for t in tasks}
    dependents: dict[str, set[str]] = defaultdict(set)
    for t in tasks:
        for dep in t.depends_on:
            dependents[dep].add(t.task_id)
    results: dict[str, TaskResult] = {}
    warnings = list(plan.warnings)

    def run_task(task: TaskNode) -> TaskResult:
        started = time.monotonic()
        dep_results = _render_dep_results(task, by_id, results, order)
        sql: str | None = None
        try:
            if task.kind == "reasoning":
                prompt = render(
                    "task_reasoning_v1",
                    {
                        "instruction": task.instruction,
                        "context": plan.context.rendered,
                        "dep_results": dep_results,
                    },
                )
                completion = complete_with_retries(
                    llm, sql_model, prompt, retries=retries, backoff_base_s=backoff_base_s
                )
                table = sqlexec.ResultTable(
                    columns=["answer"], rows=[(completion.text.strip(),)], row_limit=row_limit
                )
                return TaskResult(
                    task_id=task.task_id,
                    result=table,
                    elapsed_ms=(time.monotonic() - started) * 1000.0,
                )
            prompt = render(
                "task_sql_v1",
                {
                    "instruction": task.instruction,
                    "context": plan.context.rendered,
                    "dep_results": dep_results,
                },
            )
            completion = complete_with_retries(
                llm, sql_model, prompt, retries=retries, backoff_base_s=backoff_base_s
            )
            sql = extract_sql(completion.text)
            table = sqlexec.execute_sql(
                sql, db, row_limit=row_limit, timeout_ms=timeout_ms, mode=exec_mode
            )
            return TaskResult(
                task_id=task.task_id,
                sql=sql,
                result=table,
                elapsed_ms=(time.monotonic() - started) * 1000.0,
            )
        except (TransportError, ExecutionError, SqlorchError) as exc:
            return TaskResult(
                task_id=task.task_id,
                sql=sql,
                error=str(exc),
                elapsed_ms=(time.monotonic() - started) * 1000.0,
            )

    def skip_dependents(failed_id: str) -> None:
        stack = sorted(dependents[failed_id], key=lambda tid: order[tid])
        while stack:
            tid = stack.pop(0)
            node = by_id[tid]
            if node.state != "pending":
                continue
            node.state = "failed"
            results[tid] = TaskResult(
                task_id=tid, error=f"skipped: upstream task {failed_id!r} failed"
            )
            tracer.emit("task_skipped", tid)
            stack.extend(sorted(dependents[tid], key=lambda t: order[t]))

    ready = [t.task_id for t in tasks if not deps_remaining[t.task_id]]
    hook_exhausted = replan_hook is None
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        in_flight: dict = {}

        def launch() -> None:
            while ready and len(in_flight) < parallelism:
                tid = ready.pop(0)
                node = by_id[tid]
                node.state = "running"
                tracer.emit("task_start", tid)
                in_flight[pool.submit(run_task, node)] = tid

        launch()
        while in_flight:
            done, _pending = wait(in_flight, return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=lambda f: order[in_flight[f]]):
                tid = in_flight.pop(fut)
                task_result = fut.result()
                results[tid] = task_result
                node = by_id[tid]
                if task_result.error is None:
                    node.state = "done"
                    tracer.emit("task_done", tid)
                    for child in sorted(dependents[tid], key=lambda t: order[t]):
                        deps_remaining[child].discard(tid)
                        if not deps_remaining[child] and by_id[child].state == "pending":
                            ready.append(child)
                    ready.sort(key=lambda t: order[t])
                else:
                    node.state = "failed"
                    tracer.emit("task_failed", tid)
                    skip_dependents(tid)
            launch()
            if not in_flight and not ready and not hook_exhausted:
                extension = replan_hook(plan, dict(results)) or []
                accepted = _accept_extension(extension, tasks, by_id, order, plan.max_tasks)
                if not accepted:
                    hook_exhausted = True
                    continue
                for node in accepted:
                    tasks.append(node)
                    by_id[node.task_id] = node
                    order[node.task_id] = len(order)
                    for dep in node.depends_on:
                        dependents[dep].add(node.task_id)
                for node in accepted:
                    deps_remaining[node.task_id] = {
                        d for d in node.depends_on if by_id[d].state != "done"
                    }
                # Extensions may hang off tasks that already failed.
                failed_upstreams = {
                    d
                    for node in accepted
                    for d in node.depends_on
                    if by_id[d].state == "failed"
                }
                for fid in sorted(failed_upstreams, key=lambda t: order[t]):
                    skip_dependents(fid)
                for node in accepted:
                    if node.state == "pending" and not deps_remaining[node.task_id]:
                        ready.append(node.task_id)
                ready.sort(key=lambda t: order[t])
                tracer.emit("plan_extended", "")
                launch()

    failed = [tid for tid, r in results.items() if r.error is not None]
    partial_failure = bool(failed)
    finished_order = [t.task_id for t in tasks if results[t.task_id].error is None]

    summary_fallback = False
    if finished_order:
        summary = summarize(
            plan.query,
            results,
            model=summary_model or sql_model,
            llm=llm,
            mode=summary_mode,
            task_order=[t.task_id for t in tasks],
            retries=retries,
            backoff_base_s=backoff_base_s,
        )
        answer = summary.text
        summary_fallback = summary.fallback
        if summary.fallback:
            warnings.append("summary fell back to concatenation after a provider failure")
        if partial_failure:
            failed_list = ", ".join(sorted(failed))
            answer += f"\n\n[partial result: task(s) {failed_list} failed]"
    else:
        answer = "no task produced a result; all tasks failed"

    return WorkflowOutcome(
        answer=answer,
        task_results=results,
        trace=tracer.events,
        warnings=warnings,
        partial_failure=partial_failure,
        summary_fallback=summary_fallback,
    )


def _accept_extension(
    extension: list[TaskNode],
    tasks: list[TaskNode],
    by_id: dict[str, TaskNode],
    order: dict[str, int],
    max_tasks: int,
) -> list[TaskNode]:
    if not extension:
        return []
    if len(tasks) + len(extension) > max_tasks:
        logger.warning("replan extension rejected: over task budget")
        return []
    combined = tasks + extension
    try:
        validate_tasks(combined, max_tasks)
    except PlanValidationError as exc:
        logger.warning("replan extension rejected: %s", exc)
        return []
    return extension


def _render_dep_results(
    task: TaskNode,
    by_id: dict[str, TaskNode],
    results: dict[str, TaskResult],
    order: dict[str, int],
) -> str:
    if not task.depends_on:
        return "(none)"
    blocks = []
    for dep in sorted(task.depends_on, key=lambda t: order[t]):
        dep_result = results.get(dep)
        if dep_result is None or dep_result.result is None:
            continue
        rendered = sqlexec.render_result_table(dep_result.result, max_rows=DEP_RESULT_ROW_CAP)
        blocks.append(f"[{dep}] {by_id[dep].instruction}\n{rendered}")
    return "\n\n".join(blocks) if blocks else "(none)"


@dataclass
class SummaryResult:
    text: str
    fallback: bool = False


def summarize(
    query: str,
    results: dict[str, TaskResult],
    model: ModelRef,
    llm: Provider,
    mode: str = "concat",
    task_order: list[str] | None = None,
    retries: int = 2,
    backoff_base_s: float = 0.5,
) -> SummaryResult:
    """Aggregate finished task results into the final answer.

    concat renders every result table in task order, deterministically. llm
    feeds the rendered results through the summary prompt, falling back to
    concat if the provider fails.
    """
    ordering = task_order or sorted(results)
    finished = [
        tid for tid in ordering if tid in results and results[tid].error is None
    ]
    if not finished:
        raise SqlorchError("summarize requires at least one finished task")
    blocks = []
    for tid in finished:
        table = results[tid].result
        rendered = sqlexec.render_result_table(table) if table is not None else "(no result)"
        blocks.append(f"## {tid}\n{rendered}")
    concatenated = "\n\n".join(blocks)
    if mode == "concat":
        return SummaryResult(text=concatenated)
    if mode != "llm":
        raise SqlorchError(f"unknown summary mode '{mode}'")
    prompt = render("summary_v1", {"query": query, "results": concatenated})
    try:
        completion = complete_with_retries(
            llm, model, prompt, retries=retries, backoff_base_s=backoff_base_s
        )
    except SqlorchError as exc:
        logger.warning("summary provider failed, falling back to concat: %s", exc)
        return SummaryResult(text=concatenated, fallback=True)
    return SummaryResult(text=completion.text.strip())
