"""sqlorch: enterprise NL2SQL orchestration.

Pipelines for reverse training-corpus generation, retrieval-augmented workflow
decomposition with dependency-aware execution, SQL execution with canonical
result comparison, and tri-modal evaluation (execution, query-SQL, SQL-SQL).
All model calls go through a pluggable provider layer with deterministic
record/replay, so every pipeline runs offline.
"""

__version__ = "0.1.0"
