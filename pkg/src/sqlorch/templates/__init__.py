"""Versioned prompt template assets.

Each .txt file in this directory is one template; its filename stem is the
template_id (the _vN suffix pins the version). Placeholders use {name} syntax.
"""

from importlib import resources

_CACHE: dict[str, str] = {}


def template_ids() -> list[str]:
    """All bundled template ids, sorted."""
    _load_all()
    return sorted(_CACHE)


def template_body(template_id: str) -> str | None:
    """Raw body for a template id, or None if unknown."""
    _load_all()
    return _CACHE.get(template_id)


def _load_all() -> None:
    if _CACHE:
        return
    for entry in resources.files(__name__).iterdir():
        if entry.name.endswith(".txt"):
            _CACHE[entry.name[:-4]] = entry.read_text(encoding="utf-8")
