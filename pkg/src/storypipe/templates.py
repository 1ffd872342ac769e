"""Loading of the editable prompt and rubric templates.

Defaults ship inside the package under ``templates/``.  A user directory with
the same layout can override any file.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from string import Template

_override_dir: Path | None = None


def set_template_dir(path: str | Path | None) -> None:
    global _override_dir
    _override_dir = Path(path) if path else None


def load(name: str) -> str:
    """Return the text of ``templates/<name>``, preferring the override directory."""
    if _override_dir is not None:
        candidate = _override_dir / name
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    return resources.files(__package__).joinpath("templates").joinpath(name).read_text(encoding="utf-8")


def render(name: str, **values: object) -> str:
    return Template(load(name)).substitute({k: str(v) for k, v in values.items()}).strip()


def load_rubric(criterion: str) -> str:
    """Rubric text with ``#`` comment lines removed."""
    text = load(f"rubrics/{criterion}.txt")
    return "\n".join(line for line in text.splitlines() if not line.startswith("#")).strip()
