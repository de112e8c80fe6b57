"""Prompt template loading and placeholder filling."""

from __future__ import annotations

import re
from functools import lru_cache
from importlib import resources
from pathlib import Path

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@lru_cache(maxsize=None)
def load_template(name: str, path: str | None = None) -> str:
    """Load a bundled template by name, or a user template from ``path``."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = resources.files("tracerag").joinpath("data", f"{name}.txt").read_text(encoding="utf-8")
    return text.rstrip("\n")


def fill_template(template: str, **values: str) -> str:
    """Substitute ``{name}`` placeholders in a single pass.

    Substituted values are never rescanned, so braces inside documents or
    demonstrations come through verbatim. Unknown placeholders are left as-is.
    """

    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(values[key]) if key in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)
