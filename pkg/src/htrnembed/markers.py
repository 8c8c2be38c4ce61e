"""Reserved soft-slot markers embedded in prompt text.

Markers use the mathematical angle brackets U+27E8/U+27E9, which are stripped
from all node text at ingest so a marker can never be forged by data.
"""

from __future__ import annotations

import re

LANGLE = "⟨"
RANGLE = "⟩"

GRAPH_SLOT = "GT"
RELATION_SLOT = "RT"

_MARKER_RE = re.compile(re.escape(LANGLE) + r"(GT|RT):([^⟨⟩]*)" + re.escape(RANGLE))


def escape_text(text: str) -> str:
    """Replace reserved marker brackets so raw text can never form a marker."""
    return text.replace(LANGLE, "<").replace(RANGLE, ">")


def graph_marker(metapath_name: str) -> str:
    return f"{LANGLE}{GRAPH_SLOT}:{metapath_name}{RANGLE}"


def relation_marker(relation_name: str) -> str:
    return f"{LANGLE}{RELATION_SLOT}:{relation_name}{RANGLE}"


def split_markers(text: str) -> list[tuple[str, str]]:
    """Split text into ("lit", chunk) and ("GT"|"RT", key) pieces in order."""
    pieces: list[tuple[str, str]] = []
    pos = 0
    for m in _MARKER_RE.finditer(text):
        if m.start() > pos:
            pieces.append(("lit", text[pos : m.start()]))
        pieces.append((m.group(1), m.group(2)))
        pos = m.end()
    if pos < len(text):
        pieces.append(("lit", text[pos:]))
    return pieces
