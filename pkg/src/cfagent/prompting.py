"""Edit-instruction templating for the adaptive-prompting path.

When a query lacks pathology specifics, the loop consults the report tool and
rewrites its findings into a targeted edit instruction; only a clean report
falls back to the generic normal-study prompt.
"""

from __future__ import annotations

import re
from typing import Any

GENERIC_EDIT_PROMPT = "Normal chest X-ray with no finding"

_FINDING = re.compile(r"^(?P<what>.+?) in (?P<quadrant>[a-z][a-z-]*) quadrant$")


def refine_prompt(query_text: str, findings: dict[str, Any] | None) -> str:
    """Build an edit instruction from report-tool findings.

    "lesion in upper-left quadrant" -> "remove lesion in upper-left region";
    "no finding" (or no usable findings at all) -> the generic prompt.
    """
    text = (findings or {}).get("findings", "")
    if not isinstance(text, str) or not text or text == "no finding":
        return GENERIC_EDIT_PROMPT
    m = _FINDING.match(text)
    if m is None:
        return f"remove {text}"
    return f"remove {m.group('what')} in {m.group('quadrant')} region"
