"""Final-answer extraction and grading utilities.

Covers the extractor side of the pipeline: canonicalizing answer strings,
splitting raw completions into reasoning steps plus an optional conclusion
line, detecting the answer declaration for each answer style, and
deduplicating rationales.

The canonicalization rules are fixed here and versioned with the repo;
grading never consults an external checker. Symbolic equivalence beyond
these rules (e.g. 0.5 vs 1/2) is deliberately out of scope.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:  # pragma: no cover - typing only, avoids an import cycle
    from .corpus import Rationale


class EmptyRationaleError(ValueError):
    """Raised when a completion contains no non-blank lines."""


ANSWER_LINE_TAG = "answer-line"
BOXED_TAG = "boxed"

_ANSWER_LINE_RE = re.compile(r"the answer is\s*(.+)$", re.IGNORECASE)
_FRAC_RE = re.compile(r"\\[tdc]?frac\{([^{}]*)\}\{([^{}]*)\}")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d)")
_SLASH_RE = re.compile(r"\s*/\s*")
_CURRENCY = "$€£¥₩"
_TRAILING = ".,!?;: \t"


@dataclass(frozen=True)
class AnswerStyle:
    """How a completion declares its final answer.

    ``answer-line`` matches a line containing "The answer is <answer>";
    ``boxed`` matches the last \\boxed{...} group in the text.
    """

    tag: str

    def __post_init__(self) -> None:
        if self.tag not in (ANSWER_LINE_TAG, BOXED_TAG):
            raise ValueError(f"unknown answer style: {self.tag!r}")

    def is_declaration(self, line: str) -> bool:
        if self.tag == ANSWER_LINE_TAG:
            return _ANSWER_LINE_RE.search(line) is not None
        return "\\boxed{" in line


ANSWER_LINE = AnswerStyle(ANSWER_LINE_TAG)
BOXED = AnswerStyle(BOXED_TAG)

_STYLES = {ANSWER_LINE_TAG: ANSWER_LINE, BOXED_TAG: BOXED}


def style_for(tag: str) -> AnswerStyle:
    try:
        return _STYLES[tag]
    except KeyError:
        raise ValueError(f"unknown answer style: {tag!r}") from None


def canonicalize(ans: str) -> str:
    """Normalize an answer string to its canonical comparison form.

    Deterministic and idempotent: LaTeX fractions become a/b, currency
    symbols and digit-grouping commas are dropped, whitespace is collapsed,
    trailing punctuation is stripped, and the result is lowercased.
    """
    s = ans.strip()
    while True:
        t = _FRAC_RE.sub(lambda m: f"{m.group(1)}/{m.group(2)}", s)
        if t == s:
            break
        s = t
    s = s.replace("\\$", "")
    s = "".join(ch for ch in s if ch not in _CURRENCY)
    s = _THOUSANDS_RE.sub("", s)
    s = _SLASH_RE.sub("/", s)
    s = " ".join(s.split())
    while s and s[-1] in _TRAILING:
        s = s[:-1]
    return s.lower().strip()


def _last_boxed_group(text: str) -> str | None:
    start = text.rfind("\\boxed{")
    if start < 0:
        return None
    i = start + len("\\boxed{")
    depth = 1
    out = []
    while i < len(text) and depth > 0:
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                break
        out.append(ch)
        i += 1
    if depth != 0:
        return None
    return "".join(out)


def extract_answer(raw: str, style: AnswerStyle) -> str | None:
    """Canonical answer from the last matching declaration, or None."""
    if style.tag == ANSWER_LINE_TAG:
        found = None
        for line in raw.splitlines():
            m = _ANSWER_LINE_RE.search(line)
            if m:
                found = m.group(1)
        if found is None:
            return None
        ans = canonicalize(found)
        return ans or None
    group = _last_boxed_group(raw)
    if group is None:
        return None
    ans = canonicalize(group)
    return ans or None


def split_steps(raw: str, style: AnswerStyle = ANSWER_LINE) -> tuple[list[str], str | None]:
    """Split raw text into non-blank step lines and an optional conclusion.

    The final non-blank line is returned as the conclusion iff it matches
    the style's answer declaration; otherwise all lines are steps.
    """
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise EmptyRationaleError("completion has no non-blank lines")
    if style.is_declaration(lines[-1]):
        return lines[:-1], lines[-1]
    return lines, None


_DIGIT_RUN_RE = re.compile(r"\d+")


def _dedup_key(steps: Iterable[str]) -> str:
    # Whitespace-normalize each step and canonicalize digit runs (leading
    # zeros dropped) so cosmetic variants collapse while distinct numbers
    # keep distinct keys.
    norm = []
    for step in steps:
        collapsed = " ".join(step.split())
        norm.append(_DIGIT_RUN_RE.sub(lambda m: str(int(m.group(0))), collapsed))
    return "\n".join(norm)


def dedup(rationales: list[Rationale]) -> list[Rationale]:
    """Keep the first occurrence per dedup key; order is preserved."""
    seen: set[str] = set()
    out = []
    for r in rationales:
        key = _dedup_key(r.steps)
        if key in seen:
            continue
        seen.add(key)
        out.append(r)
    return out


def strip_conclusion(r: Rationale) -> Rationale:
    """Same rationale with the conclusion removed; all other fields kept."""
    if r.conclusion is None:
        return r
    return dataclasses.replace(r, conclusion=None)
