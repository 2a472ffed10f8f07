"""Prompt rendering for the language-model controller, and decision parsing."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources

from .errors import TemplateError
from .netmodel import PHASE_IDS
from .observe import IntersectionObservation

TEMPLATE_VERSION = "prompt_v1"

# Block order of the rendered state; differs from the phase enum order.
RENDER_ORDER = ("ETWT", "NTST", "ELWL", "NLSL")

PHASE_TEXT = {
    "ETWT": ("Eastern and western through lanes", "East", "West"),
    "NTST": ("Northern and southern through lanes", "North", "South"),
    "ELWL": ("Eastern and western left-turn lanes", "East", "West"),
    "NLSL": ("Northern and southern left-turn lanes", "North", "South"),
}

_SIGNAL_TAG = re.compile(r"<signal>(.*?)</signal>", re.DOTALL | re.IGNORECASE)


@lru_cache(maxsize=None)
def load_sections(version: str = TEMPLATE_VERSION) -> dict[str, str]:
    text = resources.files("tsclab").joinpath(f"templates/{version}.txt").read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("# ") and current is None:
            continue
        m = re.fullmatch(r"\[(\w+)\]", line)
        if m:
            current = m.group(1)
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    return {k: "\n".join(v).strip("\n") for k, v in sections.items()}


@dataclass(frozen=True)
class PromptSections:
    d_scene: str
    d_task: str
    d_know: str
    action_space_text: str
    state_intro: str
    is_default: bool = False

    def __post_init__(self):
        for name in ("d_scene", "d_task", "d_know", "action_space_text", "state_intro"):
            if not getattr(self, name).strip():
                raise TemplateError(f"prompt section {name} is empty")

    @classmethod
    def default(cls, version: str = TEMPLATE_VERSION) -> "PromptSections":
        s = load_sections(version)
        return cls(s["scene"], s["task"], s["knowledge"], s["requirements"], s["state_intro"], True)


@dataclass(frozen=True)
class PromptText:
    text: str
    observation: IntersectionObservation = field(repr=False, compare=False)
    t: int = 0

    def __str__(self) -> str:
        return self.text


class ParseStatus(str, Enum):
    OK = "Ok"
    FALLBACK = "Fallback"


@dataclass(frozen=True)
class ParsedDecision:
    phase: str | None
    reasoning: str
    raw: str
    parse_status: ParseStatus


def _signal_block(obs: IntersectionObservation, pid: str) -> list[str]:
    desc, first, second = PHASE_TEXT[pid]
    a, b, tot = obs.phase_queued(pid)
    lines = [
        f"Signal: {pid}",
        f"Allowed lanes: {desc}",
        f"- Early queued: {a} ({first}), {b} ({second}), {tot} (Total)",
    ]
    for k in range(1, obs.segment_count + 1):
        a, b, tot = obs.phase_segment(pid, k)
        lines.append(f"- Segment {k}: {a} ({first}), {b} ({second}), {tot} (Total)")
    return lines


def render_prompt(obs: IntersectionObservation, sections: PromptSections | None = None) -> PromptText:
    sections = sections or PromptSections.default()
    if sections.is_default and obs.segment_count != 3:
        raise TemplateError(
            f"default prompt describes three segments, observation has {obs.segment_count}"
        )
    state = [line for pid in RENDER_ORDER for line in _signal_block(obs, pid)]
    parts = [
        sections.d_scene,
        sections.state_intro,
        "\n".join(state),
        sections.d_task,
        sections.d_know,
        sections.action_space_text,
    ]
    return PromptText("\n\n".join(parts), obs, obs.t)


def parse_decision(response: str) -> ParsedDecision:
    """Read the chosen phase from the last ``<signal>`` tag of ``response``."""
    tags = _SIGNAL_TAG.findall(response or "")
    if tags:
        choice = tags[-1].strip().upper()
        if choice in PHASE_IDS:
            return ParsedDecision(choice, response, response, ParseStatus.OK)
    return ParsedDecision(None, response, response, ParseStatus.FALLBACK)


_COUNT_LINE = re.compile(r"- (Early queued|Segment (\d+)): (\d+) \(\w+\), (\d+) \(\w+\), (\d+) \(Total\)")


def read_prompt_state(text: str) -> dict[str, dict]:
    """Recover per-signal counts from a rendered prompt.

    Returns ``{phase: {"queued": (a, b, total), "segments": [(a, b, total), ...]}}``
    for every ``Signal:`` block found.
    """
    out: dict[str, dict] = {}
    current = None
    for line in text.splitlines():
        if line.startswith("Signal: "):
            current = line[len("Signal: "):].strip()
            out[current] = {"queued": None, "segments": []}
            continue
        m = _COUNT_LINE.fullmatch(line.strip())
        if m and current is not None:
            counts = (int(m.group(3)), int(m.group(4)), int(m.group(5)))
            if m.group(1) == "Early queued":
                out[current]["queued"] = counts
            else:
                out[current]["segments"].append(counts)
    return out
