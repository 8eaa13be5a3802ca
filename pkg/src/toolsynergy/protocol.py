"""Tagged multi-turn tool-calling transcripts.

A transcript is laid out as::

    <task description>
    <tools>[...tool schemas...]</tools>
    <tool_call>{"name": ..., "arguments": {...}}</tool_call>   (1..M per turn)
    <tool_response>tool_k response: 0.93</tool_response>      (one per call)
    ...
    <answer>0.85</answer>

Parsing is strict: the first violation is reported with its byte offset and
nothing is repaired.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

TAGS = ("tools", "tool_call", "tool_response", "answer")
_TAG_RE = re.compile(r"<(/?)([A-Za-z_][A-Za-z0-9_]*)>")
_RESPONSE_RE = re.compile(r"^(\S+) response: (.*)$", re.DOTALL)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RolloutBudget:
    max_turns: int = 4
    max_parallel_calls: int = 6
    max_tool_calls: int | None = None  # per rollout; None means unbounded

    def __post_init__(self) -> None:
        if self.max_turns < 1 or self.max_parallel_calls < 1:
            raise ValueError("turn and parallel-call budgets must be positive")
        if self.max_tool_calls is not None and self.max_tool_calls < 0:
            raise ValueError("tool-call budget must be nonnegative")


@dataclass(frozen=True)
class ToolCallMsg:
    name: str
    arguments: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return json.dumps({"name": self.name, "arguments": self.arguments}, sort_keys=True)


@dataclass(frozen=True)
class ToolResponseMsg:
    name: str
    observation: str

    def to_text(self) -> str:
        return f"{self.name} response: {self.observation}"

    @property
    def value(self) -> float | None:
        """Probability carried by the observation, or None for invalid/unparseable ones."""
        v = parse_probability(self.observation)
        return v if v is not None and 0.0 <= v <= 1.0 else None


@dataclass(frozen=True)
class AnswerMsg:
    text: str
    value: float | None = None

    @classmethod
    def from_value(cls, value: float) -> "AnswerMsg":
        text = format_probability(value)
        return cls(text, float(text))


@dataclass(frozen=True)
class Turn:
    calls: tuple[ToolCallMsg, ...]
    responses: tuple[ToolResponseMsg, ...] = ()


@dataclass(frozen=True)
class Transcript:
    task: str
    tools: tuple[dict, ...]
    turns: tuple[Turn, ...] = ()
    answer: AnswerMsg | None = None

    @property
    def n_turns(self) -> int:
        return len(self.turns) + (self.answer is not None)

    @property
    def tool_names(self) -> list[str]:
        return [t["name"] for t in self.tools]


@dataclass(frozen=True)
class Diagnostic:
    message: str
    offset: int

    def __str__(self) -> str:
        return f"offset {self.offset}: {self.message}"


def format_probability(value: float) -> str:
    return repr(round(float(value), 12))


def parse_probability(text: str) -> float | None:
    try:
        v = float(text.strip())
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def tool_schemas(names: list[str]) -> tuple[dict, ...]:
    return tuple(
        {
            "name": n,
            "description": "binary diagnostic tool returning P(label=1)",
            "parameters": {"instance": "integer", "query": "integer"},
        }
        for n in names
    )


def _check_budget(t: Transcript, budget: RolloutBudget) -> str | None:
    if t.n_turns > budget.max_turns:
        return f"turn budget exceeded: {t.n_turns} > {budget.max_turns}"
    total = 0
    for turn in t.turns:
        if len(turn.calls) > budget.max_parallel_calls:
            return f"parallel-call budget exceeded: {len(turn.calls)} > {budget.max_parallel_calls}"
        total += len(turn.calls)
    if budget.max_tool_calls is not None and total > budget.max_tool_calls:
        return f"tool-call budget exceeded: {total} > {budget.max_tool_calls}"
    return None


def render(transcript: Transcript, budget: RolloutBudget) -> str:
    problem = _check_budget(transcript, budget)
    if problem:
        raise RenderError(problem)
    declared = set(transcript.tool_names)
    parts = [transcript.task, f"<tools>{json.dumps(list(transcript.tools), sort_keys=True)}</tools>"]
    for turn in transcript.turns:
        if not turn.calls:
            raise RenderError("a tool turn needs at least one call")
        if len(turn.responses) != len(turn.calls):
            raise RenderError("every call needs exactly one response")
        for call in turn.calls:
            if call.name not in declared:
                raise RenderError(f"undeclared tool {call.name!r}")
            parts.append(f"<tool_call>{call.to_text()}</tool_call>")
        for call, resp in zip(turn.calls, turn.responses):
            if resp.name != call.name:
                raise RenderError(f"response from {resp.name!r} does not match call to {call.name!r}")
            parts.append(f"<tool_response>{resp.to_text()}</tool_response>")
    if transcript.answer is not None:
        parts.append(f"<answer>{transcript.answer.text}</answer>")
    return "\n".join(parts)


def _tokens(text: str):
    """Yield (is_close, name, start, end) for every tag-like token."""
    for m in _TAG_RE.finditer(text):
        yield m.group(1) == "/", m.group(2), m.start(), m.end()


def parse(text: str, budget: RolloutBudget) -> Transcript | Diagnostic:
    """Parse a transcript; on the first violation return a :class:`Diagnostic`."""
    blocks: list[tuple[str, str, int]] = []  # (tag, body, offset)
    open_tag: tuple[str, int, int] | None = None
    first_block_start: int | None = None
    for is_close, name, start, end in _tokens(text):
        if name not in TAGS:
            return Diagnostic(f"unknown tag <{'/' if is_close else ''}{name}>", start)
        if not is_close:
            if open_tag is not None:
                return Diagnostic(f"<{name}> opened inside <{open_tag[0]}>", start)
            open_tag = (name, start, end)
            if first_block_start is None:
                first_block_start = start
        else:
            if open_tag is None or open_tag[0] != name:
                return Diagnostic(f"unmatched </{name}>", start)
            blocks.append((name, text[open_tag[2] : start], open_tag[1]))
            last_end = end
            open_tag = None
    if open_tag is not None:
        return Diagnostic(f"unclosed <{open_tag[0]}>", open_tag[1])
    if not blocks or blocks[0][0] != "tools":
        return Diagnostic("transcript must start with a <tools> block", blocks[0][2] if blocks else 0)

    try:
        tools = json.loads(blocks[0][1])
        if not isinstance(tools, list) or not all(isinstance(t, dict) and "name" in t for t in tools):
            raise ValueError
    except ValueError:
        return Diagnostic("malformed tools declaration", blocks[0][2])
    declared = {t["name"] for t in tools}
    task = text[:first_block_start]
    if task.endswith("\n"):
        task = task[:-1]

    turns: list[Turn] = []
    answer: AnswerMsg | None = None
    i = 1
    while i < len(blocks):
        tag, body, off = blocks[i]
        if answer is not None:
            return Diagnostic(f"<{tag}> after the terminal answer", off)
        if tag == "tools":
            return Diagnostic("duplicate <tools> block", off)
        if tag == "tool_response":
            return Diagnostic("response without call", off)
        if tag == "answer":
            value = parse_probability(body)
            if value is None:
                return Diagnostic(f"unparseable answer {body!r}", off)
            if not 0.0 <= value <= 1.0:
                return Diagnostic("answer outside [0,1]", off)
            answer = AnswerMsg(body, value)
            i += 1
            continue
        calls: list[ToolCallMsg] = []
        while i < len(blocks) and blocks[i][0] == "tool_call":
            _, body, off = blocks[i]
            try:
                obj = json.loads(body)
                if set(obj) != {"name", "arguments"} or not isinstance(obj["arguments"], dict):
                    raise ValueError
            except (ValueError, TypeError):
                return Diagnostic("malformed tool call", off)
            if obj["name"] not in declared:
                return Diagnostic(f"call to undeclared tool {obj['name']!r}", off)
            calls.append(ToolCallMsg(obj["name"], obj["arguments"]))
            i += 1
        responses: list[ToolResponseMsg] = []
        while i < len(blocks) and blocks[i][0] == "tool_response":
            _, body, off = blocks[i]
            if len(responses) == len(calls):
                return Diagnostic("response without call", off)
            m = _RESPONSE_RE.match(body)
            if m is None:
                return Diagnostic("malformed tool response", off)
            expected = calls[len(responses)].name
            if m.group(1) != expected:
                return Diagnostic(f"response from {m.group(1)!r} where {expected!r} was called", off)
            responses.append(ToolResponseMsg(m.group(1), m.group(2)))
            i += 1
        if len(responses) != len(calls):
            return Diagnostic("call without response", blocks[i - 1][2])
        turns.append(Turn(tuple(calls), tuple(responses)))

    # free text between blocks is ignored, but nothing may follow the answer
    if answer is not None and text[last_end:].strip():
        return Diagnostic("text after the final block", last_end)
    transcript = Transcript(task=task, tools=tuple(tools), turns=tuple(turns), answer=answer)
    problem = _check_budget(transcript, budget)
    if problem:
        return Diagnostic(problem, 0)
    return transcript


def check_format(text: str, budget: RolloutBudget) -> bool:
    t = parse(text, budget)
    return isinstance(t, Transcript) and t.answer is not None and t.answer.value is not None


def lint(text: str, budget: RolloutBudget) -> list[str]:
    """Human-readable findings for the lint CLI; empty when the transcript is well formed."""
    t = parse(text, budget)
    if isinstance(t, Diagnostic):
        return [str(t)]
    if t.answer is None:
        return ["missing terminal answer"]
    return []
