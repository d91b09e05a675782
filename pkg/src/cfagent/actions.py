"""Code-action language: the closed call-expression grammar the head emits.

One action per step: either a single tool call or a final answer. The
grammar (whitespace between tokens is insignificant):

    action  := call | final ;
    final   := "final_answer" "(" args ")" ;
    call    := ident "(" args? ")" ;
    args    := arg ("," arg)* ;
    arg     := ident "=" value ;
    value   := int | real | bool | string | artifact | list ;
    artifact:= "@" hex+ ;
    list    := "[" (value ("," value)*)? "]" ;
    ident   := [a-z_][a-z0-9_]* ;
    string  := double-quoted with \\" \\\\ \\n escapes ;

Numbers are plain integers and decimals (no exponent form) so the canonical
rendering of every action is unique. ``final_answer`` is a reserved
pseudo-tool: emitting it declares completion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Mapping, Sequence, Union

FINAL_TOOL = "final_answer"

_IDENT_START = set("abcdefghijklmnopqrstuvwxyz_")
_IDENT_CONT = _IDENT_START | set("0123456789")
_HEX = set("0123456789abcdef")
_DIGITS = set("0123456789")


class ActionError(Exception):
    """Base class for action-language failures."""


class ActionSyntaxError(ActionError):
    """Parse failure; ``position`` is the index of the first offending byte."""

    def __init__(self, position: int, expected: str):
        self.position = position
        self.expected = expected
        super().__init__(f"expected {expected} at position {position}")


class UnknownEscape(ActionSyntaxError):
    def __init__(self, position: int, escape: str):
        self.escape = escape
        ActionError.__init__(self, f"unknown escape \\{escape} at position {position}")
        self.position = position
        self.expected = 'one of \\" \\\\ \\n'


class DuplicateArg(ActionError):
    def __init__(self, name: str, position: int):
        self.name = name
        self.position = position
        super().__init__(f"duplicate argument {name!r} at position {position}")


@dataclass(frozen=True)
class ArtifactRef:
    """Reference to a stored artifact by bare hex id (rendered as ``@id``)."""

    id: str

    def __str__(self) -> str:
        return "@" + self.id


ArgValue = Union[int, float, bool, str, ArtifactRef, list]


@dataclass(frozen=True)
class Call:
    tool: str
    args: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Final:
    answer: str
    artifacts: tuple[ArtifactRef, ...] = ()


Action = Union[Call, Final]


# ---------------------------------------------------------------------------
# Parsing


class _Parser:
    __slots__ = ("text", "pos")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, expected: str, position: int | None = None) -> ActionSyntaxError:
        return ActionSyntaxError(self.pos if position is None else position, expected)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, char: str) -> None:
        if self.peek() != char:
            raise self.error(repr(char))
        self.pos += 1

    def ident(self) -> str:
        start = self.pos
        if self.peek() not in _IDENT_START:
            raise self.error("identifier")
        while self.peek() in _IDENT_CONT:
            self.pos += 1
        return self.text[start : self.pos]

    def action(self) -> Action:
        self.skip_ws()
        tool = self.ident()
        self.skip_ws()
        self.expect("(")
        args: dict[str, Any] = {}
        positions: dict[str, int] = {}
        self.skip_ws()
        if self.peek() != ")":
            while True:
                self.skip_ws()
                name_pos = self.pos
                name = self.ident()
                if name in args:
                    raise DuplicateArg(name, name_pos)
                self.skip_ws()
                self.expect("=")
                self.skip_ws()
                args[name] = self.value()
                positions[name] = name_pos
                self.skip_ws()
                if self.peek() == ",":
                    self.pos += 1
                    continue
                break
        self.expect(")")
        self.skip_ws()
        if self.pos != len(self.text):
            raise self.error("end of input")
        if tool == FINAL_TOOL:
            return self._to_final(args, positions)
        return Call(tool=tool, args=args)

    def _to_final(self, args: dict[str, Any], positions: dict[str, int]) -> Final:
        if "text" not in args:
            raise self.error(f"{FINAL_TOOL} requires text=<string>", self.pos - 1)
        if not isinstance(args["text"], str):
            raise self.error("string value for text", positions["text"])
        artifacts: tuple[ArtifactRef, ...] = ()
        if "artifacts" in args:
            listed = args["artifacts"]
            if not isinstance(listed, list) or not all(
                isinstance(a, ArtifactRef) for a in listed
            ):
                raise self.error("list of artifact references", positions["artifacts"])
            artifacts = tuple(listed)
        unknown = sorted(set(args) - {"text", "artifacts"})
        if unknown:
            raise self.error(
                f"only text/artifacts args on {FINAL_TOOL}", positions[unknown[0]]
            )
        return Final(answer=args["text"], artifacts=artifacts)

    def value(self) -> Any:
        c = self.peek()
        if c == '"':
            return self.string()
        if c == "@":
            return self.artifact()
        if c == "[":
            return self.list_value()
        if c == "-" or c in _DIGITS:
            return self.number()
        if c in _IDENT_START:
            word_pos = self.pos
            word = self.ident()
            if word == "true":
                return True
            if word == "false":
                return False
            raise self.error("value", word_pos)
        raise self.error("value")

    def string(self) -> str:
        self.expect('"')
        out: list[str] = []
        while True:
            if self.pos >= len(self.text):
                raise self.error('closing "')
            c = self.text[self.pos]
            if c == '"':
                self.pos += 1
                return "".join(out)
            if c == "\n":
                raise self.error('closing " before end of line')
            if c == "\\":
                if self.pos + 1 >= len(self.text):
                    raise self.error("escape character")
                esc = self.text[self.pos + 1]
                if esc == '"':
                    out.append('"')
                elif esc == "\\":
                    out.append("\\")
                elif esc == "n":
                    out.append("\n")
                else:
                    raise UnknownEscape(self.pos, esc)
                self.pos += 2
                continue
            out.append(c)
            self.pos += 1

    def artifact(self) -> ArtifactRef:
        self.expect("@")
        start = self.pos
        while self.peek() in _HEX:
            self.pos += 1
        if self.pos == start:
            raise self.error("hex digits")
        return ArtifactRef(self.text[start : self.pos])

    def list_value(self) -> list:
        self.expect("[")
        items: list[Any] = []
        self.skip_ws()
        if self.peek() == "]":
            self.pos += 1
            return items
        while True:
            self.skip_ws()
            items.append(self.value())
            self.skip_ws()
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("]")
            return items

    def number(self) -> int | float:
        start = self.pos
        if self.peek() == "-":
            self.pos += 1
        if self.peek() not in _DIGITS:
            raise self.error("digit")
        while self.peek() in _DIGITS:
            self.pos += 1
        if self.peek() != ".":
            return int(self.text[start : self.pos])
        self.pos += 1
        if self.peek() not in _DIGITS:
            raise self.error("digit")
        while self.peek() in _DIGITS:
            self.pos += 1
        return float(self.text[start : self.pos])


def parse_action(text: str) -> Action:
    """Parse one action; raises ActionSyntaxError/DuplicateArg/UnknownEscape."""
    return _Parser(text).action()


# ---------------------------------------------------------------------------
# Rendering (canonical, parse(render(a)) == a)


def render_value(value: Any) -> str:
    if isinstance(value, bool):  # bool is an int subclass; test first
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _render_real(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{escaped}"'
    if isinstance(value, ArtifactRef):
        return "@" + value.id
    if isinstance(value, list):
        return "[" + ", ".join(render_value(v) for v in value) + "]"
    raise ActionError(f"unrenderable value {value!r}")


def _render_real(x: float) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        raise ActionError("reals must be finite")
    text = repr(float(x))
    if "e" in text or "E" in text:
        # exact decimal expansion of the binary float; no exponent form
        text = format(Decimal(x), "f")
    if "." not in text:
        text += ".0"
    return text


def render_action(action: Action) -> str:
    """Canonical text: lexicographic arg order, ', ' separators, no padding."""
    if isinstance(action, Final):
        args: dict[str, Any] = {"text": action.answer}
        if action.artifacts:
            args["artifacts"] = list(action.artifacts)
        body = ", ".join(f"{k}={render_value(args[k])}" for k in sorted(args))
        return f"{FINAL_TOOL}({body})"
    body = ", ".join(f"{k}={render_value(action.args[k])}" for k in sorted(action.args))
    return f"{action.tool}({body})"


# ---------------------------------------------------------------------------
# Schema validation

VALUE_TYPES = ("int", "real", "bool", "string", "artifact", "list")


def _type_of(value: Any) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "real"
    if isinstance(value, str):
        return "string"
    if isinstance(value, ArtifactRef):
        return "artifact"
    if isinstance(value, list):
        return "list"
    return type(value).__name__


def _compatible(value: Any, want: str) -> bool:
    got = _type_of(value)
    if got == want:
        return True
    return got == "int" and want == "real"  # ints promote to reals


def validate_against_schema(action: Action, schema: Any) -> list[str]:
    """Check a Call against a tool schema; returns a list of violations.

    ``schema`` is duck-typed: it needs ``.args`` mapping arg name to an object
    with ``.type`` and ``.required`` (see toolwire.ToolSchema). Final actions
    have no schema and always validate.
    """
    if isinstance(action, Final):
        return []
    violations: list[str] = []
    spec: Mapping[str, Any] = schema.args
    for name, arg in spec.items():
        if arg.required and name not in action.args:
            violations.append(f"missing required arg {name}")
    for name, value in action.args.items():
        if name not in spec:
            violations.append(f"unknown arg {name}")
        elif not _compatible(value, spec[name].type):
            violations.append(
                f"arg {name}: expected {spec[name].type}, got {_type_of(value)}"
            )
    return violations


def to_wire(value: Any) -> Any:
    """ArgValue -> JSON-ready value (artifact refs become '@hex' strings)."""
    if isinstance(value, ArtifactRef):
        return "@" + value.id
    if isinstance(value, list):
        return [to_wire(v) for v in value]
    return value


def args_to_wire(args: Mapping[str, Any]) -> dict[str, Any]:
    return {k: to_wire(v) for k, v in args.items()}
