"""Normalization of sliced LLVM IR programs.

Three rules are applied in order: user-defined function wrappers are
stripped (the body stays in place), local identifiers are renumbered by
first occurrence, and over-long programs are dropped. Every rule carries the
per-line labels along with the lines they belong to.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .errors import InvariantViolation, LabelOnRemovedLine, MalformedFunctionBlock

DEFAULT_MAX_LINES = 265


@dataclass(frozen=True)
class IrProgram:
    id: str
    lines: tuple[str, ...]
    label: int
    line_labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "line_labels", tuple(int(v) for v in self.line_labels))
        if self.label not in (0, 1):
            raise InvariantViolation(f"program {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if len(self.line_labels) != len(self.lines):
            raise InvariantViolation(
                f"program {self.id!r}: {len(self.line_labels)} line labels for {len(self.lines)} lines"
            )
        if any(v not in (0, 1) for v in self.line_labels):
            raise InvariantViolation(f"program {self.id!r}: line labels must be 0 or 1")
        if any(self.line_labels) and self.label != 1:
            raise InvariantViolation(f"program {self.id!r}: vulnerable line in a program labelled benign")
        for line in self.lines:
            if "\n" in line or "\r" in line:
                raise InvariantViolation(f"program {self.id!r}: embedded newline in line {line!r}")

    @classmethod
    def from_vuln_lines(cls, id: str, lines: Sequence[str], label: int, vuln_lines: Iterable[int]) -> "IrProgram":
        vuln = set(vuln_lines)
        bad = [i for i in vuln if not (0 <= i < len(lines))]
        if bad:
            raise InvariantViolation(
                f"program {id!r}: vuln_lines {sorted(bad)} out of range for {len(lines)} lines"
            )
        return cls(id, tuple(lines), label, tuple(1 if i in vuln else 0 for i in range(len(lines))))

    @property
    def vuln_lines(self) -> list[int]:
        return [i for i, v in enumerate(self.line_labels) if v]

    def to_record(self) -> dict:
        return {"id": self.id, "lines": list(self.lines), "label": self.label, "vuln_lines": self.vuln_lines}

    @classmethod
    def from_record(cls, record: dict) -> "IrProgram":
        try:
            id_, lines, label = record["id"], record["lines"], record["label"]
        except (KeyError, TypeError) as exc:
            raise InvariantViolation(f"record missing field {exc}") from None
        vuln = record.get("vuln_lines", [])
        if not isinstance(id_, str) or not isinstance(lines, list) or not all(isinstance(s, str) for s in lines):
            raise InvariantViolation("record fields have wrong types")
        if isinstance(label, bool) or not isinstance(label, int):
            raise InvariantViolation(f"label must be an integer 0/1, got {label!r}")
        if not isinstance(vuln, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in vuln):
            raise InvariantViolation("vuln_lines must be a list of integers")
        return cls.from_vuln_lines(id_, lines, label, vuln)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), ensure_ascii=False)


@dataclass(frozen=True)
class PreprocessConfig:
    # None disables the length filter.
    max_lines: int | None = DEFAULT_MAX_LINES
    strip_user_functions: bool = True
    normalize_locals: bool = True

    def __post_init__(self):
        if self.max_lines is not None and self.max_lines < 1:
            raise InvariantViolation(f"max_lines must be >= 1, got {self.max_lines}")


IDENTITY_CONFIG = PreprocessConfig(max_lines=None, strip_user_functions=False, normalize_locals=False)


def _is_call(line: str) -> bool:
    return "call" in line.split()


def _is_define(line: str) -> bool:
    return line.lstrip().startswith("define")


def _closing_brace(lines: Sequence[str], define_idx: int) -> int:
    depth = 0
    for j in range(define_idx, len(lines)):
        depth += lines[j].count("{") - lines[j].count("}")
        if j == define_idx and depth <= 0:
            raise MalformedFunctionBlock(f"define at line {define_idx} does not open a body")
        if depth <= 0:
            return j
    raise MalformedFunctionBlock(f"define at line {define_idx} has no matching closing brace")


def _find_wrapper(lines: Sequence[str]) -> tuple[int, int, int] | None:
    for i in range(len(lines) - 1):
        if _is_call(lines[i]) and _is_define(lines[i + 1]):
            return i, i + 1, _closing_brace(lines, i + 1)
    return None


def strip_user_functions(program: IrProgram) -> IrProgram:
    """Drop each ``call`` line directly followed by ``define``, the define
    line, and the brace closing that define. Body lines stay where they are.

    Nested pairs are handled outermost-first by rescanning after every
    removal.
    """
    lines = list(program.lines)
    labels = list(program.line_labels)
    while (found := _find_wrapper(lines)) is not None:
        for idx in found:
            if labels[idx]:
                raise LabelOnRemovedLine(
                    f"program {program.id!r}: removed wrapper line {lines[idx]!r} carries label 1"
                )
        drop = set(found)
        lines = [s for k, s in enumerate(lines) if k not in drop]
        labels = [v for k, v in enumerate(labels) if k not in drop]
    if len(lines) == len(program.lines):
        return program
    return replace(program, lines=tuple(lines), line_labels=tuple(labels))


# Quoted strings (c"..." constants, quoted names) are matched first so that
# format specifiers such as "%d" inside them are left alone.
_LOCAL_RE = re.compile(r'(?P<quoted>c?"[^"]*")|%(?P<name>[-a-zA-Z$._][-a-zA-Z$._0-9]*|[0-9]+)')
_LABEL_DEF_RE = re.compile(r"^(?P<name>[-a-zA-Z$._0-9]+):(?P<rest>\s.*)?$")
_TYPE_PREFIXES = ("struct.", "union.", "class.")


def normalize_locals(program: IrProgram) -> IrProgram:
    """Rename local identifiers ``%name`` to ``%k`` in first-occurrence order.

    Named types (``%struct.*`` and friends) are not variables and keep their
    names. Basic-block label definitions (``name:``) are renamed together
    with their ``%name`` uses.
    """
    mapping: dict[str, str] = {}

    def rename(name: str) -> str:
        if name not in mapping:
            mapping[name] = str(len(mapping) + 1)
        return mapping[name]

    def sub(match: re.Match) -> str:
        name = match.group("name")
        if name is None or name.startswith(_TYPE_PREFIXES):
            return match.group(0)
        return "%" + rename(name)

    out = []
    for line in program.lines:
        label_def = _LABEL_DEF_RE.match(line)
        if label_def:
            rest = label_def.group("rest") or ""
            out.append(rename(label_def.group("name")) + ":" + _LOCAL_RE.sub(sub, rest))
        else:
            out.append(_LOCAL_RE.sub(sub, line))
    if tuple(out) == program.lines:
        return program
    return replace(program, lines=tuple(out))


def normalize_whitespace(program: IrProgram) -> IrProgram:
    lines = tuple(" ".join(line.split()) for line in program.lines)
    if lines == program.lines:
        return program
    return replace(program, lines=lines)


def filter_by_length(programs: Iterable[IrProgram], cfg: PreprocessConfig) -> list[IrProgram]:
    if cfg.max_lines is None:
        return list(programs)
    return [p for p in programs if len(p.lines) < cfg.max_lines]


def preprocess_one(program: IrProgram, cfg: PreprocessConfig) -> IrProgram:
    try:
        program = normalize_whitespace(program)
        if cfg.strip_user_functions:
            program = strip_user_functions(program)
        if cfg.normalize_locals:
            program = normalize_locals(program)
    except (MalformedFunctionBlock, LabelOnRemovedLine) as exc:
        err = type(exc)(f"[{program.id}] {exc}")
        err.program_id = program.id
        raise err from exc
    return program


def preprocess(programs: Iterable[IrProgram], cfg: PreprocessConfig = PreprocessConfig()) -> list[IrProgram]:
    """Strip, normalize, then length-filter a corpus. Input order is kept."""
    return filter_by_length((preprocess_one(p, cfg) for p in programs), cfg)
