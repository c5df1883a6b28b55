"""Dataset ingestion (JSONL) and a seeded synthetic IR corpus generator.

Synthetic programs are built from a small template grammar of IR lines. A
vulnerable program contains an unchecked string-copy call; a benign one either
has no such call or guards it with an ``icmp ult`` bounds check placed before
it. Length and distractor lines are drawn independently of the class.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateSplit, InvariantViolation, ParseError
from .io import write_atomic
from .preprocess import IrProgram, normalize_locals

SINKS = {
    "strcpy": "call i8* @strcpy(i8* {dst}, i8* {src})",
    "strcat": "call i8* @strcat(i8* {dst}, i8* {src})",
    "memcpy": "call void @llvm.memcpy.p0i8.p0i8.i64(i8* {dst}, i8* {src}, i64 {len}, i1 false)",
}


@dataclass(frozen=True)
class CorpusSpec:
    n_programs: int = 1000
    vulnerable_fraction: float = 0.5
    seed: int = 0
    min_lines: int = 6
    max_lines: int = 16
    pattern_set: tuple[str, ...] = ("strcpy",)
    # probability that a program contains one inlined user-function wrapper
    wrapper_rate: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "pattern_set", tuple(self.pattern_set))
        if self.n_programs < 1:
            raise ConfigError("n_programs must be positive")
        if not 0.0 < self.vulnerable_fraction < 1.0:
            raise ConfigError("vulnerable_fraction must be in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if not 6 <= self.min_lines <= self.max_lines < 265:
            raise ConfigError("need 6 <= min_lines <= max_lines < 265")
        unknown = set(self.pattern_set) - set(SINKS)
        if not self.pattern_set or unknown:
            raise ConfigError(f"pattern_set must be a non-empty subset of {sorted(SINKS)}")
        if not 0.0 <= self.wrapper_rate <= 1.0:
            raise ConfigError("wrapper_rate must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        allowed = set(cls.__dataclass_fields__)
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown corpus spec keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "CorpusSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


def load_dataset(path: str | os.PathLike) -> list[IrProgram]:
    programs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(record, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            try:
                programs.append(IrProgram.from_record(record))
            except InvariantViolation as exc:
                raise InvariantViolation(f"{path}:{lineno}: {exc}") from None
    return programs


def dumps_dataset(programs: Iterable[IrProgram]) -> str:
    return "".join(p.to_json() + "\n" for p in programs)


def save_dataset(programs: Iterable[IrProgram], path: str | os.PathLike) -> None:
    write_atomic(path, dumps_dataset(programs))


class _Emitter:
    """Appends template lines, minting fresh numbered locals."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.lines: list[str] = []
        self.next_local = 1
        self.ints: list[str] = []
        self.ptrs: list[str] = []
        self.bufs: list[str] = []

    def fresh(self) -> str:
        name = f"%{self.next_local}"
        self.next_local += 1
        return name

    def pick(self, pool: list[str]) -> str:
        return pool[self.rng.integers(len(pool))]

    def buffer(self) -> str:
        size = int(self.rng.choice([8, 16, 32, 64, 128]))
        arr = self.fresh()
        self.lines.append(f"{arr} = alloca [{size} x i8], align 16")
        self.bufs.append(arr)
        return arr

    def distractor(self) -> None:
        rng = self.rng
        if not self.ints:
            slot = self.fresh()
            self.lines.append(f"{slot} = alloca i32, align 4")
            self.ptrs.append(slot)
            val = self.fresh()
            self.lines.append(f"{val} = load i32, i32* {slot}, align 4")
            self.ints.append(val)
            return
        kind = rng.integers(9)
        if kind == 0:
            slot = self.fresh()
            self.lines.append(f"{slot} = alloca i32, align 4")
            self.ptrs.append(slot)
        elif kind == 1 and self.ptrs:
            val = self.fresh()
            self.lines.append(f"{val} = load i32, i32* {self.pick(self.ptrs)}, align 4")
            self.ints.append(val)
        elif kind == 2 and self.ptrs:
            self.lines.append(f"store i32 {self.pick(self.ints)}, i32* {self.pick(self.ptrs)}, align 4")
        elif kind == 3:
            val = self.fresh()
            op = rng.choice(["add nsw", "sub nsw", "mul nsw"])
            self.lines.append(f"{val} = {op} i32 {self.pick(self.ints)}, {int(rng.integers(1, 16))}")
            self.ints.append(val)
        elif kind == 4:
            val = self.fresh()
            pred = rng.choice(["slt", "sgt", "eq", "ne"])
            self.lines.append(f"{val} = icmp {pred} i32 {self.pick(self.ints)}, {int(rng.integers(0, 10))}")
        elif kind == 5:
            val = self.fresh()
            self.lines.append(f"{val} = sext i32 {self.pick(self.ints)} to i64")
        elif kind == 6:
            self.buffer()
        elif kind == 7 and self.bufs:
            val = self.fresh()
            self.lines.append(f"{val} = call i64 @strlen(i8* {self.pick(self.bufs)})")
        else:
            val = self.fresh()
            self.lines.append(f"{val} = add nsw i32 {self.pick(self.ints)}, {self.pick(self.ints)}")
            self.ints.append(val)

    def guard(self, src: str, limit: int) -> None:
        n = self.fresh()
        self.lines.append(f"{n} = call i64 @strlen(i8* {src})")
        cmp = self.fresh()
        self.lines.append(f"{cmp} = icmp ult i64 {n}, {limit}")
        ok, bad = self.fresh(), self.fresh()
        self.lines.append(f"br i1 {cmp}, label {ok}, label {bad}")

    def sink(self, name: str, dst: str, src: str) -> int:
        line = SINKS[name].format(dst=dst, src=src, len=int(self.rng.choice([16, 32, 64])))
        if not line.startswith("call void"):
            line = f"{self.fresh()} = {line}"
        self.lines.append(line)
        return len(self.lines) - 1

    def wrapper(self, body_lines: int) -> None:
        if not self.ints:
            self.distractor()
        fn = f"@func_{int(self.rng.integers(1000))}"
        res = self.fresh()
        self.lines.append(f"{res} = call i32 {fn}(i32 {self.pick(self.ints)})")
        param = self.fresh()
        self.lines.append(f"define i32 {fn}(i32 {param}) {{")
        self.ints.append(param)
        for _ in range(body_lines):
            self.distractor()
        self.lines.append(f"ret i32 {self.pick(self.ints)}")
        self.lines.append("}")


def _generate_one(rng: np.random.Generator, spec: CorpusSpec, label: int, pid: str) -> IrProgram:
    n_lines = int(rng.integers(spec.min_lines, spec.max_lines + 1))
    em = _Emitter(rng)
    if label == 1:
        variant = "unguarded"
    else:
        variant = "guarded" if rng.random() < 0.5 else ("no_sink_guard" if rng.random() < 0.5 else "no_sink")
    has_sink = variant in ("unguarded", "guarded")
    has_guard = variant in ("guarded", "no_sink_guard")
    wrap = rng.random() < spec.wrapper_rate

    planted = 2 + (3 if has_guard else 0) + (1 if has_sink else 0) + (5 if wrap else 0)
    n_fill = max(2, n_lines - planted)
    # distractor lines before the guard, between guard and sink, and after
    cuts = np.sort(rng.integers(0, n_fill + 1, size=2))
    wrap_at = int(rng.integers(0, n_fill + 1))

    dst = em.buffer()
    src = em.buffer()
    vuln_idx = None
    for k in range(n_fill + 1):
        if wrap and k == wrap_at:
            em.wrapper(body_lines=2)
        if k == cuts[0] and has_guard:
            em.guard(src, limit=int(rng.choice([8, 16, 32, 64])))
        if k == cuts[1] and has_sink:
            vuln_idx = em.sink(str(rng.choice(spec.pattern_set)), dst, src)
        if k < n_fill:
            em.distractor()
    em.lines.append("ret i32 0")
    vuln = [vuln_idx] if label == 1 else []
    return normalize_locals(IrProgram.from_vuln_lines(pid, em.lines, label, vuln))


def generate_synthetic(spec: CorpusSpec) -> list[IrProgram]:
    rng = np.random.default_rng(spec.seed)
    n_vuln = int(round(spec.n_programs * spec.vulnerable_fraction))
    labels = np.zeros(spec.n_programs, dtype=np.int64)
    labels[:n_vuln] = 1
    labels = rng.permutation(labels)
    return [
        _generate_one(rng, spec, int(label), f"syn-{spec.seed}-{i:05d}")
        for i, label in enumerate(labels)
    ]


def split(corpus: Sequence[IrProgram], split_spec: SplitSpec) -> tuple[list[IrProgram], list[IrProgram]]:
    """Seeded shuffle, then the first ``train_fraction`` goes to train."""
    n = len(corpus)
    n_train = int(round(n * split_spec.train_fraction))
    if n_train == 0 or n_train == n:
        raise DegenerateSplit(f"split of {n} programs at {split_spec.train_fraction} leaves one side empty")
    order = np.random.default_rng(split_spec.seed).permutation(n)
    return [corpus[i] for i in order[:n_train]], [corpus[i] for i in order[n_train:]]


def class_counts(programs: Iterable[IrProgram]) -> dict[int, int]:
    counts = {0: 0, 1: 0}
    for p in programs:
        counts[p.label] += 1
    return counts


def spec_to_dict(spec: CorpusSpec) -> dict:
    d = asdict(spec)
    d["pattern_set"] = list(spec.pattern_set)
    return d
