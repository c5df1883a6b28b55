import pytest
from hypothesis import given, settings, strategies as st

from irvuln.errors import InvariantViolation, LabelOnRemovedLine, MalformedFunctionBlock
from irvuln.preprocess import (
    IDENTITY_CONFIG,
    IrProgram,
    PreprocessConfig,
    filter_by_length,
    normalize_locals,
    preprocess,
    strip_user_functions,
)

WRAPPED = [
    "%3 = call i32 @foo(%1)",
    "define i32 @foo(i32 %1) {",
    "%2 = add i32 %1, 1",
    "ret i32 %2",
    "}",
]


def prog(lines, labels=None, label=None, id="p"):
    labels = labels if labels is not None else [0] * len(lines)
    if label is None:
        label = int(any(labels))
    return IrProgram(id, tuple(lines), label, tuple(labels))


def test_program_invariants():
    with pytest.raises(InvariantViolation):
        IrProgram("x", ("a",), 0, (0, 0))
    with pytest.raises(InvariantViolation):
        IrProgram("x", ("a",), 0, (1,))
    with pytest.raises(InvariantViolation):
        IrProgram("x", ("a\nb",), 0, (0,))
    # a vulnerable program need not have an annotated line
    IrProgram("x", ("a",), 1, (0,))


def test_record_round_trip():
    p = prog(["a b", "c"], [0, 1])
    assert p.to_record() == {"id": "p", "lines": ["a b", "c"], "label": 1, "vuln_lines": [1]}
    assert IrProgram.from_record(p.to_record()) == p


def test_strip_no_adjacency_is_noop():
    p = prog(["%1 = alloca i32", "%2 = call i32 @f(i32 1)", "ret i32 0"])
    assert strip_user_functions(p) == p


def test_strip_wrapper_example():
    out = strip_user_functions(prog(WRAPPED, [0, 0, 1, 0, 0]))
    assert out.lines == ("%2 = add i32 %1, 1", "ret i32 %2")
    assert out.line_labels == (1, 0)
    assert out.label == 1


def test_strip_define_without_brace():
    with pytest.raises(MalformedFunctionBlock):
        strip_user_functions(prog(["%1 = call i32 @f()", "define i32 @f() {"]))
    with pytest.raises(MalformedFunctionBlock):
        strip_user_functions(prog(["%1 = call i32 @f()", "define i32 @f()"]))


def test_strip_label_on_wrapper_line():
    with pytest.raises(LabelOnRemovedLine):
        strip_user_functions(prog(WRAPPED, [1, 0, 0, 0, 0]))
    with pytest.raises(LabelOnRemovedLine):
        strip_user_functions(prog(WRAPPED, [0, 0, 0, 0, 1]))


def test_strip_nested_and_inline_braces():
    lines = [
        "%1 = call i32 @outer()",
        "define i32 @outer() {",
        "%2 = alloca { i32, i32 }",
        "%3 = call i32 @inner()",
        "define i32 @inner() {",
        "ret i32 1",
        "}",
        "ret i32 %3",
        "}",
        "ret i32 %1",
    ]
    out = strip_user_functions(prog(lines))
    assert out.lines == ("%2 = alloca { i32, i32 }", "ret i32 1", "ret i32 %3", "ret i32 %1")


def test_define_not_preceded_by_call_is_kept():
    p = prog(["define i32 @main() {", "ret i32 0", "}"])
    assert strip_user_functions(p) == p


def test_normalize_locals_example():
    p = prog(["%a = alloca i32", "%b = load i32, i32* %a"])
    assert normalize_locals(p).lines == ("%1 = alloca i32", "%2 = load i32, i32* %1")


def test_normalize_locals_already_numeric_and_empty():
    p = prog(["%1 = alloca i32", "%2 = load i32, i32* %1"])
    assert normalize_locals(p) == p
    empty = prog([])
    assert normalize_locals(empty) == empty


def test_normalize_locals_leaves_globals_types_and_strings():
    p = prog([
        '%x = call i32 (i8*, ...) @printf(i8* getelementptr ([3 x i8], [3 x i8]* @.str, i64 0, i64 0))',
        '%y = alloca %struct.node, align 8',
        '@.str = private constant [3 x i8] c"%d\\00"',
        "br label %exit",
        "exit:",
        "ret i32 %x",
    ])
    out = normalize_locals(p).lines
    assert out[0].startswith("%1 = call") and "@printf" in out[0] and "@.str" in out[0]
    assert out[1] == "%2 = alloca %struct.node, align 8"
    assert out[2] == p.lines[2]
    assert out[3:] == ("br label %3", "3:", "ret i32 %1")


def test_normalize_renumbers_permuted_numbers():
    p = prog(["%7 = alloca i32", "%3 = load i32, i32* %7", "%8 = add i32 %3, %7"])
    assert normalize_locals(p).lines == ("%1 = alloca i32", "%2 = load i32, i32* %1", "%3 = add i32 %2, %1")


def test_filter_by_length_strict_bound():
    cfg = PreprocessConfig(max_lines=265)
    p264 = prog(["x"] * 264, id="a")
    p265 = prog(["x"] * 265, id="b")
    assert filter_by_length([p264], cfg) == [p264]
    assert filter_by_length([p265], cfg) == []
    assert filter_by_length([], cfg) == []
    assert filter_by_length([p265, p264, p265], cfg) == [p264]


def test_preprocess_identity_config():
    corpus = [prog(WRAPPED, id="a"), prog(["%q = alloca i32"], id="b")]
    assert preprocess(corpus, IDENTITY_CONFIG) == corpus


def test_preprocess_defaults_compose():
    out = preprocess([prog(WRAPPED, [0, 0, 1, 0, 0])])
    assert len(out) == 1
    assert out[0].lines == ("%1 = add i32 %2, 1", "ret i32 %1")
    assert out[0].line_labels == (1, 0)


def test_preprocess_drops_overlong():
    corpus = [prog(["x"] * 3, id="a"), prog(["x"] * 5, id="b"), prog(["x"], id="c")]
    assert [p.id for p in preprocess(corpus, PreprocessConfig(max_lines=4))] == ["a", "c"]


def test_preprocess_error_names_program():
    bad = prog(["%1 = call i32 @f()", "define i32 @f() {"], id="broken-7")
    with pytest.raises(MalformedFunctionBlock, match="broken-7") as info:
        preprocess([bad])
    assert info.value.program_id == "broken-7"


def test_preprocess_collapses_whitespace():
    out = preprocess([prog(["  %1 =   alloca\ti32  "])], PreprocessConfig(normalize_locals=False))
    assert out[0].lines == ("%1 = alloca i32",)


# -- randomized programs with tracked original positions ---------------------

FILLER = st.sampled_from([
    "%a = alloca i32", "%b = load i32, i32* %a", "store i32 %b, i32* %a",
    "%c = add nsw i32 %b, 1", "%d = icmp slt i32 %c, 9", "ret i32 %c",
])


@st.composite
def wrapped_programs(draw):
    """Programs with call/define wrappers; each line tagged with its origin."""
    lines, labels, body_tags = [], [], []
    for k in range(draw(st.integers(0, 4))):
        for _ in range(draw(st.integers(0, 3))):
            lines.append(draw(FILLER))
            labels.append(draw(st.integers(0, 1)))
            body_tags.append(len(lines) - 1)
        if draw(st.booleans()):
            lines += [f"%r{k} = call i32 @f{k}()", f"define i32 @f{k}() {{"]
            labels += [0, 0]
            for _ in range(draw(st.integers(0, 3))):
                lines.append(draw(FILLER))
                labels.append(draw(st.integers(0, 1)))
                body_tags.append(len(lines) - 1)
            lines.append("}")
            labels.append(0)
    return prog(lines, labels, id="r"), body_tags


@settings(max_examples=500, deadline=None)
@given(wrapped_programs())
def test_label_conservation(case):
    p, kept = case
    out = preprocess([p], PreprocessConfig(max_lines=None))[0]
    assert len(out.lines) == len(kept)
    assert list(out.line_labels) == [p.line_labels[i] for i in kept]
    assert not any(line.startswith("define ") for line in out.lines)
    assert out.label == p.label


@settings(max_examples=200, deadline=None)
@given(wrapped_programs())
def test_rules_are_idempotent(case):
    p, _ = case
    once = strip_user_functions(p)
    assert strip_user_functions(once) == once
    n1 = normalize_locals(p)
    assert normalize_locals(n1) == n1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 8), max_size=12), st.integers(1, 9))
def test_filter_keeps_order_and_objects(lengths, cap):
    corpus = [prog(["x"] * n, id=str(i)) for i, n in enumerate(lengths)]
    out = filter_by_length(corpus, PreprocessConfig(max_lines=cap))
    assert out == [p for p in corpus if len(p.lines) < cap]
    assert all(any(o is p for p in corpus) for o in out)
