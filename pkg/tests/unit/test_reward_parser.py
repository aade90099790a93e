import pytest

from steerkit._exceptions import RewardSyntaxError
from steerkit._reward_ast import (
    DEFAULT_HIGH,
    DEFAULT_LOW,
    Binary,
    ChunkRef,
    Const,
    Index,
    Norm,
    Power,
    Reduce,
    RewardDims,
    Unary,
    print_program,
)
from steerkit._reward_parser import load_reward, parse_reward, tokenize

DIMS = RewardDims(T=8, D=3, n=2)

STAGED = """
# two-stage move
stage reach "go to the cube" {
  reward: -norm2(cum(a)[T-1] - p[0]);
  high: -0.05;
  low: -0.5;
}
stage place {
  reward: -mean_t(norm2(cum(a)[t] - p[1])) - 0.1 * sum_t(dot(a[t], a[t]));
  high: -0.1;
  low: -1;
}
"""


def test_bare_reward_form_gets_default_stage():
    program = parse_reward("reward: -norm2(cum(a)[T-1] - p[0]);", DIMS)
    assert program.stage_count == 1
    stage = program.stage(1)
    assert stage.name == "main"
    assert (stage.high, stage.low) == (DEFAULT_HIGH, DEFAULT_LOW)
    assert isinstance(stage.reward, Unary) and stage.reward.op == "neg"
    assert isinstance(stage.reward.arg, Norm)


def test_staged_program_fields():
    program = parse_reward(STAGED, DIMS)
    assert [s.name for s in program.stages] == ["reach", "place"]
    assert program.stage(1).description == "go to the cube"
    assert program.stage(2).low == -1.0
    assert program.dims == DIMS


def test_precedence_and_power():
    program = parse_reward("reward: 1 + 2 * a[0][0] ^ 2;", DIMS)
    expr = program.stage(1).reward
    assert isinstance(expr, Binary) and expr.op == "+"
    assert isinstance(expr.right, Binary) and expr.right.op == "*"
    assert isinstance(expr.right.right, Power) and expr.right.right.exponent == 2.0


def test_negative_literal_folds_to_constant():
    expr = parse_reward("reward: -3;", DIMS).stage(1).reward
    assert expr == Const(-3.0)


def test_time_indices():
    expr = parse_reward("reward: sum_t(a[t+1][0] - a[t][0]) + a[T-2][1] + a[3][2];", DIMS).stage(1).reward
    refs = []

    def collect(node):
        if isinstance(node, ChunkRef):
            refs.append(node.time)
        for name in ("arg", "left", "right", "base"):
            child = getattr(node, name, None)
            if child is not None:
                collect(child)

    collect(expr)
    assert Index("t", 1) in refs and Index("t", 0) in refs
    assert Index("T", -2) in refs and Index("int", 3) in refs


def test_softmin_temperature():
    expr = parse_reward("reward: -softmin_t(0.5, norm2(cum(a)[t] - p[0]));", DIMS).stage(1).reward
    assert isinstance(expr, Unary)
    assert isinstance(expr.arg, Reduce) and expr.arg.tau == 0.5


def test_comments_and_whitespace_are_ignored():
    text = "# comment\n\n  reward:   a[0][0]  # trailing\n;"
    assert parse_reward(text, DIMS).stage_count == 1


def test_printer_output_parses_back_to_equal_program():
    program = parse_reward(STAGED, DIMS)
    again = parse_reward(print_program(program), DIMS)
    assert again == program


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("reward: a[8][0];", "out of range"),
        ("reward: a[0][3];", "out of range"),
        ("reward: p[2][0];", "Keypoint index 2"),
        ("reward: cum(a)[0][2];", "out of range"),
        ("reward: a[t][0];", "only valid inside a reduction"),
        ("reward: a[0];", "must be a scalar"),
        ("reward: a[0] + p[0];", "widths"),
        ("reward: dot(a[0], p[0]);", "equal widths"),
        ("reward: a[0][0] ^ a[0][1];", "numeric constant"),
        ("reward: softmin_t(0, a[t][0]);", "Temperature must be positive"),
        ("reward: foo(a[0][0]);", "Unknown identifier"),
        ("reward: a[0][0] $;", "Unexpected character"),
        ("stage s { reward: 1; high: -1; low: 0; }", "high > low"),
        ("stage s { reward: 1; high: 0; }", "missing 'low:'"),
        ("stage s { reward: 1; high: 0; low: -1; } stage s { reward: 1; high: 0; low: -1; }", "Duplicate"),
        ("", "Empty"),
    ],
)
def test_rejections(text, fragment):
    with pytest.raises(RewardSyntaxError, match=fragment):
        parse_reward(text, DIMS)


def test_error_reports_line_and_column():
    with pytest.raises(RewardSyntaxError) as exc_info:
        parse_reward("reward:\n  a[0][0] +\n  bogus;", DIMS)
    assert exc_info.value.line == 3
    assert exc_info.value.column == 3


def test_reduction_offsets_need_a_valid_step():
    with pytest.raises(RewardSyntaxError):
        parse_reward("reward: sum_t(a[t+8][0]);", DIMS)
    with pytest.raises(RewardSyntaxError):
        parse_reward("reward: sum_t(a[t+4][0] - a[t-4][0]);", DIMS)


def test_tokenizer_positions():
    tokens = tokenize("reward:\n a[0]")
    assert [(t.text, t.line, t.column) for t in tokens[:3]] == [("reward", 1, 1), (":", 1, 7), ("a", 2, 2)]
    assert tokens[-1].kind == "eof"


def test_load_reward_reads_header(tmp_path):
    path = tmp_path / "move.reward"
    path.write_text("dims T=4 D=3 n=1\nreward: -norm2(cum(a)[T-1] - p[0]);\n", encoding="utf-8")
    program = load_reward(path)
    assert program.dims == RewardDims(4, 3, 1)


def test_load_reward_line_numbers_follow_file(tmp_path):
    path = tmp_path / "bad.reward"
    path.write_text("\ndims T=4 D=3 n=1\nreward: a[9][0];\n", encoding="utf-8")
    with pytest.raises(RewardSyntaxError) as exc_info:
        load_reward(path)
    assert exc_info.value.line == 3


def test_load_reward_requires_header(tmp_path):
    path = tmp_path / "nohdr.reward"
    path.write_text("reward: 1;\n", encoding="utf-8")
    with pytest.raises(RewardSyntaxError, match="dims"):
        load_reward(path)
