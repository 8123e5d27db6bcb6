import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.target_lang import (
    BUILTINS,
    DomainError,
    ExprNode,
    ParseError,
    TargetError,
    builtin,
    eval_target,
    format_expr,
    parse_target,
)


def test_parse_examples():
    f = parse_target("x1^2", 1)
    assert (f.d_x, f.d_y) == (1, 1)
    assert f.exprs[0] == ExprNode("^", (ExprNode("var", value=1), ExprNode("const", value=2.0)))
    g = parse_target("sin(pi*x1) ; x2^2", 2)
    assert g.d_y == 2
    with pytest.raises(ParseError):
        parse_target("x3", 2)


@pytest.mark.parametrize(
    "src",
    ["x1 +", "foo(x1)", "sin(x1, x1)", "(x1", "x1 ) ", "x0", "x", "sin x1", "1e", "x1 $ 2", ""],
)
def test_parse_errors(src):
    with pytest.raises(ParseError) as info:
        parse_target(src, 1)
    assert info.value.pos >= 0


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as info:
        parse_target("x1 + bogus(x1)", 1)
    assert info.value.pos == 5


def test_eval_examples():
    f = parse_target("sin(pi*x1)+x2^2", 2)
    assert eval_target(f, [0.5, 2.0])[0] == pytest.approx(5.0, abs=1e-15)
    sq = parse_target("sqnorm(x)", 2)
    assert eval_target(sq, [1.0, 1.0])[0] == 2.0
    np.testing.assert_array_equal(eval_target(builtin("four_curve"), [0.0]), [-1.0, 0.0])


def test_eval_batch_and_dim_check():
    f = parse_target("x1 - x2 ; x1 * x2", 2)
    X = np.array([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(eval_target(f, X), [[-1.0, 2.0], [4.0, -3.0]])
    with pytest.raises(TargetError):
        eval_target(f, [1.0, 2.0, 3.0])


def test_domain_errors():
    with pytest.raises(DomainError):
        eval_target(parse_target("1/x1", 1), [0.0])
    with pytest.raises(DomainError):
        eval_target(parse_target("exp(x1)", 1), [1e4])
    with pytest.raises(DomainError):
        eval_target(parse_target("x1^0.5", 1), [-1.0])


def test_precedence():
    f = parse_target("2 + 3 * x1 ^ 2 ^ 1 - 4 / 2 / 2", 1)
    assert eval_target(f, [2.0])[0] == 2 + 3 * 4 - 1
    # unary minus binds tighter than '^' per the grammar
    assert eval_target(parse_target("-x1^2", 1), [3.0])[0] == 9.0
    assert eval_target(parse_target("-(x1^2)", 1), [3.0])[0] == -9.0
    assert eval_target(parse_target("1 - -x1", 1), [3.0])[0] == 4.0


def test_constant_nodes_must_be_finite():
    with pytest.raises(ValueError):
        ExprNode("const", value=math.inf)


def test_builtin_examples():
    sq = builtin("sqnorm", 2)
    assert (sq.d_x, sq.d_y) == (2, 1)
    assert eval_target(sq, [3.0, 4.0])[0] == 25.0
    np.testing.assert_array_equal(eval_target(builtin("identity_d", 3), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(eval_target(builtin("swap2"), [5.0, 7.0]), [7.0, 5.0])
    with pytest.raises(TargetError):
        builtin("nope")


def _four_closed_form(t, lift=0.0):
    # vertices (-1,0) -> (1,0) -> (0,-1) -> (0,1), each leg a third of [0,1]
    out = []
    for s in t:
        if s <= 1 / 3:
            u = 3 * s
            out.append((-1 + 2 * u, 0.0, lift * (1 - u)))
        elif s <= 2 / 3:
            u = 3 * s - 1
            out.append((1 - u, -u, 0.0))
        else:
            u = 3 * s - 2
            out.append((0.0, -1 + 2 * u, 0.0))
    return np.array(out)


def test_builtins_match_closed_forms():
    rng = np.random.default_rng(11)
    X = rng.uniform(-2, 2, size=(1000, 3))
    T = rng.uniform(0, 1, size=(1000, 1))
    closed = {
        "sqnorm": (X[:, :3], (X[:, :3] ** 2).sum(axis=1, keepdims=True)),
        "identity_d": (X[:, :3], X[:, :3]),
        "swap2": (X[:, :2], X[:, [1, 0]]),
        "four_curve": (T, _four_closed_form(T[:, 0])[:, :2]),
        "four_curve_3d": (T, _four_closed_form(T[:, 0], 0.1)),
    }
    assert set(closed) == set(BUILTINS)
    for name, (inp, want) in closed.items():
        got = eval_target(builtin(name, 3), inp)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15, err_msg=name)


def test_str_uses_formatter():
    f = parse_target("x1+x2 ; sin(x1)", 2)
    assert str(f) == "x1 + x2 ; sin(x1)"


# random expression trees for the print/parse round trip
_leaf = st.one_of(
    st.builds(lambda k: ExprNode("var", value=k), st.integers(1, 3)),
    st.builds(lambda v: ExprNode("const", value=v), st.floats(0, 1e3, allow_nan=False)),
)


def _extend(children):
    return st.one_of(
        st.builds(lambda a: ExprNode("neg", (a,)), children),
        st.builds(lambda op, a: ExprNode(op, (a,)), st.sampled_from(["sin", "cos", "exp", "tanh", "abs"]), children),
        st.builds(lambda op, a, b: ExprNode(op, (a, b)), st.sampled_from(list("+-*/^")), children, children),
    )


trees = st.recursive(_leaf, _extend, max_leaves=12)


@settings(max_examples=300)
@given(trees)
def test_print_parse_idempotence(tree):
    text = format_expr(tree)
    again = parse_target(text, 3).exprs[0]
    assert again == tree
    assert format_expr(again) == text


def test_sqnorm_vector_only_inside_sqnorm():
    with pytest.raises(ParseError):
        parse_target("x + 1", 2)
    f = parse_target("sqnorm(x) + sqnorm(x1)", 2)
    assert eval_target(f, [1.0, 2.0])[0] == 6.0
    assert parse_target(format_expr(f.exprs[0]), 2).exprs[0] == f.exprs[0]
