"""
Tests for basis-expression parsing, printing, evaluation and polynomial normal form.
"""
import sys
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from bcls.errors import EvaluationError, ExpressionSyntaxError, InvalidExponentError, UnknownIdentifierError
from bcls.expressions import evaluate_basis, format_expression, referenced_states
from bcls.parser import parse_expression
from bcls.polynomial import NonPolynomial, PolynomialForm, polynomial_normal_form

FN_STATES = ["V", "R"]


def raises(exc_type, fn, *args):
    try:
        fn(*args)
    except exc_type as e:
        return e
    raise AssertionError(f"expected {exc_type.__name__}")


def test_evaluate_simple_expressions():
    """Parsed expressions evaluate with the usual precedence."""
    assert evaluate_basis(parse_expression("x*(1 - x)", ["x"]), [2.0]) == -2.0
    assert evaluate_basis(parse_expression("-V^2", FN_STATES), [3.0, 0.0]) == -9.0
    assert evaluate_basis(parse_expression("2*V - R/2", FN_STATES), [3.0, 4.0]) == 4.0
    assert evaluate_basis(parse_expression("V - R - V", FN_STATES), [1.0, 2.0]) == -2.0
    fn = parse_expression("V - V^3/3 + R", FN_STATES)
    assert abs(evaluate_basis(fn, [1.0, 0.0]) - 2.0 / 3.0) < 1e-12
    assert abs(evaluate_basis(fn, [-1.0, 1.0]) - 1.0 / 3.0) < 1e-12


def test_evaluate_vectorised():
    states = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    squared = evaluate_basis(parse_expression("V^2", FN_STATES), states)
    assert np.allclose(squared, [1.0, 4.0, 9.0])
    ones = evaluate_basis(parse_expression("1", FN_STATES), states)
    assert ones.shape == (3,)
    assert np.all(ones == 1.0)


def test_syntax_errors_carry_positions():
    e = raises(ExpressionSyntaxError, parse_expression, "V ** 3", FN_STATES)
    assert e.position == 2
    assert "'^'" in str(e)

    e = raises(UnknownIdentifierError, parse_expression, "V + Q", FN_STATES)
    assert e.name == "Q"
    assert e.position == 4

    e = raises(ExpressionSyntaxError, parse_expression, "", FN_STATES)
    assert e.position == 0

    e = raises(ExpressionSyntaxError, parse_expression, "(V + R", FN_STATES)
    assert e.position == 6

    e = raises(ExpressionSyntaxError, parse_expression, "V $ R", FN_STATES)
    assert e.position == 2


def test_exponents_must_be_non_negative_integers():
    raises(InvalidExponentError, parse_expression, "V^-1", FN_STATES)
    raises(InvalidExponentError, parse_expression, "V^1.5", FN_STATES)
    raises(InvalidExponentError, parse_expression, "V^R", FN_STATES)
    assert evaluate_basis(parse_expression("V^0", FN_STATES), [5.0, 1.0]) == 1.0


def test_division_by_zero_names_subexpression():
    expr = parse_expression("V / (R - 1)", FN_STATES)
    e = raises(EvaluationError, evaluate_basis, expr, [1.0, 1.0])
    assert e.subexpression == "R - 1.0"


def test_format_parses_back_to_same_tree():
    """Printing then parsing is the identity on trees."""
    for text in ["V - V^3/3 + R", "(-V)^2", "-V^2", "V - (R - V)", "V - R - V",
                 "(V + R)^2", "-(V + R)", "2.5*V*R", "-3", "V/2/R"]:
        expr = parse_expression(text, FN_STATES)
        printed = format_expression(expr)
        assert parse_expression(printed, FN_STATES) == expr, f"{text} → {printed}"


def test_referenced_states():
    assert referenced_states(parse_expression("V - V^3/3", FN_STATES)) == {0}
    assert referenced_states(parse_expression("V*R + 1", FN_STATES)) == {0, 1}
    assert referenced_states(parse_expression("4", FN_STATES)) == set()


def test_polynomial_normal_form():
    form = polynomial_normal_form(parse_expression("V - V^3/3 + R", FN_STATES), 2)
    assert isinstance(form, PolynomialForm)
    mapping = form.as_mapping()
    assert set(mapping) == {(1, 0), (3, 0), (0, 1)}
    assert abs(mapping[(3, 0)] + 1.0 / 3.0) < 1e-15

    square = polynomial_normal_form(parse_expression("(V + R)^2", FN_STATES), 2).as_mapping()
    assert square == {(2, 0): 1.0, (1, 1): 2.0, (0, 2): 1.0}

    halved = polynomial_normal_form(parse_expression("V/2", FN_STATES), 2).as_mapping()
    assert halved == {(1, 0): 0.5}

    assert polynomial_normal_form(parse_expression("V - V", FN_STATES), 2).monomials == ()


def test_monomial_order_is_graded():
    form = polynomial_normal_form(parse_expression("V^2 + R + V + 1", FN_STATES), 2)
    assert [m.degrees for m in form.monomials] == [(0, 0), (1, 0), (0, 1), (2, 0)]


def test_non_polynomial_division():
    result = polynomial_normal_form(parse_expression("V / R", FN_STATES), 2)
    assert isinstance(result, NonPolynomial)
    assert "state-dependent" in result.reason


def test_divide_by_state_and_back_to_expression():
    form = polynomial_normal_form(parse_expression("X - X^2", ["X"]), 1)
    divided = form.divide_by_state(0)
    assert divided.as_mapping() == {(0,): 1.0, (1,): -1.0}
    assert polynomial_normal_form(parse_expression("1 + X", ["X"]), 1).divide_by_state(0) is None

    fn = polynomial_normal_form(parse_expression("V - V^3/3 + R", FN_STATES), 2)
    rebuilt = fn.to_expression(FN_STATES)
    points = np.array([[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]])
    assert np.allclose(evaluate_basis(rebuilt, points), fn.evaluate(points))


def main():
    print("\nExpression Tests")
    print("=" * 60)
    tests = [
        test_evaluate_simple_expressions,
        test_evaluate_vectorised,
        test_syntax_errors_carry_positions,
        test_exponents_must_be_non_negative_integers,
        test_division_by_zero_names_subexpression,
        test_format_parses_back_to_same_tree,
        test_referenced_states,
        test_polynomial_normal_form,
        test_monomial_order_is_graded,
        test_non_polynomial_division,
        test_divide_by_state_and_back_to_expression,
    ]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"  ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"  ❌ {test.__name__}: {e}")
    print("=" * 60)
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
