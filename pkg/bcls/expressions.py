"""
Basis expressions: the right-hand-side building blocks of an ODE model.

Expressions are immutable pydantic trees over numeric literals, state references,
the four arithmetic operators, unary negation and non-negative integer powers.
They evaluate vectorised over numpy arrays whose first axis indexes the states.
"""
from typing import Annotated, Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import EvaluationError


class _Node(BaseModel):
    model_config = ConfigDict(frozen=True)


class Constant(_Node):
    """Numeric literal. Parsed expressions only hold non-negative literals."""
    kind: Literal["const"] = "const"
    value: float


class StateRef(_Node):
    """Reference to state `index` (0-based) of the owning model."""
    kind: Literal["state"] = "state"
    index: int = Field(ge=0)
    name: str


class BinaryOp(_Node):
    kind: Literal["binary"] = "binary"
    op: Literal["+", "-", "*", "/"]
    left: "BasisExpr"
    right: "BasisExpr"


class Negation(_Node):
    kind: Literal["neg"] = "neg"
    operand: "BasisExpr"


class Power(_Node):
    kind: Literal["pow"] = "pow"
    base: "BasisExpr"
    exponent: int = Field(ge=0)


BasisExpr = Annotated[
    Union[Constant, StateRef, BinaryOp, Negation, Power],
    Field(discriminator="kind"),
]

BinaryOp.model_rebuild()
Negation.model_rebuild()
Power.model_rebuild()


Evaluator = Callable[[np.ndarray], np.ndarray]


def compile_expression(expr: BasisExpr) -> Evaluator:
    """
    Turn an expression tree into a closure evaluating it on a state array.

    The closure takes an array of shape (s, ...) and returns an array of the
    trailing shape. Compiling once and calling many times avoids re-walking the
    tree inside ODE and quadrature loops.

    Raises:
    -------

        - EvaluationError: at call time, when a divisor evaluates to zero.
    """
    if isinstance(expr, Constant):
        value = float(expr.value)
        return lambda x: value

    if isinstance(expr, StateRef):
        index = expr.index
        return lambda x: x[index]

    if isinstance(expr, Negation):
        operand = compile_expression(expr.operand)
        return lambda x: -operand(x)

    if isinstance(expr, Power):
        base = compile_expression(expr.base)
        exponent = expr.exponent
        if exponent == 0:
            return lambda x: np.ones_like(np.asarray(base(x), dtype=float))
        if exponent == 1:
            return base
        return lambda x: base(x) ** exponent

    left = compile_expression(expr.left)
    right = compile_expression(expr.right)
    if expr.op == "+":
        return lambda x: left(x) + right(x)
    if expr.op == "-":
        return lambda x: left(x) - right(x)
    if expr.op == "*":
        return lambda x: left(x) * right(x)

    text = format_expression(expr.right)

    def divide(x):
        denominator = right(x)
        if np.any(np.asarray(denominator) == 0):
            raise EvaluationError("Division by zero in subexpression", text)
        return left(x) / denominator

    return divide


def evaluate_basis(expr: BasisExpr, state_vector) -> float | np.ndarray:
    """
    Evaluate a basis expression at a state vector (or a stack of them).

    Parameters:
    -----------

        - expr (BasisExpr): The expression to evaluate.
        - state_vector: Sequence of length s, or an array of shape (s, ...).

    Returns:
    --------

        - float for a single state vector, otherwise an array of the trailing shape.
    """
    states = np.asarray(state_vector, dtype=float)
    value = compile_expression(expr)(states)
    if states.ndim <= 1:
        return float(value)
    return np.broadcast_to(np.asarray(value, dtype=float), states.shape[1:]).copy()


def referenced_states(expr: BasisExpr) -> set[int]:
    """Indices of all states the expression reads."""
    if isinstance(expr, StateRef):
        return {expr.index}
    if isinstance(expr, Constant):
        return set()
    if isinstance(expr, Negation):
        return referenced_states(expr.operand)
    if isinstance(expr, Power):
        return referenced_states(expr.base)
    return referenced_states(expr.left) | referenced_states(expr.right)


def format_expression(expr: BasisExpr) -> str:
    """Print an expression so that parsing the text gives the same tree back."""
    return _format(expr, top=True)


def _format(expr: BasisExpr, top: bool = False) -> str:
    if isinstance(expr, Constant):
        return repr(float(expr.value))
    if isinstance(expr, StateRef):
        return expr.name
    if isinstance(expr, Negation):
        return f"-{_format(expr.operand)}"
    if isinstance(expr, Power):
        base = _format(expr.base)
        if not isinstance(expr.base, (Constant, StateRef, BinaryOp)):
            base = f"({base})"
        return f"{base}^{expr.exponent}"
    text = f"{_format(expr.left)} {expr.op} {_format(expr.right)}"
    return text if top else f"({text})"
