"""Polynomial normal form of basis expressions."""
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .expressions import BasisExpr, BinaryOp, Constant, Negation, Power, StateRef


class Monomial(BaseModel):
    """coefficient × Π_q x_q^degrees[q]"""
    model_config = ConfigDict(frozen=True)

    coefficient: float
    degrees: tuple[int, ...]

    @property
    def total_degree(self) -> int:
        return sum(self.degrees)


def _order_key(degrees: tuple[int, ...]):
    # graded by total degree, then earlier states first
    return (sum(degrees), tuple(-d for d in degrees))


class PolynomialForm(BaseModel):
    """Monomials in canonical order with like terms combined and zeros dropped."""
    model_config = ConfigDict(frozen=True)

    n_states: int
    monomials: tuple[Monomial, ...] = ()

    @classmethod
    def from_mapping(cls, n_states: int, terms: Mapping[tuple[int, ...], float]) -> "PolynomialForm":
        monomials = tuple(
            Monomial(coefficient=float(c), degrees=tuple(d))
            for d, c in sorted(terms.items(), key=lambda item: _order_key(item[0]))
            if c != 0.0
        )
        return cls(n_states=n_states, monomials=monomials)

    def as_mapping(self) -> dict[tuple[int, ...], float]:
        return {m.degrees: m.coefficient for m in self.monomials}

    @property
    def is_constant_one(self) -> bool:
        return (
            len(self.monomials) == 1
            and self.monomials[0].total_degree == 0
            and self.monomials[0].coefficient == 1.0
        )

    def referenced_states(self) -> set[int]:
        return {q for m in self.monomials for q, d in enumerate(m.degrees) if d > 0}

    def evaluate(self, state) -> float | np.ndarray:
        """Evaluate on a state vector of length s or a stack of shape (s, ...)."""
        x = np.asarray(state, dtype=float)
        total = np.zeros(x.shape[1:]) if x.ndim > 1 else 0.0
        for m in self.monomials:
            term = m.coefficient
            for q, d in enumerate(m.degrees):
                if d:
                    term = term * x[q] ** d
            total = total + term
        return float(total) if x.ndim <= 1 else np.asarray(total, dtype=float)

    def divide_by_state(self, q: int) -> "PolynomialForm | None":
        """Divide every monomial by x_q; None when some monomial lacks a factor x_q."""
        terms = {}
        for m in self.monomials:
            if m.degrees[q] < 1:
                return None
            degrees = list(m.degrees)
            degrees[q] -= 1
            terms[tuple(degrees)] = m.coefficient
        return PolynomialForm.from_mapping(self.n_states, terms)

    def to_expression(self, state_names: Sequence[str]) -> BasisExpr:
        if not self.monomials:
            return Constant(value=0.0)
        result = None
        for m in self.monomials:
            term = _monomial_expression(abs(m.coefficient), m.degrees, state_names)
            if result is None:
                result = Negation(operand=term) if m.coefficient < 0 else term
            else:
                result = BinaryOp(op="-" if m.coefficient < 0 else "+", left=result, right=term)
        return result


def _monomial_expression(magnitude: float, degrees: tuple[int, ...], state_names: Sequence[str]) -> BasisExpr:
    factors: list[BasisExpr] = []
    for q, d in enumerate(degrees):
        if d == 0:
            continue
        ref = StateRef(index=q, name=state_names[q])
        factors.append(ref if d == 1 else Power(base=ref, exponent=d))
    if magnitude != 1.0 or not factors:
        factors.insert(0, Constant(value=magnitude))
    expr = factors[0]
    for factor in factors[1:]:
        expr = BinaryOp(op="*", left=expr, right=factor)
    return expr


class NonPolynomial(BaseModel):
    model_config = ConfigDict(frozen=True)

    reason: str


class _NotPolynomial(Exception):
    pass


def _max_state(expr: BasisExpr) -> int:
    if isinstance(expr, StateRef):
        return expr.index
    if isinstance(expr, Constant):
        return -1
    if isinstance(expr, Negation):
        return _max_state(expr.operand)
    if isinstance(expr, Power):
        return _max_state(expr.base)
    return max(_max_state(expr.left), _max_state(expr.right))


def _multiply(a: dict, b: dict) -> dict:
    out: dict = {}
    for da, ca in a.items():
        for db, cb in b.items():
            key = tuple(x + y for x, y in zip(da, db))
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def _expand(expr: BasisExpr, n: int) -> dict:
    zero = (0,) * n
    if isinstance(expr, Constant):
        return {zero: float(expr.value)}
    if isinstance(expr, StateRef):
        degrees = [0] * n
        degrees[expr.index] = 1
        return {tuple(degrees): 1.0}
    if isinstance(expr, Negation):
        return {d: -c for d, c in _expand(expr.operand, n).items()}
    if isinstance(expr, Power):
        base = _expand(expr.base, n)
        result = {zero: 1.0}
        for _ in range(expr.exponent):
            result = _multiply(result, base)
        return result

    left = _expand(expr.left, n)
    right = _expand(expr.right, n)
    if expr.op in "+-":
        sign = 1.0 if expr.op == "+" else -1.0
        out = dict(left)
        for d, c in right.items():
            out[d] = out.get(d, 0.0) + sign * c
        return out
    if expr.op == "*":
        return _multiply(left, right)

    divisor = {d: c for d, c in right.items() if c != 0.0}
    if any(d != zero for d in divisor):
        raise _NotPolynomial("division by a state-dependent subexpression")
    if not divisor:
        raise _NotPolynomial("division by zero")
    scale = divisor[zero]
    return {d: c / scale for d, c in left.items()}


def polynomial_normal_form(expr: BasisExpr, n_states: int | None = None) -> PolynomialForm | NonPolynomial:
    """
    Expand an expression into a sum of monomials.

    Returns NonPolynomial when the expression divides by something that depends on
    the state. Degrees are tuples of length `n_states` (inferred from the highest
    referenced state when omitted).
    """
    n = n_states if n_states is not None else max(_max_state(expr) + 1, 1)
    try:
        terms = _expand(expr, n)
    except _NotPolynomial as e:
        return NonPolynomial(reason=str(e))
    return PolynomialForm.from_mapping(n, terms)
