import re
from typing import NamedTuple, Sequence

from .errors import ExpressionSyntaxError, InvalidExponentError, UnknownIdentifierError
from .expressions import BasisExpr, BinaryOp, Constant, Negation, Power, StateRef

_TOKEN_PATTERN = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()])"
    r"|(?P<bad>\S)"
    r")"
)

# Binding powers: ^ binds tighter than unary minus, which binds tighter than * and /.
_BINDING = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 30, "**": 30}
_UNARY_BINDING = 25


class Token(NamedTuple):
    kind: str
    text: str
    position: int


def tokenize(text: str) -> list[Token]:
    """Split expression text into tokens, each tagged with its 0-based position."""
    tokens = []
    for match in _TOKEN_PATTERN.finditer(text):
        kind = match.lastgroup
        if kind is None:
            continue
        tokens.append(Token(kind, match.group(kind), match.start(kind)))
    tokens.append(Token("end", "", len(text)))
    return tokens


class ExpressionParser:
    """
    Pratt parser for basis expressions.

    Grammar: standard infix arithmetic with `+ - * /`, unary minus, parentheses,
    and `^` followed by a non-negative integer literal. Identifiers must name a
    state of the model.
    """

    def __init__(self, text: str, state_names: Sequence[str]):
        self.text = text
        self.state_names = list(state_names)
        self.tokens = tokenize(text)
        self.index = 0

    def parse(self) -> BasisExpr:
        if not self.text.strip():
            raise ExpressionSyntaxError("Empty expression", 0, self.text)
        expr = self.expression(0)
        token = self.peek()
        if token.kind != "end":
            raise ExpressionSyntaxError(f"Unexpected '{token.text}'", token.position, self.text)
        return expr

    def peek(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        if token.kind != "end":
            self.index += 1
        return token

    def binding(self, token: Token) -> int:
        if token.kind != "op":
            return 0
        return _BINDING.get(token.text, 0)

    def expression(self, rbp: int) -> BasisExpr:
        left = self.prefix(self.advance())
        while rbp < self.binding(self.peek()):
            left = self.infix(self.advance(), left)
        return left

    def prefix(self, token: Token) -> BasisExpr:
        if token.kind == "number":
            return Constant(value=float(token.text))
        if token.kind == "name":
            if token.text not in self.state_names:
                raise UnknownIdentifierError(token.text, token.position, self.text)
            return StateRef(index=self.state_names.index(token.text), name=token.text)
        if token.text == "(":
            inner = self.expression(0)
            closing = self.advance()
            if closing.text != ")":
                raise ExpressionSyntaxError("Expected ')'", closing.position, self.text)
            return inner
        if token.text == "-":
            return Negation(operand=self.expression(_UNARY_BINDING))
        if token.text == "+":
            return self.expression(_UNARY_BINDING)
        self._unexpected(token)

    def infix(self, token: Token, left: BasisExpr) -> BasisExpr:
        if token.text == "^":
            return Power(base=left, exponent=self.exponent())
        if token.text == "**":
            raise ExpressionSyntaxError("Unsupported operator '**' (use '^')", token.position, self.text)
        right = self.expression(_BINDING[token.text])
        return BinaryOp(op=token.text, left=left, right=right)

    def exponent(self) -> int:
        token = self.advance()
        if token.text == "-":
            raise InvalidExponentError("Negative exponent", token.position, self.text)
        if token.kind != "number":
            raise InvalidExponentError(
                "Exponent must be a non-negative integer literal", token.position, self.text
            )
        if not token.text.isdigit():
            raise InvalidExponentError(f"Non-integer exponent '{token.text}'", token.position, self.text)
        return int(token.text)

    def _unexpected(self, token: Token):
        if token.kind == "end":
            raise ExpressionSyntaxError("Unexpected end of expression", token.position, self.text)
        if token.kind == "bad":
            raise ExpressionSyntaxError(f"Unexpected character '{token.text}'", token.position, self.text)
        if token.text == "**":
            raise ExpressionSyntaxError("Unsupported operator '**' (use '^')", token.position, self.text)
        raise ExpressionSyntaxError(f"Unexpected '{token.text}'", token.position, self.text)


def parse_expression(text: str, state_names: Sequence[str]) -> BasisExpr:
    """
    Parse vector-field text such as "V - V^3/3 + R" into a basis expression.

    Raises:
    -------

        - ExpressionSyntaxError: malformed text; `position` is the 0-based offset.
        - UnknownIdentifierError: an identifier that is not a state name.
        - InvalidExponentError: a negative or non-integer exponent.
    """
    return ExpressionParser(text, state_names).parse()
