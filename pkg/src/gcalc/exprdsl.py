"""Scalar coefficient expressions for experiment configs.

Grammar (whitespace insensitive; ASCII ``-`` and ``−`` are both minus)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?
    atom   := number | variable | name '(' expr ')' | '(' expr ')'

Power is right associative and binds tighter than unary minus, so
``-x^2`` is ``-(x^2)`` and ``2^-1`` is ``0.5``.  Functions: ``exp``,
``sin``, ``cos``, ``sqrt``, ``abs``, ``erf``.  Error offsets count
characters from 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import erf

FUNCTIONS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "erf": erf,
}
DEFAULT_VARIABLES = ("t", "x")
MINUS = "−"


class ExprError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class ParseError(ExprError):
    pass


class EvalError(ExprError):
    pass


# --- AST --------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    operand: "Node"
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"
    offset: int = field(default=0, compare=False)


Node = Union[Num, Var, Neg, BinOp, Call]


@dataclass(frozen=True)
class Expr:
    """A parsed expression together with its variable names."""

    root: Node
    variables: tuple = DEFAULT_VARIABLES
    source: str = field(default="", compare=False)

    def __call__(self, *args, **kwargs):
        return evaluate(self, *args, **kwargs)

    def __str__(self) -> str:
        return pretty(self.root)


# --- tokenizer --------------------------------------------------------------

_NUMBER = re.compile(r"(\d+\.?\d*|\.\d+)([eE][+\-]?\d+)?")
_NAME = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


@dataclass(frozen=True)
class Token:
    kind: str  # num, name, op, end
    text: str
    offset: int


def tokenize(src: str) -> list[Token]:
    out = []
    i, n = 0, len(src)
    while i < n:
        c = src[i]
        if c.isspace():
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            m = _NUMBER.match(src, i)
            out.append(Token("num", m.group(0), i))
            i = m.end()
            continue
        if c.isalpha() or c == "_":
            m = _NAME.match(src, i)
            out.append(Token("name", m.group(0), i))
            i = m.end()
            continue
        if c == MINUS:
            c = "-"
        if c in "+-*/^()":
            out.append(Token("op", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {src[i]!r}", i)
    out.append(Token("end", "", n))
    return out


# --- parser -----------------------------------------------------------------

class _Parser:
    def __init__(self, src: str, variables: Sequence[str]):
        self.tokens = tokenize(src)
        self.pos = 0
        self.variables = tuple(variables)
        self.open_parens: list[int] = []

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def take(self) -> Token:
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def at_op(self, *ops: str) -> bool:
        return self.tok.kind == "op" and self.tok.text in ops

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            if self.at_op(")"):
                raise ParseError("unbalanced parenthesis", self.tok.offset)
            raise ParseError(f"unexpected trailing token {self.tok.text!r}", self.tok.offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.at_op("+", "-"):
            op = self.take()
            node = BinOp(op.text, node, self.term(), op.offset)
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.at_op("*", "/"):
            op = self.take()
            node = BinOp(op.text, node, self.factor(), op.offset)
        return node

    def factor(self) -> Node:
        if self.at_op("-"):
            op = self.take()
            return Neg(self.factor(), op.offset)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.at_op("^"):
            op = self.take()
            return BinOp("^", base, self.factor(), op.offset)
        return base

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.take()
            return Num(float(tok.text), tok.offset)
        if tok.kind == "name":
            self.take()
            if tok.text in self.variables:
                return Var(tok.text, tok.offset)
            if tok.text in FUNCTIONS:
                if not self.at_op("("):
                    raise ParseError(f"expected '(' after {tok.text}", self.tok.offset)
                self.take()
                arg = self.expr()
                self.close(tok.offset + len(tok.text))
                return Call(tok.text, arg, tok.offset)
            raise ParseError(f"unknown identifier {tok.text!r}", tok.offset)
        if self.at_op("("):
            self.take()
            inner = self.expr()
            self.close(tok.offset)
            return inner
        if tok.kind == "end":
            raise ParseError("unexpected end of expression", tok.offset)
        if tok.text == ")":
            raise ParseError("unbalanced parenthesis", tok.offset)
        raise ParseError(f"unexpected token {tok.text!r}", tok.offset)

    def close(self, open_offset: int) -> None:
        if self.at_op(")"):
            self.take()
            return
        if self.tok.kind == "end":
            raise ParseError("unbalanced parenthesis", self.tok.offset)
        raise ParseError(f"expected ')' but found {self.tok.text!r}", self.tok.offset)


def parse(src: str, variables: Sequence[str] = DEFAULT_VARIABLES) -> Expr:
    """Parse ``src``; identifiers other than ``variables`` and the built-in
    functions are rejected."""
    if not isinstance(src, str):
        src = repr(src) if isinstance(src, (int, float)) else str(src)
    for v in variables:
        if not _NAME.fullmatch(v) or v in FUNCTIONS:
            raise ValueError(f"invalid variable name {v!r}")
    return Expr(_Parser(src, variables).parse(), tuple(variables), src)


# --- evaluation -------------------------------------------------------------

def evaluate(expr: Expr, *args, **kwargs):
    """Evaluate with variables given positionally (in declaration order) or
    by keyword; numpy arrays broadcast.  Scalars in give a float out."""
    if len(args) > len(expr.variables):
        raise TypeError("too many arguments")
    env = dict(zip(expr.variables, args))
    env.update(kwargs)
    missing = [v for v in expr.variables if v not in env and _uses(expr.root, v)]
    if missing:
        raise TypeError(f"missing value for {missing[0]}")
    env = {k: np.asarray(v, dtype=float) for k, v in env.items()}
    with np.errstate(all="ignore"):
        out = _eval(expr.root, env)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _uses(node: Node, name: str) -> bool:
    if isinstance(node, Var):
        return node.name == name
    if isinstance(node, Neg):
        return _uses(node.operand, name)
    if isinstance(node, Call):
        return _uses(node.arg, name)
    if isinstance(node, BinOp):
        return _uses(node.left, name) or _uses(node.right, name)
    return False


def _check(value, node: Node, what: str):
    if not np.all(np.isfinite(value)):
        raise EvalError(what, node.offset)
    return value


def _eval(node: Node, env: dict):
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, env)
    if isinstance(node, Call):
        arg = _eval(node.arg, env)
        if node.func == "sqrt" and np.any(arg < 0):
            raise EvalError("sqrt of a negative number", node.offset)
        return _check(FUNCTIONS[node.func](arg), node, f"{node.func} overflow")
    left = _eval(node.left, env)
    right = _eval(node.right, env)
    if node.op == "+":
        return _check(left + right, node, "overflow")
    if node.op == "-":
        return _check(left - right, node, "overflow")
    if node.op == "*":
        return _check(left * right, node, "overflow")
    if node.op == "/":
        if np.any(right == 0):
            raise EvalError("division by zero", node.offset)
        return _check(left / right, node, "overflow")
    if np.any((left < 0) & (np.asarray(right) != np.round(right))):
        raise EvalError("non-integer power of a negative number", node.offset)
    if np.any((left == 0) & (np.asarray(right) < 0)):
        raise EvalError("division by zero", node.offset)
    return _check(np.power(left, right), node, "overflow")


# --- printing ---------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def pretty(node: Node) -> str:
    """Fully parenthesised-where-needed source that re-parses to ``node``."""
    return _pretty(node)


def _number(v: float) -> str:
    v = float(v)
    if not np.isfinite(v):
        raise ValueError("non-finite literal")
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _pretty(node: Node) -> str:
    if isinstance(node, Num):
        # literals are non-negative; negation lives in Neg nodes
        return _number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({_pretty(node.arg)})"
    if isinstance(node, Neg):
        inner = _pretty(node.operand)
        if isinstance(node.operand, BinOp) and _PREC[node.operand.op] < _PREC["^"]:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[node.op]
    left, right = _pretty(node.left), _pretty(node.right)
    if node.op == "^":
        if isinstance(node.left, (BinOp, Neg)):
            left = f"({left})"
        if isinstance(node.right, BinOp) and node.right.op != "^":
            right = f"({right})"
        return f"{left}^{right}"
    if isinstance(node.left, BinOp) and _PREC[node.left.op] < p:
        left = f"({left})"
    if isinstance(node.right, BinOp) and _PREC[node.right.op] <= p:
        right = f"({right})"
    if isinstance(node.right, Neg):
        right = f"({right})"
    return f"{left} {node.op} {right}"
