import ast
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcalc.exprdsl import (
    BinOp,
    Call,
    EvalError,
    Neg,
    Num,
    ParseError,
    Var,
    parse,
    pretty,
)


@pytest.mark.parametrize("src, t, x, expected", [
    ("2+3*4", 0.0, 0.0, 14.0),
    ("2*x + t", 1.0, 3.0, 7.0),
    ("exp(−x^2)", 0.0, 0.0, 1.0),
    ("-x^2", 0.0, 3.0, -9.0),
    ("2^3^2", 0.0, 0.0, 512.0),
    ("2^-1", 0.0, 0.0, 0.5),
    ("(1 - x) * (1 + x)", 0.0, 2.0, -3.0),
    ("8 / 4 / 2", 0.0, 0.0, 1.0),
    ("10 - 4 - 3", 0.0, 0.0, 3.0),
    ("abs(x) + sqrt(4) + erf(0) + cos(0) + sin(0)", 0.0, -1.5, 4.5),
    ("1.5e2 + .5", 0.0, 0.0, 150.5),
])
def test_precedence_goldens(src, t, x, expected):
    assert parse(src)(t, x) == expected


def test_unary_minus_binds_looser_than_power():
    assert parse("-x^2").root == Neg(BinOp("^", Var("x"), Num(2.0)))
    assert parse("−x^2").root == parse("-(x^2)").root


@pytest.mark.parametrize("src, message, offset", [
    ("x*(1−x", "unbalanced parenthesis", 6),
    ("x*(1-x", "unbalanced parenthesis", 6),
    ("(1+2))", "unbalanced parenthesis", 5),
    (")", "unbalanced parenthesis", 0),
    ("foo + 1", "unknown identifier 'foo'", 0),
    ("2 + y", "unknown identifier 'y'", 4),
    ("1 2", "unexpected trailing token '2'", 2),
    ("2 +", "unexpected end of expression", 3),
    ("exp 2", "expected '(' after exp", 4),
    ("3 $ 4", "unexpected character '$'", 2),
    ("", "unexpected end of expression", 0),
])
def test_error_offset_goldens(src, message, offset):
    with pytest.raises(ParseError) as exc:
        parse(src)
    assert exc.value.offset == offset
    assert str(exc.value) == f"{message} at offset {offset}"


@pytest.mark.parametrize("src, x, at", [
    ("1/x", 0.0, 1),
    ("sqrt(x - 1)", 0.0, 0),
    ("x^0.5", -1.0, 1),
    ("exp(x)^1000", 1.0, 6),
])
def test_evaluation_errors_are_located(src, x, at):
    with pytest.raises(EvalError) as exc:
        parse(src)(0.0, x)
    assert exc.value.offset == at


def test_vectorised_evaluation():
    e = parse("t * x^2")
    x = np.linspace(-1, 1, 5)
    assert np.array_equal(e(2.0, x), 2.0 * x ** 2)
    assert parse("3")(0.0, x) == 3.0


def test_custom_variables():
    e = parse("x1 * x2", variables=("x1", "x2"))
    assert e(2.0, 3.0) == 6.0
    with pytest.raises(ParseError, match="unknown identifier 'x'"):
        parse("x", variables=("x1", "x2"))


def test_determinism():
    e = parse("exp(sin(x) * t) / (1 + x^2)")
    a = e(0.3, np.linspace(-3, 3, 101))
    b = parse("exp(sin(x) * t) / (1 + x^2)")(0.3, np.linspace(-3, 3, 101))
    assert a.tobytes() == b.tobytes()


# --- random well-formed trees -------------------------------------------------

FUNCS = ["exp", "sin", "cos", "sqrt", "abs", "erf"]


def random_tree(rng: np.random.Generator, depth: int):
    if depth == 0 or rng.random() < 0.2:
        r = rng.random()
        if r < 0.4:
            return Var(["t", "x"][rng.integers(2)])
        value = float(rng.choice([0.0, 1.0, 2.0, 0.5, 3.25, 1e-3, 12.0, 1e20]))
        return Num(value)
    kind = rng.integers(4)
    if kind == 0:
        return Neg(random_tree(rng, depth - 1))
    if kind == 1:
        return Call(FUNCS[rng.integers(len(FUNCS))], random_tree(rng, depth - 1))
    op = "+-*/^"[rng.integers(5)]
    return BinOp(op, random_tree(rng, depth - 1), random_tree(rng, depth - 1))


def python_oracle(src: str, t: float, x: float):
    """Evaluate with CPython's own parser and float arithmetic."""
    tree = ast.parse(src.replace("^", "**").replace("−", "-"), mode="eval")
    fns = {"exp": math.exp, "sin": math.sin, "cos": math.cos, "sqrt": math.sqrt,
           "abs": abs, "erf": math.erf}

    def ev(n):
        if isinstance(n, ast.Expression):
            return ev(n.body)
        if isinstance(n, ast.Constant) and isinstance(n.value, (int, float)) and not isinstance(n.value, bool):
            return float(n.value)
        if isinstance(n, ast.Name) and n.id in ("t", "x"):
            return {"t": t, "x": x}[n.id]
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, ast.USub):
            return -ev(n.operand)
        if isinstance(n, ast.Call) and isinstance(n.func, ast.Name) and n.func.id in fns and len(n.args) == 1:
            return fns[n.func.id](ev(n.args[0]))
        if isinstance(n, ast.BinOp):
            a, b = ev(n.left), ev(n.right)
            ops = {ast.Add: lambda: a + b, ast.Sub: lambda: a - b, ast.Mult: lambda: a * b,
                   ast.Div: lambda: a / b, ast.Pow: lambda: a ** b}
            if type(n.op) in ops:
                v = ops[type(n.op)]()
                if isinstance(v, complex) or not math.isfinite(v):
                    raise ValueError("domain")
                return v
        raise SyntaxError("outside the dialect")

    return ev(tree)


def _ours(expr, t, x):
    try:
        return expr(t, x)
    except EvalError:
        return "error"


def _theirs(src, t, x):
    try:
        return python_oracle(src, t, x)
    except (ZeroDivisionError, ValueError, OverflowError):
        return "error"


def _agree(a, b) -> bool:
    if a == "error" or b == "error":
        return a == b
    return a == pytest.approx(b, rel=1e-12, abs=1e-300) or (math.isnan(a) and math.isnan(b))


def test_round_trip_and_oracle_on_random_trees():
    rng = np.random.default_rng(2024)
    for _ in range(2000):
        tree = random_tree(rng, int(rng.integers(0, 7)))
        src = pretty(tree)
        parsed = parse(src)
        assert parsed.root == tree, src
        assert parse(str(parsed)).root == tree
        for t, x in ((0.3, -1.7), (1.0, 2.5)):
            assert _agree(_ours(parsed, t, x), _theirs(src, t, x)), src


def test_fuzz_mutations_never_crash():
    rng = np.random.default_rng(7)
    alphabet = list("tx0123456789.+-*/^() e") + ["−", "exp", "sin(", "q", "$"]
    failures = []
    for i in range(10_000):
        src = pretty(random_tree(rng, int(rng.integers(0, 7))))
        chars = list(src)
        for _ in range(int(rng.integers(1, 4))):
            op = rng.integers(3)
            pos = int(rng.integers(0, len(chars) + 1))
            if op == 0 and chars:
                del chars[min(pos, len(chars) - 1)]
            elif op == 1:
                chars.insert(pos, alphabet[rng.integers(len(alphabet))])
            elif chars:
                j = min(pos, len(chars) - 1)
                k = int(rng.integers(0, len(chars)))
                chars[j], chars[k] = chars[k], chars[j]
        mutated = "".join(chars)
        try:
            expr = parse(mutated)
        except ParseError as err:
            assert 0 <= err.offset <= len(mutated)
            continue
        except Exception as err:  # any other exception is a crash
            failures.append((mutated, repr(err)))
            continue
        # whatever parsed must mean what CPython reads from the same text
        try:
            python_oracle(mutated, 0.3, -1.7)
        except SyntaxError:
            continue
        except (ZeroDivisionError, ValueError, OverflowError):
            pass
        if not _agree(_ours(expr, 0.3, -1.7), _theirs(mutated, 0.3, -1.7)):
            failures.append((mutated, "disagrees with oracle"))
    assert not failures, failures[:5]


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet="tx0123456789.+-−*/^() abcdefghijklmnopqrstuvwxyz,;", max_size=30))
def test_arbitrary_text_is_parsed_or_located(src):
    try:
        parse(src)
    except ParseError as err:
        assert 0 <= err.offset <= len(src)
