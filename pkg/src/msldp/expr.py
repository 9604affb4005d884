"""Coefficient expressions: parser, evaluator, exact differentiator.

Grammar (precedence low to high; ``^`` is right associative, everything
else left associative)::

    expr   :=  term (('+'|'-') term)*
    term   :=  unary (('*'|'/') unary)*
    unary  :=  '-' unary | power
    power  :=  atom ['^' exponent]         exponent := '-' exponent | power
    atom   :=  NUMBER | NAME '(' expr ')' | NAME | '(' expr ')'

so ``-x^2`` is ``-(x^2)`` and ``2^3^2`` is ``2^(3^2)``.  There is no
implicit multiplication: ``2x`` is rejected.  Functions: sin, cos, tan,
exp, log, sqrt, abs (plus sign, which appears in derivatives of abs).
``pi`` is a built-in constant.  The unicode minus sign is accepted as a
synonym for ``-``.

Expressions are immutable; evaluation is reentrant and deterministic.
Symbolic derivatives are simplified only by constant folding and 0/1
elimination, so they can be differentiated again.
"""

import math
import re

import numpy as np

from .errors import EvalError, ParseError

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "sign")

_NUMPY_FN = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "sign": np.sign,
}

_MATH_FN = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "exp": math.exp,
    "log": math.log, "sqrt": math.sqrt, "abs": abs,
    "sign": lambda v: (v > 0) - (v < 0),
}


# ---------------------------------------------------------------------------
# AST


class Expression:
    """Base node. Subclasses are frozen after construction."""

    __slots__ = ()

    def __str__(self):
        return to_source(self)

    def __repr__(self):
        return f"{type(self).__name__}({to_source(self)!r})"

    def __eq__(self, other):
        return type(self) is type(other) and self._key() == other._key()

    def __hash__(self):
        return hash((type(self).__name__, self._key()))


class Num(Expression):
    __slots__ = ("value",)

    def __init__(self, value):
        object.__setattr__(self, "value", float(value))

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _key(self):
        return (self.value,)


class Name(Expression):
    __slots__ = ("ident",)

    def __init__(self, ident):
        object.__setattr__(self, "ident", ident)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _key(self):
        return (self.ident,)


class Neg(Expression):
    __slots__ = ("arg",)

    def __init__(self, arg):
        object.__setattr__(self, "arg", arg)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _key(self):
        return (self.arg,)


class BinOp(Expression):
    __slots__ = ("left", "right")
    op = "?"

    def __init__(self, left, right):
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _key(self):
        return (self.left, self.right)


class Add(BinOp):
    __slots__ = ()
    op = "+"


class Sub(BinOp):
    __slots__ = ()
    op = "-"


class Mul(BinOp):
    __slots__ = ()
    op = "*"


class Div(BinOp):
    __slots__ = ()
    op = "/"


class Pow(BinOp):
    __slots__ = ()
    op = "^"


class Call(Expression):
    __slots__ = ("fn", "arg")

    def __init__(self, fn, arg):
        object.__setattr__(self, "fn", fn)
        object.__setattr__(self, "arg", arg)

    def __setattr__(self, *a):
        raise AttributeError("expressions are immutable")

    def _key(self):
        return (self.fn, self.arg)


# ---------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()−]))"
)


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            off = len(source) - len(stripped)
            raise ParseError(source, off, {"number", "identifier", "operator"},
                             repr(stripped[0]))
        if m.lastgroup == "num":
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.lastgroup == "name":
            name = m.group("name")
            if name.startswith("__"):
                raise ParseError(source, m.start("name"), {"identifier"},
                                 f"reserved name {name!r}")
            tokens.append(("name", name, m.start("name")))
        else:
            op = m.group("op")
            if op == "−":
                op = "-"
            tokens.append((op, op, m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, expected):
        kind, text, off = self.peek()
        found = "end of input" if kind == "end" else repr(text)
        raise ParseError(self.source, off, expected, found)

    def expect(self, kind):
        if self.peek()[0] != kind:
            self.fail({kind})
        return self.advance()

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            self.fail({"operator", "end of input"})
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.advance()[0]
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] in ("*", "/"):
            op = self.advance()[0]
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self):
        if self.peek()[0] == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "^":
            self.advance()
            return Pow(base, self.exponent())
        return base

    def exponent(self):
        if self.peek()[0] == "-":
            self.advance()
            return Neg(self.exponent())
        return self.power()

    def atom(self):
        kind, text, off = self.peek()
        if kind == "num":
            self.advance()
            return Num(float(text))
        if kind == "name":
            self.advance()
            if text in FUNCTIONS and self.peek()[0] == "(":
                self.advance()
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            return Name(text)
        if kind == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        self.fail({"number", "identifier", "("})


def parse(source: str) -> Expression:
    """Parse a source string into an expression tree."""
    return _Parser(source).parse()


# ---------------------------------------------------------------------------
# Pretty printer (canonical form; parse(to_source(e)) reproduces e)

_PRECEDENCE = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _prec(node):
    if isinstance(node, (Num, Name, Call)):
        return 5
    return _PRECEDENCE[type(node)]


def _fmt_num(v):
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_source(node: Expression) -> str:
    """Render a canonical source string with minimal parentheses."""
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Name):
        return node.ident
    if isinstance(node, Call):
        return f"{node.fn}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.arg)
        if _prec(node.arg) < _PRECEDENCE[Neg] or isinstance(node.arg, Neg):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, BinOp):
        lp, rp = _prec(node.left), _prec(node.right)
        p = _prec(node)
        left = to_source(node.left)
        right = to_source(node.right)
        if isinstance(node, Pow):
            # right associative; exponent may be a bare Neg
            if lp <= p:
                left = f"({left})"
            if rp < p and not isinstance(node.right, Neg):
                right = f"({right})"
        else:
            if lp < p:
                left = f"({left})"
            if rp < p or (rp == p and isinstance(node, (Sub, Div))) \
                    or (rp == p and isinstance(node.right, Neg)):
                right = f"({right})"
        return f"{left}{node.op}{right}"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Checked scalar evaluation


def evaluate(node: Expression, bindings: dict) -> float:
    """Evaluate with full domain checking; IEEE double result.

    Unbound identifiers and domain errors (log of a non-positive value,
    sqrt of a negative value, division by zero, 0 raised to a negative
    power) raise :class:`EvalError` reporting the offending operand.
    """
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        if node.ident == "pi":
            return math.pi
        try:
            return float(bindings[node.ident])
        except KeyError:
            raise EvalError(f"unbound identifier {node.ident!r}") from None
    if isinstance(node, Neg):
        return -evaluate(node.arg, bindings)
    if isinstance(node, Call):
        v = evaluate(node.arg, bindings)
        if node.fn == "log" and v <= 0.0:
            raise EvalError(f"log of non-positive operand {v!r}")
        if node.fn == "sqrt" and v < 0.0:
            raise EvalError(f"sqrt of negative operand {v!r}")
        return float(_MATH_FN[node.fn](v))
    a = evaluate(node.left, bindings)
    b = evaluate(node.right, bindings)
    if isinstance(node, Add):
        return a + b
    if isinstance(node, Sub):
        return a - b
    if isinstance(node, Mul):
        return a * b
    if isinstance(node, Div):
        if b == 0.0:
            raise EvalError(f"division by zero ({to_source(node.right)} = 0)")
        return a / b
    if isinstance(node, Pow):
        if a == 0.0 and b < 0.0:
            raise EvalError(f"0 raised to negative power {b!r}")
        if a < 0.0 and b != int(b):
            raise EvalError(f"negative base {a!r} with non-integer exponent {b!r}")
        return a ** b
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Symbolic differentiation with light simplification


def _is_num(node, value=None):
    return isinstance(node, Num) and (value is None or node.value == value)


def _add(a, b):
    if _is_num(a) and _is_num(b):
        return Num(a.value + b.value)
    if _is_num(a, 0.0):
        return b
    if _is_num(b, 0.0):
        return a
    return Add(a, b)


def _sub(a, b):
    if _is_num(a) and _is_num(b):
        return Num(a.value - b.value)
    if _is_num(b, 0.0):
        return a
    if _is_num(a, 0.0):
        return _neg(b)
    return Sub(a, b)


def _neg(a):
    if _is_num(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _mul(a, b):
    if _is_num(a) and _is_num(b):
        return Num(a.value * b.value)
    if _is_num(a, 0.0) or _is_num(b, 0.0):
        return Num(0.0)
    if _is_num(a, 1.0):
        return b
    if _is_num(b, 1.0):
        return a
    return Mul(a, b)


def _div(a, b):
    if _is_num(a, 0.0):
        return Num(0.0)
    if _is_num(b, 1.0):
        return a
    if _is_num(a) and _is_num(b) and b.value != 0.0:
        return Num(a.value / b.value)
    return Div(a, b)


def _pow(a, b):
    if _is_num(b, 1.0):
        return a
    if _is_num(b, 0.0):
        return Num(1.0)
    if _is_num(a) and _is_num(b):
        return Num(a.value ** b.value)
    return Pow(a, b)


def differentiate(node: Expression, var: str) -> Expression:
    """Exact symbolic derivative with respect to ``var``.

    abs is differentiated as sign (with sign(0) = 0); sign itself has
    derivative 0 everywhere.
    """
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Name):
        if node.ident == var:
            return Num(1.0)
        return Num(0.0)
    if isinstance(node, Neg):
        return _neg(differentiate(node.arg, var))
    if isinstance(node, Add):
        return _add(differentiate(node.left, var), differentiate(node.right, var))
    if isinstance(node, Sub):
        return _sub(differentiate(node.left, var), differentiate(node.right, var))
    if isinstance(node, Mul):
        u, v = node.left, node.right
        du, dv = differentiate(u, var), differentiate(v, var)
        return _add(_mul(du, v), _mul(u, dv))
    if isinstance(node, Div):
        u, v = node.left, node.right
        du, dv = differentiate(u, var), differentiate(v, var)
        return _div(_sub(_mul(du, v), _mul(u, dv)), _pow(v, Num(2.0)))
    if isinstance(node, Pow):
        u, v = node.left, node.right
        du = differentiate(u, var)
        if _is_num(v):
            return _mul(_mul(v, _pow(u, Num(v.value - 1.0))), du)
        dv = differentiate(v, var)
        # general case: u^v * (dv*log(u) + v*du/u)
        return _mul(_pow(u, v),
                    _add(_mul(dv, Call("log", u)), _div(_mul(v, du), u)))
    if isinstance(node, Call):
        u = node.arg
        du = differentiate(u, var)
        if node.fn == "sin":
            outer = Call("cos", u)
        elif node.fn == "cos":
            outer = _neg(Call("sin", u))
        elif node.fn == "tan":
            outer = _div(Num(1.0), _pow(Call("cos", u), Num(2.0)))
        elif node.fn == "exp":
            outer = Call("exp", u)
        elif node.fn == "log":
            outer = _div(Num(1.0), u)
        elif node.fn == "sqrt":
            outer = _div(Num(0.5), Call("sqrt", u))
        elif node.fn == "abs":
            outer = Call("sign", u)
        elif node.fn == "sign":
            return Num(0.0)
        else:  # pragma: no cover
            raise ValueError(f"unknown function {node.fn!r}")
        return _mul(outer, du)
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Utilities: free names, substitution, vectorized compilation


def free_names(node: Expression) -> set:
    """Identifiers appearing in the tree, excluding the constant pi."""
    out = set()

    def walk(n):
        if isinstance(n, Name):
            if n.ident != "pi":
                out.add(n.ident)
        elif isinstance(n, Neg):
            walk(n.arg)
        elif isinstance(n, Call):
            walk(n.arg)
        elif isinstance(n, BinOp):
            walk(n.left)
            walk(n.right)

    walk(node)
    return out


def substitute(node: Expression, mapping: dict) -> Expression:
    """Replace identifiers by sub-expressions (simultaneously)."""
    if isinstance(node, Num):
        return node
    if isinstance(node, Name):
        return mapping.get(node.ident, node)
    if isinstance(node, Neg):
        return _neg(substitute(node.arg, mapping))
    if isinstance(node, Call):
        return Call(node.fn, substitute(node.arg, mapping))
    if isinstance(node, BinOp):
        return type(node)(substitute(node.left, mapping),
                          substitute(node.right, mapping))
    raise TypeError(f"not an expression node: {node!r}")


def _codegen(node, args):
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Name):
        if node.ident == "pi":
            return "__np.pi"
        if node.ident not in args:
            raise EvalError(f"unbound identifier {node.ident!r}")
        return node.ident
    if isinstance(node, Neg):
        return f"(-{_codegen(node.arg, args)})"
    if isinstance(node, Call):
        return f"__np.{'abs' if node.fn == 'abs' else node.fn}({_codegen(node.arg, args)})"
    if isinstance(node, Pow):
        return f"({_codegen(node.left, args)})**({_codegen(node.right, args)})"
    if isinstance(node, BinOp):
        return f"({_codegen(node.left, args)}{node.op}{_codegen(node.right, args)})"
    raise TypeError(f"not an expression node: {node!r}")


def compile_fn(node: Expression, arg_names):
    """Compile to a fast numpy-vectorized callable of the given arguments.

    The compiled function follows IEEE semantics (domain violations yield
    nan/inf rather than raising); use :func:`evaluate` for checked scalar
    evaluation.
    """
    arg_names = tuple(arg_names)
    missing = free_names(node) - set(arg_names)
    if missing:
        raise EvalError(f"unbound identifier(s) {sorted(missing)!r}")
    body = _codegen(node, set(arg_names))
    src = f"def __f({', '.join(arg_names)}):\n    return {body}\n"
    ns = {"__np": np}
    exec(src, ns)  # noqa: S102 - source is generated from our own AST
    fn = ns["__f"]
    fn.__expr_source__ = src
    return fn
