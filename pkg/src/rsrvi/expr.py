"""Tiny arithmetic expression language for diffusion coefficients.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?
    atom   := NUMBER | NAME | FUNC "(" expr ("," expr)* ")" | "(" expr ")"

    NAME   := x1 | x2 | u
    FUNC   := exp | log | abs     (one argument)
            | min | max           (two or more arguments)

Expressions evaluate elementwise on numpy arrays.  ``unparse`` writes a fully
parenthesized form that parses back to the identical tree.
"""

from __future__ import annotations

import re
from typing import Union

import numpy as np

VARIABLES = ("x1", "x2", "u")
UNARY_FUNCS = {"exp": np.exp, "log": np.log, "abs": np.abs}
NARY_FUNCS = {"min": np.minimum, "max": np.maximum}

# Node forms: ("num", value) | ("var", name) | ("neg", node)
#             | ("bin", op, left, right) | ("call", name, (args...))
Node = tuple

_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(.))")


class ExprError(ValueError):
    pass


def _tokenize(text: str) -> list[tuple[str, str]]:
    out = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        num, name, sym = m.groups()
        if num is not None:
            out.append(("num", num))
        elif name is not None:
            out.append(("name", name))
        elif sym.strip():
            if sym not in "+-*/^(),":
                raise ExprError(f"unexpected character {sym!r} at {m.start(3)}")
            out.append(("sym", sym))
        pos = m.end()
    out.append(("end", ""))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None, value=None):
        tok = self.toks[self.i]
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind
            raise ExprError(f"expected {want!r}, found {tok[1] or 'end of input'!r}")
        self.i += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        self.take("end")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek() in (("sym", "+"), ("sym", "-")):
            op = self.take()[1]
            node = ("bin", op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek() in (("sym", "*"), ("sym", "/")):
            op = self.take()[1]
            node = ("bin", op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek() == ("sym", "-"):
            self.take()
            inner = self.unary()
            if inner[0] == "num":
                return ("num", -inner[1])
            return ("neg", inner)
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek() == ("sym", "^"):
            self.take()
            return ("bin", "^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val = self.peek()
        if kind == "num":
            self.take()
            return ("num", float(val))
        if kind == "name":
            self.take()
            if val in VARIABLES:
                return ("var", val)
            if val in UNARY_FUNCS or val in NARY_FUNCS:
                self.take("sym", "(")
                args = [self.expr()]
                while self.peek() == ("sym", ","):
                    self.take()
                    args.append(self.expr())
                self.take("sym", ")")
                if val in UNARY_FUNCS and len(args) != 1:
                    raise ExprError(f"{val} takes one argument, got {len(args)}")
                if val in NARY_FUNCS and len(args) < 2:
                    raise ExprError(f"{val} takes at least two arguments")
                return ("call", val, tuple(args))
            raise ExprError(f"unknown name {val!r}")
        if (kind, val) == ("sym", "("):
            self.take()
            node = self.expr()
            self.take("sym", ")")
            return node
        raise ExprError(f"unexpected token {val or 'end of input'!r}")


def parse(text: str) -> Node:
    if not isinstance(text, str):
        raise ExprError(f"expression must be a string, got {type(text).__name__}")
    return _Parser(text).parse()


def unparse(node: Node) -> str:
    tag = node[0]
    if tag == "num":
        s = repr(float(node[1]))
        return f"({s})" if node[1] < 0 or s.startswith("-") else s
    if tag == "var":
        return node[1]
    if tag == "neg":
        return f"(-{unparse(node[1])})"
    if tag == "bin":
        return f"({unparse(node[2])} {node[1]} {unparse(node[3])})"
    if tag == "call":
        return f"{node[1]}({', '.join(unparse(a) for a in node[2])})"
    raise ExprError(f"bad node {node!r}")


def evaluate(node: Node, env: dict) -> Union[np.ndarray, float]:
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        if node[1] not in env:
            raise ExprError(f"variable {node[1]!r} not available here")
        return env[node[1]]
    if tag == "neg":
        return -evaluate(node[1], env)
    if tag == "bin":
        a, b = evaluate(node[2], env), evaluate(node[3], env)
        op = node[1]
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return np.divide(a, b)
        return np.power(a, b)
    if tag == "call":
        args = [evaluate(a, env) for a in node[2]]
        if node[1] in UNARY_FUNCS:
            return UNARY_FUNCS[node[1]](args[0])
        out = args[0]
        for a in args[1:]:
            out = NARY_FUNCS[node[1]](out, a)
        return out
    raise ExprError(f"bad node {node!r}")


def variables(node: Node) -> set[str]:
    tag = node[0]
    if tag == "var":
        return {node[1]}
    if tag == "neg":
        return variables(node[1])
    if tag == "bin":
        return variables(node[2]) | variables(node[3])
    if tag == "call":
        return set().union(*(variables(a) for a in node[2]))
    return set()


class Expr:
    """A parsed expression, callable on state arrays ``x`` of shape ``(N, dim)``."""

    def __init__(self, text: str):
        self.tree = parse(text)
        self.text = text

    def __call__(self, x: np.ndarray, u: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        env = {"u": u}
        for i in range(x.shape[1]):
            env[f"x{i + 1}"] = x[:, i]
        with np.errstate(all="ignore"):
            out = evaluate(self.tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    def __repr__(self):
        return f"Expr({self.text!r})"
