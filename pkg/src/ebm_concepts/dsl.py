"""Textual DSL for composition expressions.

Grammar (ASCII, case-sensitive keywords, whitespace insignificant):

    expr  := "AND" "(" expr { "," expr } ")"
           | "OR"  "(" expr { "," expr } ")"
           | "NOT" "(" expr "," expr [ "," "alpha" "=" float ] ")"
           | leaf
    leaf  := ident "(" [ param { "," param } ] ")"
    param := ident "=" (float | ident)

``NOT(negated, grounding)`` takes exactly two expressions; a bare negation
is a parse error because negation is only defined against a grounding
concept.  ``format_expr`` renders canonical text (no spaces, alpha always
explicit) and round-trips through ``parse_expr`` to a structurally equal
tree.
"""

from __future__ import annotations

import re

from .compose import Bias, CompositionError, Conj, Disj, Leaf, Neg

KEYWORDS = ("AND", "OR", "NOT")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),=])
    """,
    re.VERBOSE,
)


class ParseError(ValueError):
    """Syntax error with 1-based line and column of the offending token."""

    def __init__(self, message: str, line: int, col: int):
        self.line = line
        self.col = col
        super().__init__(f"{message} at line {line}, column {col}")


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind != "ws":
            tokens.append(_Token(kind if kind != "punct" else chunk, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.next()
        if tok.kind != kind:
            what = tok.text or "end of input"
            raise ParseError(f"expected {kind!r}, found {what!r}", tok.line, tok.col)
        return tok

    def parse(self):
        expr = self.expr()
        tail = self.peek()
        if tail.kind != "eof":
            raise ParseError(f"unexpected trailing input {tail.text!r}", tail.line, tail.col)
        return expr

    def expr(self):
        tok = self.peek()
        if tok.kind != "ident":
            what = tok.text or "end of input"
            raise ParseError(f"expected an expression, found {what!r}", tok.line, tok.col)
        if tok.text == "AND":
            return self.operator(Conj)
        if tok.text == "OR":
            return self.operator(Disj)
        if tok.text == "NOT":
            return self.negation()
        return self.leaf()

    def operator(self, node):
        self.next()
        self.expect("(")
        children = [self.expr()]
        while self.peek().kind == ",":
            self.next()
            children.append(self.expr())
        self.expect(")")
        return node(children)

    def negation(self):
        kw = self.next()
        self.expect("(")
        negated = self.expr()
        comma = self.peek()
        if comma.kind != ",":
            raise ParseError("NOT requires a grounding expression as its second argument",
                             comma.line, comma.col)
        self.next()
        grounding = self.expr()
        alpha = 0.01
        if self.peek().kind == ",":
            self.next()
            name = self.expect("ident")
            if name.text != "alpha":
                raise ParseError(f"NOT accepts only an 'alpha' option, found {name.text!r}",
                                 name.line, name.col)
            self.expect("=")
            num = self.expect("number")
            alpha = float(num.text)
            if not 0.0 <= alpha <= 1.0:
                raise ParseError(f"alpha must lie in [0, 1], got {num.text}", num.line, num.col)
        self.expect(")")
        try:
            return Neg(negated, grounding, alpha)
        except CompositionError as exc:
            raise ParseError(str(exc), kw.line, kw.col) from exc

    def leaf(self):
        name = self.expect("ident")
        self.expect("(")
        params = []
        if self.peek().kind != ")":
            params.append(self.param())
            while self.peek().kind == ",":
                self.next()
                params.append(self.param())
        self.expect(")")
        seen = [k for k, _ in params]
        if len(seen) != len(set(seen)):
            raise ParseError(f"duplicate parameter in leaf {name.text!r}", name.line, name.col)
        return Leaf(name.text, raw=tuple(params))

    def param(self):
        key = self.expect("ident")
        if key.text in KEYWORDS:
            raise ParseError(f"keyword {key.text!r} cannot name a parameter", key.line, key.col)
        self.expect("=")
        tok = self.next()
        if tok.kind == "number":
            return (key.text, float(tok.text))
        if tok.kind == "ident" and tok.text not in KEYWORDS:
            return (key.text, tok.text)
        what = tok.text or "end of input"
        raise ParseError(f"expected a value for {key.text!r}, found {what!r}", tok.line, tok.col)


def parse_expr(text: str):
    """Parse DSL text into a composition expression tree."""
    return _Parser(_tokenize(text)).parse()


def _fmt_value(v) -> str:
    if isinstance(v, str):
        return v
    return repr(float(v))


def format_expr(expr) -> str:
    """Canonical text for an expression; parses back to a structurally equal tree."""
    if isinstance(expr, Leaf):
        inner = ",".join(f"{k}={_fmt_value(v)}" for k, v in expr.params())
        return f"{expr.model_id}({inner})"
    if isinstance(expr, Conj):
        return "AND(" + ",".join(format_expr(c) for c in expr.children) + ")"
    if isinstance(expr, Disj):
        return "OR(" + ",".join(format_expr(c) for c in expr.children) + ")"
    if isinstance(expr, Neg):
        return (f"NOT({format_expr(expr.negated)},{format_expr(expr.grounding)},"
                f"alpha={repr(float(expr.alpha))})")
    if isinstance(expr, Bias):
        raise CompositionError("bias nodes are internal and have no textual form")
    raise CompositionError(f"not a composition expression: {expr!r}")
