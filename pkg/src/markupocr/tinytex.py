"""TinyTeX: a closed LaTeX-like markup language.

The grammar covers single-character glyphs (a-z, 0-9, + - = ( )), the
commands \\frac, \\sqrt and \\sum, sub/superscript modifiers and braces.
Markup strings tokenize with maximal munch over command names, parse to
a small AST by recursive descent, and serialize back to tokens. The
canonical serializer fixes the sub-before-sup order; `normalize`
additionally unwraps single-child brace groups. Both rewrites are
presentation-safe: the renderer produces identical ink either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MarkupError", "Symbol", "Frac", "Sqrt", "Scripts", "Group", "Row",
    "GLYPH_CHARS", "COMMANDS", "VOCAB", "TOKEN_TO_ID", "PAD", "BOS", "EOS",
    "tokenize", "detokenize", "parse", "normalize", "ast_tokens",
    "serialize", "to_ids", "to_tokens",
]


class MarkupError(ValueError):
    """Lexing or parsing failure; `position` is a byte offset for lexer
    errors and a token index for parser errors."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at {position})")
        self.position = position


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Symbol:
    char: str  # a single glyph char, or a nullary command like \sum


@dataclass(frozen=True)
class Frac:
    num: "Node"
    den: "Node"


@dataclass(frozen=True)
class Sqrt:
    body: "Node"


@dataclass(frozen=True)
class Scripts:
    base: "Node"
    sub: "Node | None" = None
    sup: "Node | None" = None

    def __post_init__(self):
        if self.sub is None and self.sup is None:
            raise ValueError("Scripts needs at least one of sub/sup")


@dataclass(frozen=True)
class Group:
    children: tuple


@dataclass(frozen=True)
class Row:
    children: tuple


Node = Symbol | Frac | Sqrt | Scripts | Group | Row


# ---------------------------------------------------------------------------
# vocabulary

GLYPH_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789+-=()"
COMMANDS = ("\\frac", "\\sqrt", "\\sum")
NULLARY = ("\\sum",)

VOCAB: tuple[str, ...] = (
    ("<pad>", "<bos>", "<eos>")
    + tuple(GLYPH_CHARS)
    + COMMANDS
    + ("^", "_", "{", "}")
)
TOKEN_TO_ID = {t: i for i, t in enumerate(VOCAB)}
PAD, BOS, EOS = 0, 1, 2


def to_ids(tokens, add_bos_eos: bool = False) -> np.ndarray:
    ids = [TOKEN_TO_ID[t] for t in tokens]
    if add_bos_eos:
        ids = [BOS] + ids + [EOS]
    return np.asarray(ids, dtype=np.int64)


def to_tokens(ids, strip_special: bool = True) -> list[str]:
    out = []
    for i in ids:
        t = VOCAB[int(i)]
        if strip_special and int(i) in (PAD, BOS, EOS):
            continue
        out.append(t)
    return out


# ---------------------------------------------------------------------------
# lexer


def tokenize(markup: str) -> list[str]:
    """Split markup into tokens; maximal munch after a backslash."""
    tokens = []
    i = 0
    n = len(markup)
    while i < n:
        ch = markup[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "\\":
            j = i + 1
            while j < n and markup[j].isalpha():
                j += 1
            name = markup[i:j]
            if name not in COMMANDS:
                raise MarkupError(f"unknown command {name!r}", i)
            tokens.append(name)
            i = j
            continue
        if ch in GLYPH_CHARS or ch in "^_{}":
            tokens.append(ch)
            i += 1
            continue
        raise MarkupError(f"unexpected character {ch!r}", i)
    return tokens


def detokenize(tokens) -> str:
    """Join tokens back into a string the lexer reads identically."""
    parts = []
    for k, t in enumerate(tokens):
        parts.append(t)
        nxt = tokens[k + 1] if k + 1 < len(tokens) else ""
        if t.startswith("\\") and nxt and nxt[0].isalpha() and not nxt.startswith("\\"):
            parts.append(" ")
    return "".join(parts)


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def parse_row(self, closing: str | None) -> list[Node]:
        items: list[Node] = []
        while True:
            t = self.peek()
            if t is None:
                if closing is not None:
                    raise MarkupError("unbalanced braces: missing '}'", self.pos)
                return items
            if t == closing:
                return items
            if t == "}":
                raise MarkupError("unbalanced braces: stray '}'", self.pos)
            items.append(self.parse_item())

    def parse_item(self) -> Node:
        t = self.peek()
        if t in ("^", "_"):
            raise MarkupError(f"dangling modifier {t!r}", self.pos)
        node = self.parse_atom()
        sub = sup = None
        while self.peek() in ("^", "_"):
            mod_pos = self.pos
            mod = self.take()
            arg = self.parse_script_arg()
            if mod == "_":
                if sub is not None:
                    raise MarkupError("duplicate subscript", mod_pos)
                sub = arg
            else:
                if sup is not None:
                    raise MarkupError("duplicate superscript", mod_pos)
                sup = arg
        if sub is None and sup is None:
            return node
        return Scripts(node, sub=sub, sup=sup)

    def parse_atom(self) -> Node:
        t = self.take()
        if t == "{":
            children = self.parse_row("}")
            self.take()  # the closing brace parse_row stopped at
            return Group(tuple(children))
        if t == "\\frac":
            num = self.parse_braced_arg(t)
            den = self.parse_braced_arg(t)
            return Frac(num, den)
        if t == "\\sqrt":
            return Sqrt(self.parse_braced_arg(t))
        if t in NULLARY or t in GLYPH_CHARS:
            return Symbol(t)
        raise MarkupError(f"unexpected token {t!r}", self.pos - 1)

    def parse_braced_arg(self, cmd: str) -> Node:
        if self.peek() != "{":
            raise MarkupError(f"expected '{{' after {cmd}", self.pos)
        self.take()
        children = self.parse_row("}")
        self.take()
        return _content(children)

    def parse_script_arg(self) -> Node:
        if self.peek() is None:
            raise MarkupError("modifier at end of input", self.pos)
        if self.peek() == "{":
            self.take()
            children = self.parse_row("}")
            self.take()
            return _content(children)
        if self.peek() in ("^", "_"):
            raise MarkupError("modifier cannot be a script argument", self.pos)
        return self.parse_atom()


def _content(children: list[Node]) -> Node:
    return children[0] if len(children) == 1 else Row(tuple(children))


def parse(tokens: list[str]) -> Node:
    p = _Parser(list(tokens))
    items = p.parse_row(None)
    return _content(items)


# ---------------------------------------------------------------------------
# serialization


def ast_tokens(node: Node, rng: np.random.Generator | None = None) -> list[str]:
    """Token sequence for an AST.

    Canonical order (sub before sup) unless an rng is supplied, in which
    case each two-script node picks its order at random — the source of
    the deliberate ambiguity in generated corpora.
    """
    out: list[str] = []
    _emit(node, out, rng)
    return out


def _emit(node: Node, out: list[str], rng) -> None:
    if isinstance(node, Symbol):
        out.append(node.char)
    elif isinstance(node, Row):
        for c in node.children:
            _emit(c, out, rng)
    elif isinstance(node, Group):
        out.append("{")
        for c in node.children:
            _emit(c, out, rng)
        out.append("}")
    elif isinstance(node, Frac):
        out.append("\\frac")
        _emit_braced(node.num, out, rng)
        _emit_braced(node.den, out, rng)
    elif isinstance(node, Sqrt):
        out.append("\\sqrt")
        _emit_braced(node.body, out, rng)
    elif isinstance(node, Scripts):
        if isinstance(node.base, (Row, Scripts)):
            _emit_braced(node.base, out, rng)  # keep script binding intact
        else:
            _emit(node.base, out, rng)
        pairs = [(m, a) for m, a in (("_", node.sub), ("^", node.sup))
                 if a is not None]
        if rng is not None and len(pairs) == 2 and rng.random() < 0.5:
            pairs.reverse()
        for mod, arg in pairs:
            out.append(mod)
            _emit_braced(arg, out, rng)
    else:
        raise TypeError(f"not an AST node: {node!r}")


def _emit_braced(node: Node, out: list[str], rng) -> None:
    out.append("{")
    _emit(node, out, rng)
    out.append("}")


def serialize(node: Node) -> str:
    return detokenize(ast_tokens(node))


# ---------------------------------------------------------------------------
# normalization


def normalize(node: Node) -> Node:
    """Canonical AST: single-child groups unwrapped, bottom-up.

    Together with the canonical serializer (sub always before sup) this
    removes the spurious ambiguity the corpus generator injects. The
    rewrite never changes rendered ink.
    """
    if isinstance(node, Symbol):
        return node
    if isinstance(node, Row):
        return Row(tuple(normalize(c) for c in node.children))
    if isinstance(node, Group):
        kids = tuple(normalize(c) for c in node.children)
        if len(kids) == 1:
            return kids[0]
        return Group(kids)
    if isinstance(node, Frac):
        return Frac(normalize(node.num), normalize(node.den))
    if isinstance(node, Sqrt):
        return Sqrt(normalize(node.body))
    if isinstance(node, Scripts):
        return Scripts(
            normalize(node.base),
            sub=None if node.sub is None else normalize(node.sub),
            sup=None if node.sup is None else normalize(node.sup),
        )
    raise TypeError(f"not an AST node: {node!r}")
