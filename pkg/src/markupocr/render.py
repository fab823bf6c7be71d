"""Deterministic bitmap rendering of TinyTeX ASTs.

Every glyph is a fixed 5x7 bitmap from the table below. Layout is
classic box-and-baseline compositing: rows place children left to right
with a one-pixel gap and aligned baselines, superscripts shift up three
pixels and subscripts down three, fractions stack over a rule that sits
on the baseline, and radicals draw a diagonal plus an overline. The
finished ink is padded with background into the smallest bucket that
fits, so identical markup always yields the identical image.

Pixel convention: 0 = ink, 1 = background (a black-on-white page).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tinytex import Frac, Group, Node, Row, Scripts, Sqrt, Symbol

__all__ = [
    "GLYPHS", "Bitmap", "BucketSpec", "BucketOverflowError",
    "TOY_BUCKETS", "PAPER_BUCKETS",
    "render", "render_ink", "glyph_bitmap", "write_pgm", "read_pgm",
]

# rows are strings of '#' (ink) and '.' (background), 7 rows of 5 columns
GLYPHS: dict[str, tuple[str, ...]] = {
    "a": (".....", ".....", ".###.", "....#", ".####", "#...#", ".####"),
    "b": ("#....", "#....", "#.##.", "##..#", "#...#", "##..#", "#.##."),
    "c": (".....", ".....", ".###.", "#....", "#....", "#...#", ".###."),
    "d": ("....#", "....#", ".##.#", "#..##", "#...#", "#..##", ".##.#"),
    "e": (".....", ".....", ".###.", "#...#", "#####", "#....", ".###."),
    "f": ("..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."),
    "g": (".....", ".####", "#...#", "#...#", ".####", "....#", ".###."),
    "h": ("#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"),
    "i": ("..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."),
    "j": ("...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."),
    "k": ("#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."),
    "l": (".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "m": (".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#"),
    "n": (".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"),
    "o": (".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."),
    "p": (".....", "#.##.", "##..#", "#...#", "##..#", "#.##.", "#...."),
    "q": (".....", ".##.#", "#..##", "#...#", "#..##", ".##.#", "....#"),
    "r": (".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."),
    "s": (".....", ".....", ".####", "#....", ".###.", "....#", "####."),
    "t": (".#...", ".#...", "####.", ".#...", ".#...", ".#..#", "..##."),
    "u": (".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"),
    "v": (".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "w": (".....", ".....", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
    "x": (".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"),
    "y": (".....", "#...#", "#...#", "#...#", ".####", "....#", ".###."),
    "z": (".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", "..#..", "..#..", "..#.."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
    "+": (".....", "..#..", "..#..", "#####", "..#..", "..#..", "....."),
    "-": (".....", ".....", ".....", "#####", ".....", ".....", "....."),
    "=": (".....", ".....", "#####", ".....", "#####", ".....", "....."),
    "(": ("...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#."),
    ")": (".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#..."),
    "\\sum": ("#####", "#....", ".#...", "..#..", ".#...", "#....", "#####"),
}

_GAP = 1         # pixels between row neighbours
_SCRIPT_RISE = 3  # superscript raise / subscript drop, pixels
_MARGIN = 1      # background border inside the bucket


def glyph_bitmap(token: str) -> np.ndarray:
    """The 7x5 ink mask (bool) for one glyph token."""
    rows = GLYPHS[token]
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)


class BucketOverflowError(ValueError):
    def __init__(self, need_w: int, need_h: int):
        super().__init__(f"no bucket fits an image of {need_w}x{need_h}")
        self.need_w = need_w
        self.need_h = need_h


@dataclass(frozen=True)
class BucketSpec:
    """Allowed padded image sizes as (width, height) pairs, plus the
    training-time token-length cutoff."""

    sizes: tuple[tuple[int, int], ...]
    max_tokens: int = 150


TOY_BUCKETS = BucketSpec(
    sizes=tuple((w, h) for h in (32, 48, 64) for w in range(16, 385, 16)),
    max_tokens=150,
)

PAPER_BUCKETS = BucketSpec(
    sizes=tuple((w, h) for h in (32, 64, 96, 128) for w in range(32, 513, 32)),
    max_tokens=150,
)


@dataclass
class Bitmap:
    """A rendered page: uint8 grid, 0 = ink, 1 = background."""

    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_input(self) -> np.ndarray:
        """Float image in [0,1] the model consumes (1 channel)."""
        return self.pixels.astype(np.float64)[None]


# ---------------------------------------------------------------------------
# layout: each node becomes (ink mask, baseline row index)


def _blit(canvas: np.ndarray, ink: np.ndarray, top: int, left: int) -> None:
    h, w = ink.shape
    if h and w:
        canvas[top:top + h, left:left + w] |= ink


def _layout_row(parts: list[tuple[np.ndarray, int]]) -> tuple[np.ndarray, int]:
    if not parts:
        return np.zeros((0, 0), dtype=bool), 0
    above = max(b for _, b in parts)
    below = max(g.shape[0] - 1 - b for g, b in parts)
    height = above + below + 1
    width = sum(g.shape[1] for g, _ in parts) + _GAP * (len(parts) - 1)
    canvas = np.zeros((height, width), dtype=bool)
    x = 0
    for g, b in parts:
        _blit(canvas, g, above - b, x)
        x += g.shape[1] + _GAP
    return canvas, above


def _layout(node: Node) -> tuple[np.ndarray, int]:
    if isinstance(node, Symbol):
        return glyph_bitmap(node.char), 6
    if isinstance(node, (Row, Group)):
        return _layout_row([_layout(c) for c in node.children])
    if isinstance(node, Frac):
        gn, _ = _layout(node.num)
        gd, _ = _layout(node.den)
        hn, wn = gn.shape
        hd, wd = gd.shape
        width = max(wn, wd) + 2
        canvas = np.zeros((hn + hd + 3, width), dtype=bool)
        _blit(canvas, gn, 0, (width - wn) // 2)
        canvas[hn + 1, :] = True  # the rule, sitting on the baseline
        _blit(canvas, gd, hn + 3, (width - wd) // 2)
        return canvas, hn + 1
    if isinstance(node, Sqrt):
        gb, bb = _layout(node.body)
        hb, wb = gb.shape
        rad_w = 4
        height = hb + 2
        canvas = np.zeros((height, wb + rad_w), dtype=bool)
        canvas[0, rad_w - 1:] = True  # overline
        for r in range(height):      # radical diagonal, top-right to bottom-left
            col = round((rad_w - 1) * (height - 1 - r) / max(height - 1, 1))
            canvas[r, col] = True
        _blit(canvas, gb, 2, rad_w)
        return canvas, 2 + bb
    if isinstance(node, Scripts):
        gb, bb = _layout(node.base)
        pieces = [(gb, bb, 0, 0)]
        script_x = gb.shape[1] + _GAP
        script_w = 0
        if node.sup is not None:
            gp, bp = _layout(node.sup)
            pieces.append((gp, bp, -_SCRIPT_RISE, script_x))
            script_w = max(script_w, gp.shape[1])
        if node.sub is not None:
            gs, bs = _layout(node.sub)
            pieces.append((gs, bs, _SCRIPT_RISE, script_x))
            script_w = max(script_w, gs.shape[1])
        above = max(b - shift for g, b, shift, _ in pieces)
        below = max(g.shape[0] - 1 - b + shift for g, b, shift, _ in pieces)
        canvas = np.zeros((above + below + 1, script_x + script_w), dtype=bool)
        for g, b, shift, x in pieces:
            _blit(canvas, g, above + shift - b, x)
        return canvas, above
    raise TypeError(f"not an AST node: {node!r}")


def render_ink(node: Node) -> np.ndarray:
    """Tight ink mask (bool, True = ink) with no bucket padding."""
    ink, _ = _layout(node)
    return ink


def render(node: Node, buckets: BucketSpec = TOY_BUCKETS) -> Bitmap:
    """Compile an AST to a padded page bitmap."""
    ink = render_ink(node)
    ih, iw = ink.shape
    need_h, need_w = ih + 2 * _MARGIN, iw + 2 * _MARGIN
    fitting = [(w, h) for w, h in buckets.sizes if h >= need_h and w >= need_w]
    if not fitting:
        raise BucketOverflowError(need_w, need_h)
    bw, bh = min(fitting, key=lambda s: (s[0] * s[1], s[1], s[0]))
    page = np.ones((bh, bw), dtype=np.uint8)
    page[_MARGIN:_MARGIN + ih, _MARGIN:_MARGIN + iw] = (~ink).astype(np.uint8)
    return Bitmap(page)


# ---------------------------------------------------------------------------
# portable graymap I/O (text variant, maxval 1)


def write_pgm(bitmap: Bitmap, path) -> None:
    h, w = bitmap.pixels.shape
    lines = ["P2", f"{w} {h}", "1"]
    for row in bitmap.pixels:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_pgm(path) -> Bitmap:
    with open(path) as f:
        words: list[str] = []
        for line in f:
            hash_at = line.find("#")
            if hash_at >= 0:
                line = line[:hash_at]
            words.extend(line.split())
    if not words or words[0] != "P2":
        raise ValueError(f"{path}: not a text PGM (P2) file")
    w, h, maxval = int(words[1]), int(words[2]), int(words[3])
    vals = np.array([int(v) for v in words[4:4 + w * h]], dtype=np.uint8)
    if vals.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, got {vals.size}")
    if maxval != 1:
        vals = (vals > maxval // 2).astype(np.uint8)
    return Bitmap(vals.reshape(h, w))
