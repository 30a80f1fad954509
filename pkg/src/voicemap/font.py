"""Fixed 5x7 bitmap glyphs for image annotation.

Lowercase letters reuse the uppercase shapes. Characters outside the set are
expanded to their code-point hex (e.g. U+0259) before rendering, so phoneme
symbols never crash the renderer.
"""

import numpy as np

GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7
SPACING = 1

_GLYPHS = {
    " ": (".....", ".....", ".....", ".....", ".....", ".....", "....."),
    "0": (".XXX.", "X...X", "X..XX", "X.X.X", "XX..X", "X...X", ".XXX."),
    "1": ("..X..", ".XX..", "..X..", "..X..", "..X..", "..X..", ".XXX."),
    "2": (".XXX.", "X...X", "....X", "...X.", "..X..", ".X...", "XXXXX"),
    "3": ("XXXXX", "....X", "...X.", "..XX.", "....X", "X...X", ".XXX."),
    "4": ("...X.", "..XX.", ".X.X.", "X..X.", "XXXXX", "...X.", "...X."),
    "5": ("XXXXX", "X....", "XXXX.", "....X", "....X", "X...X", ".XXX."),
    "6": ("..XX.", ".X...", "X....", "XXXX.", "X...X", "X...X", ".XXX."),
    "7": ("XXXXX", "....X", "...X.", "..X..", ".X...", ".X...", ".X..."),
    "8": (".XXX.", "X...X", "X...X", ".XXX.", "X...X", "X...X", ".XXX."),
    "9": (".XXX.", "X...X", "X...X", ".XXXX", "....X", "...X.", ".XX.."),
    "A": (".XXX.", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"),
    "B": ("XXXX.", "X...X", "X...X", "XXXX.", "X...X", "X...X", "XXXX."),
    "C": (".XXX.", "X...X", "X....", "X....", "X....", "X...X", ".XXX."),
    "D": ("XXXX.", "X...X", "X...X", "X...X", "X...X", "X...X", "XXXX."),
    "E": ("XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "XXXXX"),
    "F": ("XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "X...."),
    "G": (".XXX.", "X...X", "X....", "X.XXX", "X...X", "X...X", ".XXXX"),
    "H": ("X...X", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"),
    "I": (".XXX.", "..X..", "..X..", "..X..", "..X..", "..X..", ".XXX."),
    "J": ("..XXX", "...X.", "...X.", "...X.", "...X.", "X..X.", ".XX.."),
    "K": ("X...X", "X..X.", "X.X..", "XX...", "X.X..", "X..X.", "X...X"),
    "L": ("X....", "X....", "X....", "X....", "X....", "X....", "XXXXX"),
    "M": ("X...X", "XX.XX", "X.X.X", "X.X.X", "X...X", "X...X", "X...X"),
    "N": ("X...X", "XX..X", "X.X.X", "X..XX", "X...X", "X...X", "X...X"),
    "O": (".XXX.", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."),
    "P": ("XXXX.", "X...X", "X...X", "XXXX.", "X....", "X....", "X...."),
    "Q": (".XXX.", "X...X", "X...X", "X...X", "X.X.X", "X..X.", ".XX.X"),
    "R": ("XXXX.", "X...X", "X...X", "XXXX.", "X.X..", "X..X.", "X...X"),
    "S": (".XXXX", "X....", "X....", ".XXX.", "....X", "....X", "XXXX."),
    "T": ("XXXXX", "..X..", "..X..", "..X..", "..X..", "..X..", "..X.."),
    "U": ("X...X", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."),
    "V": ("X...X", "X...X", "X...X", "X...X", "X...X", ".X.X.", "..X.."),
    "W": ("X...X", "X...X", "X...X", "X.X.X", "X.X.X", "XX.XX", "X...X"),
    "X": ("X...X", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "X...X"),
    "Y": ("X...X", "X...X", ".X.X.", "..X..", "..X..", "..X..", "..X.."),
    "Z": ("XXXXX", "....X", "...X.", "..X..", ".X...", "X....", "XXXXX"),
    "-": (".....", ".....", ".....", ".XXX.", ".....", ".....", "....."),
    "_": (".....", ".....", ".....", ".....", ".....", ".....", "XXXXX"),
    ".": (".....", ".....", ".....", ".....", ".....", ".XX..", ".XX.."),
    ",": (".....", ".....", ".....", ".....", "..X..", "..X..", ".X..."),
    ":": (".....", "..X..", "..X..", ".....", "..X..", "..X..", "....."),
    "/": ("....X", "...X.", "...X.", "..X..", ".X...", ".X...", "X...."),
    "+": (".....", "..X..", "..X..", "XXXXX", "..X..", "..X..", "....."),
    "?": (".XXX.", "X...X", "....X", "...X.", "..X..", ".....", "..X.."),
    "(": ("...X.", "..X..", ".X...", ".X...", ".X...", "..X..", "...X."),
    ")": (".X...", "..X..", "...X.", "...X.", "...X.", "..X..", ".X..."),
    "@": (".XXX.", "X...X", "X.XXX", "X.X.X", "X.XX.", "X....", ".XXXX"),
}


def has_glyph(ch: str) -> bool:
    return ch in _GLYPHS or ch.upper() in _GLYPHS


def glyph(ch: str) -> np.ndarray:
    """Boolean [7 x 5] ink mask; raises KeyError for characters not in the set."""
    rows = _GLYPHS.get(ch) or _GLYPHS.get(ch.upper())
    if rows is None:
        raise KeyError(f"no glyph for {ch!r}")
    return np.array([[c == "X" for c in row] for row in rows])


def normalize(text: str) -> str:
    """Replace characters without glyphs by their U+XXXX code-point form."""
    out = []
    for ch in text:
        out.append(ch if has_glyph(ch) else f"U+{ord(ch):04X}")
    return "".join(out)


def render(text: str) -> np.ndarray:
    """Boolean ink mask [7 x width] of `text`, one blank column between glyphs."""
    text = normalize(text)
    if not text:
        return np.zeros((GLYPH_HEIGHT, 0), dtype=bool)
    cols = []
    for i, ch in enumerate(text):
        if i:
            cols.append(np.zeros((GLYPH_HEIGHT, SPACING), dtype=bool))
        cols.append(glyph(ch))
    return np.concatenate(cols, axis=1)


def text_width(text: str) -> int:
    n = len(normalize(text))
    return 0 if n == 0 else n * (GLYPH_WIDTH + SPACING) - SPACING
