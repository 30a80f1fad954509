"""Relevance-over-spectrogram rendering and portable image output.

Color encoding: hue carries relevance (240 degrees = cold/irrelevant down to
0 = hot/relevant), saturation is fixed at 1, and the value channel carries
min-max normalized spectral log energy. The PNG writer is self-contained and
byte-deterministic: filter 0 scanlines, one zlib stream, fixed settings.
"""

from dataclasses import dataclass
import json
import re
import struct
import warnings
import zlib

import numpy as np

from . import font

STRIP_HEIGHT = 11
_TEXT_ROW = 2  # glyphs occupy strip rows 2..8


@dataclass(frozen=True)
class Interval:
    label: str
    start: float
    end: float


@dataclass
class PhonemeAlignment:
    intervals: list


@dataclass
class ComposedImage:
    pixels: np.ndarray  # [height x width x 3] uint8

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"pixels must be [h x w x 3] uint8, got "
                             f"{p.shape} {p.dtype}")
        self.pixels = p

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def hsv_to_rgb(hue_deg, saturation, value) -> np.ndarray:
    """Sector-formula HSV to RGB, any broadcastable shapes, uint8 output."""
    h = np.asarray(hue_deg, dtype=np.float64) % 360.0
    s = np.broadcast_to(np.asarray(saturation, dtype=np.float64), h.shape)
    v = np.broadcast_to(np.asarray(value, dtype=np.float64), h.shape)
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    z = np.zeros_like(c)
    sector = np.floor(hp).astype(int) % 6
    r = np.select([sector == 0, sector == 1, sector == 2, sector == 3,
                   sector == 4, sector == 5], [c, x, z, z, x, c])
    g = np.select([sector == 0, sector == 1, sector == 2, sector == 3,
                   sector == 4, sector == 5], [x, c, c, x, z, z])
    b = np.select([sector == 0, sector == 1, sector == 2, sector == 3,
                   sector == 4, sector == 5], [z, z, x, c, c, x])
    m = v - c
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return np.round(255.0 * rgb).astype(np.uint8)


def compose(spec, rmap) -> ComposedImage:
    """Relevance as hue over spectral energy as brightness, low bins at bottom."""
    final = rmap.final
    bins = spec.values.shape[0]
    if bins != final.shape[0] or spec.original_frames != final.shape[1]:
        raise ValueError(
            f"spectrogram [{bins} x {spec.original_frames}] does not match "
            f"map {final.shape}")
    energy = spec.values[:, :spec.original_frames]
    lo, hi = energy.min(), energy.max()
    value = (energy - lo) / (hi - lo) if hi > lo else np.zeros_like(energy)
    hue = 240.0 * (1.0 - final)
    rgb = hsv_to_rgb(hue, 1.0, value)
    return ComposedImage(rgb[::-1].copy())


def _parse_textgrid(text: str):
    intervals = []
    current = {}
    active = False
    for raw in text.splitlines():
        line = raw.strip()
        m = re.match(r'class\s*=\s*"([^"]*)"', line)
        if m:
            if active:
                break  # first IntervalTier only
            active = m.group(1) == "IntervalTier"
            continue
        if not active:
            continue
        m = re.match(r'xmin\s*=\s*([-+0-9.eE]+)', line)
        if m:
            current["xmin"] = float(m.group(1))
            continue
        m = re.match(r'xmax\s*=\s*([-+0-9.eE]+)', line)
        if m:
            current["xmax"] = float(m.group(1))
            continue
        m = re.match(r'text\s*=\s*"(.*)"\s*$', line)
        if m and "xmin" in current and "xmax" in current:
            intervals.append(Interval(m.group(1), current["xmin"], current["xmax"]))
            current = {}
    if not active:
        raise ValueError("no IntervalTier found")
    return intervals


def load_alignment(path) -> PhonemeAlignment:
    """Read a JSON interval array or a long-format TextGrid (first tier)."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    head = text.lstrip("﻿ \t\r\n")
    if head.startswith("["):
        try:
            data = json.loads(text)
            intervals = [Interval(str(d["label"]), float(d["start"]), float(d["end"]))
                         for d in data]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}: bad JSON alignment: {e}") from None
    elif head.startswith("File type") or "ooTextFile" in head.split("\n", 1)[0]:
        intervals = _parse_textgrid(text)
    else:
        raise ValueError(f"{path}: unrecognized alignment format")
    for iv in intervals:
        if not (0.0 <= iv.start < iv.end):
            raise ValueError(f"{path}: bad interval [{iv.start}, {iv.end}]")
    ordered = sorted(intervals, key=lambda iv: (iv.start, iv.end))
    if [iv.start for iv in ordered] != [iv.start for iv in intervals]:
        warnings.warn(f"{path}: intervals out of order; sorted by start time")
    for a, b in zip(ordered, ordered[1:]):
        if a.end > b.start + 1e-9:
            raise ValueError(
                f"{path}: intervals [{a.start},{a.end}] and [{b.start},{b.end}] overlap")
    return PhonemeAlignment(ordered)


def _draw_text(canvas: np.ndarray, text: str, row: int, col_lo: int,
               col_hi: int, center: int) -> None:
    """Render `text` centered on `center`, clipped to [col_lo, col_hi)."""
    mask = font.render(text)
    start = center - mask.shape[1] // 2
    for dc in range(mask.shape[1]):
        col = start + dc
        if col_lo <= col < col_hi:
            canvas[row:row + font.GLYPH_HEIGHT, col][mask[:, dc]] = 0


def overlay(image: ComposedImage, alignment: PhonemeAlignment) -> ComposedImage:
    """Append an annotation strip: boundary ticks plus centered labels."""
    w = image.width
    duration = w / 100.0
    kept = []
    clipped = False
    for iv in alignment.intervals:
        if iv.start >= duration:
            clipped = True
            continue
        end = iv.end
        if end > duration:
            clipped = True
            end = duration
        kept.append(Interval(iv.label, iv.start, end))
    if clipped:
        warnings.warn("alignment extends beyond the audio; intervals clipped")
    strip = np.full((STRIP_HEIGHT, w, 3), 255, dtype=np.uint8)
    ticks = set()
    for iv in kept:
        ticks.add(int(round(100.0 * iv.start)))
        ticks.add(int(round(100.0 * iv.end)))
    for frame in ticks:
        strip[:, min(max(frame, 0), w - 1)] = 0
    for iv in kept:
        c0 = int(round(100.0 * iv.start))
        c1 = int(round(100.0 * iv.end))
        _draw_text(strip, iv.label, _TEXT_ROW, c0 + 1, min(c1, w) - 1,
                   (c0 + min(c1, w)) // 2)
    return ComposedImage(np.concatenate([image.pixels, strip], axis=0))


def add_title(image: ComposedImage, text: str) -> ComposedImage:
    strip = np.full((STRIP_HEIGHT, image.width, 3), 255, dtype=np.uint8)
    _draw_text(strip, text, _TEXT_ROW, 0, image.width,
               center=2 + font.text_width(text) // 2)
    return ComposedImage(np.concatenate([strip, image.pixels], axis=0))


def side_by_side(left: ComposedImage, right: ComposedImage,
                 gap: int = 4) -> ComposedImage:
    if left.height != right.height:
        raise ValueError(f"panel heights differ: {left.height} vs {right.height}")
    spacer = np.full((left.height, gap, 3), 255, dtype=np.uint8)
    return ComposedImage(np.concatenate([left.pixels, spacer, right.pixels], axis=1))


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def png_bytes(pixels: np.ndarray) -> bytes:
    """8-bit RGB PNG, no interlace, filter 0 on every scanline."""
    p = np.ascontiguousarray(pixels, dtype=np.uint8)
    if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ValueError(f"need [h x w x 3] pixels, got {p.shape}")
    h, w = p.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + p[r].tobytes() for r in range(h))
    idat = zlib.compress(raw, 6)
    return (b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", idat) + _chunk(b"IEND", b""))


def write_image(image: ComposedImage, path) -> None:
    with open(path, "wb") as f:
        f.write(png_bytes(image.pixels))
