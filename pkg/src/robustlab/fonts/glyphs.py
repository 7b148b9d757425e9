"""Embedded glyph prototypes for the letters A-J.

Each letter is a stroke skeleton (polylines in a unit box, y pointing down).
Prototypes are rasterised from the skeletons under a fixed list of styles
(stroke weight, slant, width, serifs, skeleton variant), giving several
distinct "fonts" per class without any font files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

LETTERS = "ABCDEFGHIJ"


def _arc(cx, cy, rx, ry, start_deg, stop_deg, n=14):
    t = np.radians(np.linspace(start_deg, stop_deg, n))
    return [(cx + rx * np.cos(a), cy + ry * np.sin(a)) for a in t]


def _skeleton(letter: str, variant: int) -> list[list[tuple[float, float]]]:
    if letter == "A":
        if variant:
            return [[(0.0, 1.0), (0.38, 0.0), (0.62, 0.0), (1.0, 1.0)], [(0.2, 0.62), (0.8, 0.62)]]
        return [[(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)], [(0.24, 0.6), (0.76, 0.6)]]
    if letter == "B":
        upper = [(0.0, 0.0), (0.55, 0.0)] + _arc(0.55, 0.24, 0.3, 0.24, -90, 90) + [(0.0, 0.48)]
        lower = [(0.0, 0.48), (0.6, 0.48)] + _arc(0.6, 0.74, 0.35 if variant else 0.32, 0.26, -90, 90) + [(0.0, 1.0)]
        return [[(0.0, 0.0), (0.0, 1.0)], upper, lower]
    if letter == "C":
        if variant:
            return [_arc(0.55, 0.5, 0.5, 0.5, 40, 320, 20)]
        return [_arc(0.55, 0.5, 0.5, 0.5, 55, 305, 20)]
    if letter == "D":
        bowl = [(0.0, 0.0), (0.35 if variant else 0.45, 0.0)]
        bowl += _arc(0.35 if variant else 0.45, 0.5, 0.65 if variant else 0.55, 0.5, -90, 90, 18)
        bowl += [(0.0, 1.0)]
        return [[(0.0, 0.0), (0.0, 1.0)], bowl]
    if letter == "E":
        mid = 0.7 if variant else 0.85
        return [
            [(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (1.0, 1.0)],
            [(0.0, 0.5), (mid, 0.5)],
        ]
    if letter == "F":
        mid = 0.7 if variant else 0.85
        return [[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)], [(0.0, 0.48), (mid, 0.48)]]
    if letter == "G":
        arc = _arc(0.55, 0.5, 0.5, 0.5, 45 if not variant else 30, 320, 20)
        arc = arc[::-1]
        spur = [(arc[-1][0], arc[-1][1]), (1.0, 0.55)] if variant else [(0.55, 0.55), (1.0, 0.55), (1.0, 0.85)]
        return [arc, spur]
    if letter == "H":
        bar = 0.45 if variant else 0.5
        return [[(0.0, 0.0), (0.0, 1.0)], [(1.0, 0.0), (1.0, 1.0)], [(0.0, bar), (1.0, bar)]]
    if letter == "I":
        strokes = [[(0.5, 0.0), (0.5, 1.0)]]
        if variant:
            strokes += [[(0.15, 0.0), (0.85, 0.0)], [(0.15, 1.0), (0.85, 1.0)]]
        return strokes
    if letter == "J":
        hook = [(0.75, 0.0), (0.75, 0.7)] + _arc(0.42, 0.7, 0.33, 0.3, 0, 170, 12)
        strokes = [hook]
        if variant:
            strokes.append([(0.35, 0.0), (1.0, 0.0)])
        return strokes
    raise ValueError(f"no skeleton for letter {letter!r}")


@dataclass(frozen=True)
class GlyphStyle:
    weight: float  # stroke width in pixels
    slant: float  # horizontal shear of the glyph box
    aspect: float  # width / height
    serif: bool
    variant: int


STYLES = (
    GlyphStyle(1.4, 0.0, 0.75, False, 0),
    GlyphStyle(2.2, 0.0, 0.75, False, 0),
    GlyphStyle(3.0, 0.0, 0.85, False, 0),
    GlyphStyle(1.6, 0.22, 0.75, False, 0),
    GlyphStyle(2.4, 0.22, 0.8, False, 1),
    GlyphStyle(1.6, 0.0, 0.6, False, 1),
    GlyphStyle(2.0, 0.0, 0.95, False, 1),
    GlyphStyle(1.6, 0.0, 0.75, True, 0),
    GlyphStyle(2.6, 0.0, 0.8, True, 1),
    GlyphStyle(1.8, 0.15, 0.7, True, 0),
    GlyphStyle(2.8, -0.12, 0.75, False, 1),
    GlyphStyle(1.2, 0.1, 0.9, False, 1),
)


@dataclass(frozen=True)
class GlyphPrototype:
    class_id: int
    font_id: int
    bitmap: np.ndarray  # (1, H, W), values in [0, 1]

    def __post_init__(self):
        if self.bitmap.ndim != 3 or self.bitmap.shape[0] != 1:
            raise ValueError(f"prototype bitmap must be (1, H, W), got {self.bitmap.shape}")
        if self.bitmap.min() < 0 or self.bitmap.max() > 1:
            raise ValueError("prototype bitmap values must lie in [0, 1]")


def _serifs(strokes):
    ticks = []
    for line in strokes:
        for x, y in (line[0], line[-1]):
            if abs(y) < 1e-9 or abs(y - 1.0) < 1e-9:
                ticks.append([(x - 0.14, y), (x + 0.14, y)])
    return ticks


def _segment_distance(px, py, segments):
    """Distance from each pixel centre to the nearest segment."""
    a = segments[:, 0]
    b = segments[:, 1]
    ab = b - a
    denom = np.maximum((ab**2).sum(axis=1), 1e-12)
    qx = px.ravel()[:, None] - a[None, :, 0]
    qy = py.ravel()[:, None] - a[None, :, 1]
    t = np.clip((qx * ab[None, :, 0] + qy * ab[None, :, 1]) / denom[None, :], 0.0, 1.0)
    dx = qx - t * ab[None, :, 0]
    dy = qy - t * ab[None, :, 1]
    return np.sqrt(dx * dx + dy * dy).min(axis=1).reshape(px.shape)


def render_glyph(letter: str, style: GlyphStyle, size: int = 28, height_frac: float = 0.55) -> np.ndarray:
    """Rasterise one glyph to a (1, size, size) bitmap in [0, 1] with anti-aliasing."""
    strokes = _skeleton(letter, style.variant)
    if style.serif:
        strokes = strokes + _serifs(strokes)
    height = size * height_frac
    width = height * style.aspect
    top = (size - height) / 2.0
    left = (size - width) / 2.0
    segments = []
    for line in strokes:
        pts = np.array(line, dtype=np.float64)
        xs = left + pts[:, 0] * width + style.slant * (0.5 - pts[:, 1]) * height
        ys = top + pts[:, 1] * height
        for i in range(len(pts) - 1):
            segments.append(((xs[i], ys[i]), (xs[i + 1], ys[i + 1])))
    segments = np.array(segments, dtype=np.float64)
    py, px = np.mgrid[0:size, 0:size] + 0.5
    dist = _segment_distance(px, py, segments)
    img = np.clip(style.weight / 2.0 + 0.5 - dist, 0.0, 1.0)
    return img[None]


def builtin_prototypes(size: int = 28, n_fonts: int | None = None) -> list[GlyphPrototype]:
    """All embedded prototypes: ``len(STYLES)`` fonts per letter A-J."""
    styles = STYLES if n_fonts is None else STYLES[:n_fonts]
    return [
        GlyphPrototype(class_id=c, font_id=f, bitmap=render_glyph(letter, style, size))
        for c, letter in enumerate(LETTERS)
        for f, style in enumerate(styles)
    ]


def load_prototypes(root, size: int = 28) -> list[GlyphPrototype]:
    """Import prototypes from ``root/<class>/<image>``.

    Class directories are named by index (``0``..``9``) or letter (``A``..``J``);
    images are 8-bit grayscale, mapped linearly to [0, 1] and resized to
    ``size`` x ``size`` when needed.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"prototype directory {root} does not exist")
    protos = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        name = class_dir.name
        if name.isdigit():
            class_id = int(name)
        elif name.upper() in LETTERS and len(name) == 1:
            class_id = LETTERS.index(name.upper())
        else:
            raise ValueError(f"cannot map directory {name!r} to a class")
        for font_id, path in enumerate(sorted(f for f in class_dir.iterdir() if f.is_file())):
            with Image.open(path) as im:
                im = im.convert("L")
                if im.size != (size, size):
                    im = im.resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float64) / 255.0
            protos.append(GlyphPrototype(class_id=class_id, font_id=font_id, bitmap=arr[None]))
    if not protos:
        raise ValueError(f"no prototype images found under {root}")
    return protos
