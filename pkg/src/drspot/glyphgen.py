"""Procedural pseudo-glyph benchmark with oriented-box annotations.

Each character class is a set of strokes in the unit square. A style (the
stand-in for a font) fixes stroke width, slant, a class-consistent shape
deformation and a decoration scheme, so the same class renders alike within
a style and differently across styles. Ink is bright on a black background.

Annotations follow a JSON-lines schema, one image per line::

    {"image": "images/000000.png",
     "text_lines": [{"points": [[x, y] x 4], "text": "...", "ignore": false}],
     "chars": [{"points": [[x, y] x 4], "char": "."}],
     "meta": {...}}

Pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)``; coordinates are
pixel units with the origin at the top-left corner.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .geometry import check_quad, quad_iou, rect_to_quad

DIFFICULTIES = ("simple", "medium", "hard")
MIN_CANVAS = 32
SUPERSAMPLE = 4
CHAR_BASE = 0x4E00  # class c is labelled with the CJK ideograph U+4E00 + c
ANCHORS = (0.15, 0.38, 0.62, 0.85)


class AnnotationError(ValueError):
    """A malformed annotation record; ``line`` is 1-based."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class LayoutError(RuntimeError):
    pass


def classify_difficulty(curvature_jitter: float, decoration_level: float) -> str:
    if decoration_level >= 0.5:
        return "hard"
    if curvature_jitter < 0.15 and decoration_level < 0.1:
        return "simple"
    return "medium"


@dataclass(frozen=True)
class StyleParams:
    style_id: int
    stroke_width: float = 2.0
    slant: float = 0.0
    curvature_jitter: float = 0.0
    decoration_level: float = 0.0

    def __post_init__(self):
        if not 1.0 <= self.stroke_width <= 6.0:
            raise ValueError(f"stroke_width {self.stroke_width} outside [1, 6]")
        if not -0.4 <= self.slant <= 0.4:
            raise ValueError(f"slant {self.slant} outside [-0.4, 0.4]")
        if not 0.0 <= self.curvature_jitter <= 1.0:
            raise ValueError(f"curvature_jitter {self.curvature_jitter} outside [0, 1]")
        if not 0.0 <= self.decoration_level <= 1.0:
            raise ValueError(f"decoration_level {self.decoration_level} outside [0, 1]")

    @property
    def difficulty(self) -> str:
        return classify_difficulty(self.curvature_jitter, self.decoration_level)

    def to_dict(self) -> dict:
        return {
            "style_id": self.style_id,
            "stroke_width": self.stroke_width,
            "slant": self.slant,
            "curvature_jitter": self.curvature_jitter,
            "decoration_level": self.decoration_level,
            "difficulty": self.difficulty,
        }


@dataclass(frozen=True)
class Stroke:
    kind: str  # "line" (polyline through points) or "curve" (quadratic Bezier)
    points: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class CharTemplate:
    char_class: int
    strokes: tuple[Stroke, ...]

    def __post_init__(self):
        if len(self.strokes) < 2:
            raise ValueError(f"template {self.char_class} needs at least 2 strokes")

    @property
    def char(self) -> str:
        return class_to_char(self.char_class)

    def key(self) -> tuple:
        return tuple(sorted((s.kind, tuple((round(x, 6), round(y, 6)) for x, y in s.points)) for s in self.strokes))


def class_to_char(c: int) -> str:
    return chr(CHAR_BASE + c)


def char_to_class(ch: str) -> int:
    return ord(ch) - CHAR_BASE


def make_templates(alphabet_size: int = 50, seed: int = 0) -> list[CharTemplate]:
    """Distinct stroke templates built from a 4x4 anchor lattice."""
    rng = np.random.default_rng([seed, 1])
    lattice = [(x, y) for y in ANCHORS for x in ANCHORS]
    templates, seen = [], set()
    while len(templates) < alphabet_size:
        strokes = []
        for _ in range(int(rng.integers(2, 5))):
            kind = "curve" if rng.random() < 0.35 else "line"
            n_pts = 3 if kind == "curve" else int(rng.choice([2, 2, 3]))
            picks = rng.choice(len(lattice), size=2 if kind == "curve" else n_pts, replace=False)
            pts = [lattice[i] for i in picks]
            if kind == "curve":
                (x0, y0), (x1, y1) = pts
                nx, ny = -(y1 - y0), x1 - x0
                bend = rng.choice([-0.35, 0.35])
                ctrl = (0.5 * (x0 + x1) + bend * nx, 0.5 * (y0 + y1) + bend * ny)
                ctrl = (min(max(ctrl[0], 0.05), 0.95), min(max(ctrl[1], 0.05), 0.95))
                pts = [pts[0], ctrl, pts[1]]
            strokes.append(Stroke(kind, tuple((float(x), float(y)) for x, y in pts)))
        tmpl = CharTemplate(len(templates), tuple(strokes))
        if tmpl.key() not in seen:
            seen.add(tmpl.key())
            templates.append(tmpl)
    return templates


def _bezier(p0, p1, p2, n: int = 16) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * np.asarray(p0) + 2 * (1 - t) * t * np.asarray(p1) + t**2 * np.asarray(p2)


def _stroke_polylines(strokes: Sequence[Stroke]) -> list[np.ndarray]:
    out = []
    for s in strokes:
        pts = np.asarray(s.points, dtype=np.float64)
        out.append(_bezier(*pts) if s.kind == "curve" else pts)
    return out


def _serif_length(style: "StyleParams") -> float:
    return (0.3 + 0.9 * style.decoration_level) * style.stroke_width


def _margin(style: "StyleParams") -> int:
    """Room outside the unit square for stroke caps, serifs and the shadow offset."""
    scheme = _decoration_scheme(style)
    extra = _serif_length(style) if scheme["serif"] else 0.0
    extra += max(1.0, 0.6 * style.stroke_width) if scheme["shadow"] else 0.0
    return int(math.ceil(0.5 * style.stroke_width + extra + 1))


def _deform(template: CharTemplate, style: StyleParams, rng_seed: int) -> list[Stroke]:
    """Style-consistent control-point displacement plus a smaller per-sample wobble."""
    if style.curvature_jitter == 0:
        return list(template.strokes)
    font_rng = np.random.default_rng([style.style_id, template.char_class, 7])
    sample_rng = np.random.default_rng([style.style_id, template.char_class, rng_seed, 8])
    out = []
    for s in template.strokes:
        pts = np.asarray(s.points, dtype=np.float64)
        shift = font_rng.normal(0.0, 0.09, size=pts.shape) + sample_rng.normal(0.0, 0.02, size=pts.shape)
        pts = pts + style.curvature_jitter * shift
        kind = s.kind
        if kind == "line" and len(pts) == 2 and font_rng.random() < style.curvature_jitter:
            # bend straight strokes into arcs
            mid = pts.mean(axis=0)
            normal = np.array([-(pts[1, 1] - pts[0, 1]), pts[1, 0] - pts[0, 0]])
            mid = mid + font_rng.uniform(-0.3, 0.3) * style.curvature_jitter * normal
            pts = np.stack([pts[0], mid, pts[1]])
            kind = "curve"
        out.append(Stroke(kind, tuple(map(tuple, np.clip(pts, 0.0, 1.0)))))
    return out


def _layout_points(polylines: list[np.ndarray], slant: float, canvas_px: int, margin: int) -> list[np.ndarray]:
    """Shear by ``slant`` and scale the larger extent to fill the drawable square."""
    sheared = []
    for pl in polylines:
        q = pl.copy()
        q[:, 0] = q[:, 0] + slant * (0.5 - q[:, 1])
        sheared.append(q)
    allpts = np.concatenate(sheared)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    extent = max(float((hi - lo).max()), 0.25)
    drawable = canvas_px - 2 * margin
    scale = drawable / extent
    center = (lo + hi) / 2
    return [((q - center) * scale + canvas_px / 2.0) for q in sheared]


def _draw_strokes(draw: ImageDraw.ImageDraw, polylines: Iterable[np.ndarray], width: float, fill: int) -> None:
    w = max(1, int(round(width * SUPERSAMPLE)))
    r = w / 2.0
    for pl in polylines:
        pts = [tuple(p) for p in (pl * SUPERSAMPLE)]
        draw.line(pts, fill=fill, width=w, joint="curve")
        for x, y in (pts[0], pts[-1]):
            draw.ellipse([x - r, y - r, x + r, y + r], fill=fill)


def render_base(template: CharTemplate, stroke_width: float, slant: float, canvas_px: int) -> np.ndarray:
    """Undecorated, undeformed rendering of a template."""
    style = StyleParams(style_id=-1, stroke_width=stroke_width, slant=slant)
    raster, _ = render_glyph(template, style, canvas_px, rng_seed=0)
    return raster


def _decoration_scheme(style: StyleParams) -> dict[str, bool]:
    rng = np.random.default_rng([style.style_id, 13])
    d = style.decoration_level
    return {
        "serif": d > 0,
        "outline": d >= 0.5 and rng.random() < 0.6,
        "shadow": d >= 0.5 and rng.random() < 0.5,
        "speckle": d >= 0.3,
    }


def render_glyph(
    template: CharTemplate, style: StyleParams, canvas_px: int = 96, rng_seed: int = 0
) -> tuple[np.ndarray, list[list[float]]]:
    """Render one glyph; returns a ``(canvas, canvas)`` uint8 raster and its tight box."""
    if canvas_px < MIN_CANVAS:
        raise ValueError(f"canvas_px={canvas_px} is below the minimum of {MIN_CANVAS}")
    margin = _margin(style)
    if canvas_px - 2 * margin < 8:
        raise ValueError(
            f"canvas_px={canvas_px} too small for stroke width {style.stroke_width} "
            f"and decoration {style.decoration_level} (margin {margin})"
        )
    strokes = _deform(template, style, rng_seed)
    polylines = _layout_points(_stroke_polylines(strokes), style.slant, canvas_px, margin)

    big = canvas_px * SUPERSAMPLE
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    scheme = _decoration_scheme(style)
    d = style.decoration_level
    if scheme["shadow"]:
        off = max(1.0, style.stroke_width * 0.6)
        _draw_strokes(draw, [pl + off for pl in polylines], style.stroke_width, 110)
    if scheme["outline"]:
        border = max(1.0, style.stroke_width * 0.5)
        _draw_strokes(draw, polylines, style.stroke_width + 2 * border, 255)
        _draw_strokes(draw, polylines, style.stroke_width, 0)
    else:
        _draw_strokes(draw, polylines, style.stroke_width, 255)
    if scheme["serif"]:
        length = _serif_length(style)
        for pl in polylines:
            for end, nxt in ((pl[0], pl[1]), (pl[-1], pl[-2])):
                tangent = end - nxt
                tangent = tangent / (np.linalg.norm(tangent) + 1e-9)
                normal = np.array([-tangent[1], tangent[0]])
                tick = np.stack([end - normal * length, end + normal * length])
                _draw_strokes(draw, [tick], max(1.0, 0.7 * style.stroke_width), 255)
    if scheme["speckle"]:
        rng = np.random.default_rng([style.style_id, template.char_class, rng_seed, 21])
        pts = np.concatenate(polylines)
        for _ in range(int(round(8 * d))):
            base = pts[rng.integers(len(pts))]
            p = base + rng.normal(0, 1.5 * style.stroke_width, size=2)
            p = np.clip(p, margin / 2, canvas_px - margin / 2)
            rad = SUPERSAMPLE * rng.uniform(0.5, 1.0) * style.stroke_width * 0.6
            x, y = p * SUPERSAMPLE
            draw.ellipse([x - rad, y - rad, x + rad, y + rad], fill=200)

    raster = np.asarray(img.resize((canvas_px, canvas_px), Image.Resampling.BOX), dtype=np.uint8).copy()
    return raster, ink_box(raster)


def ink_box(raster: np.ndarray, offset: tuple[float, float] = (0.0, 0.0)) -> list[list[float]]:
    """Tight axis-aligned box (4 corners) around all nonzero pixels."""
    rows = np.flatnonzero(raster.any(axis=1))
    cols = np.flatnonzero(raster.any(axis=0))
    if rows.size == 0:
        raise ValueError("raster has no ink")
    ox, oy = offset
    return rect_to_quad(cols[0] + ox, rows[0] + oy, cols[-1] + 1 + ox, rows[-1] + 1 + oy)


@dataclass
class TextLine:
    points: list[list[float]]
    text: str
    ignore: bool = False


@dataclass
class CharBox:
    points: list[list[float]]
    char: str


@dataclass
class GlyphSample:
    image: np.ndarray
    text_lines: list[TextLine]
    chars: list[CharBox]
    meta: dict = field(default_factory=dict)

    def annotation(self, image_path: str) -> dict:
        return {
            "image": image_path,
            "text_lines": [{"points": t.points, "text": t.text, "ignore": t.ignore} for t in self.text_lines],
            "chars": [{"points": c.points, "char": c.char} for c in self.chars],
            "meta": self.meta,
        }


def _rects_intersect(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def compose_scene(
    texts: Sequence[str],
    styles: Sequence[StyleParams],
    layout: str = "horizontal",
    rng_seed: int = 0,
    templates: Optional[Sequence[CharTemplate]] = None,
    image_size: tuple[int, int] = (256, 128),
    glyph_px: int = 48,
    advance: float = 0.85,
    iou_budget: float = 0.0,
    max_retries: int = 100,
) -> GlyphSample:
    """Render text lines at random non-overlapping positions on one image.

    ``image_size`` is ``(width, height)``. Characters advance by
    ``advance * glyph_px`` along x (horizontal) or y (vertical).
    """
    if len(texts) != len(styles):
        raise ValueError(f"got {len(texts)} texts but {len(styles)} styles")
    if layout not in ("horizontal", "vertical"):
        raise ValueError(f"unknown layout {layout!r}")
    templates = templates if templates is not None else make_templates()
    rng = np.random.default_rng([rng_seed, 3])
    width, height = image_size
    canvas = np.zeros((height, width), dtype=np.uint8)
    step = int(round(advance * glyph_px))
    placed, lines, chars = [], [], []
    for li, (text, style) in enumerate(zip(texts, styles)):
        glyphs = []
        for ci, ch in enumerate(text):
            cls = char_to_class(ch)
            if not 0 <= cls < len(templates):
                raise ValueError(f"no template for character {ch!r}")
            glyphs.append(render_glyph(templates[cls], style, glyph_px, rng_seed=int(rng.integers(2**31))))
        span = step * (len(text) - 1) + glyph_px
        lw, lh = (span, glyph_px) if layout == "horizontal" else (glyph_px, span)
        if lw > width or lh > height:
            raise LayoutError(f"line {text!r} ({lw}x{lh}) does not fit in a {width}x{height} image")
        for _ in range(max_retries):
            x0 = int(rng.integers(0, width - lw + 1))
            y0 = int(rng.integers(0, height - lh + 1))
            rect = (x0, y0, x0 + lw, y0 + lh)
            clash = any(
                quad_iou(rect_to_quad(*rect), rect_to_quad(*r)) > iou_budget or (iou_budget == 0 and _rects_intersect(rect, r))
                for r in placed
            )
            if not clash:
                break
        else:
            raise LayoutError(f"could not place line {li} without overlap after {max_retries} retries")
        placed.append(rect)
        line_chars = []
        for ci, (raster, box) in enumerate(glyphs):
            gx = x0 + (ci * step if layout == "horizontal" else 0)
            gy = y0 + (ci * step if layout == "vertical" else 0)
            region = canvas[gy : gy + glyph_px, gx : gx + glyph_px]
            np.maximum(region, raster, out=region)
            pts = [[x + gx, y + gy] for x, y in box]
            line_chars.append(CharBox(pts, text[ci]))
        xs = [p[0] for c in line_chars for p in c.points]
        ys = [p[1] for c in line_chars for p in c.points]
        lines.append(TextLine(rect_to_quad(min(xs), min(ys), max(xs), max(ys)), text))
        chars.extend(line_chars)
    diffs = [s.difficulty for s in styles]
    meta = {
        "style_ids": [s.style_id for s in styles],
        "difficulty": max(diffs, key=DIFFICULTIES.index) if diffs else "simple",
        "layout": layout,
    }
    return GlyphSample(canvas, lines, chars, meta)


def make_style_pool(counts: dict[str, int], seed: int = 0) -> list[StyleParams]:
    """Sample styles with the requested number per difficulty tier."""
    rng = np.random.default_rng([seed, 5])
    pool = []
    for tier in DIFFICULTIES:
        for _ in range(counts.get(tier, 0)):
            sw = float(rng.uniform(1.5, 3.5))
            slant = float(rng.uniform(-0.15, 0.15))
            if tier == "simple":
                jitter, deco = rng.uniform(0.0, 0.12), rng.uniform(0.0, 0.08)
            elif tier == "medium":
                jitter, deco = rng.uniform(0.25, 0.7), rng.uniform(0.0, 0.08)
                slant = float(rng.uniform(-0.3, 0.3))
            else:
                jitter, deco = rng.uniform(0.3, 0.9), rng.uniform(0.55, 1.0)
                slant = float(rng.uniform(-0.35, 0.35))
            pool.append(StyleParams(len(pool), sw, slant, float(jitter), float(deco)))
    return pool


def split_styles(pool: Sequence[StyleParams], rng_seed: int = 0) -> tuple[list[StyleParams], list[StyleParams]]:
    """Partition a pool into two halves with identical per-difficulty counts."""
    groups = {d: [s for s in pool if s.difficulty == d] for d in DIFFICULTIES}
    odd = {d: len(g) for d, g in groups.items() if len(g) % 2}
    if odd:
        raise ValueError(f"difficulty classes with odd counts cannot be split evenly: {odd}")
    rng = np.random.default_rng([rng_seed, 9])
    set_a, set_b = [], []
    for d in DIFFICULTIES:
        order = rng.permutation(len(groups[d]))
        half = len(order) // 2
        set_a.extend(groups[d][i] for i in order[:half])
        set_b.extend(groups[d][i] for i in order[half:])
    return set_a, set_b


MANIFEST_NAME = "annotations.jsonl"


def write_dataset(samples: Sequence[GlyphSample], dir_path, image_dir: str = "images") -> Path:
    """Write lossless PNG rasters and a JSON-lines manifest; returns the manifest path."""
    root = Path(dir_path)
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    manifest = root / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, sample in enumerate(samples):
            rel = f"{image_dir}/{i:06d}.png"
            Image.fromarray(sample.image).save(root / rel, format="PNG")
            fh.write(json.dumps(sample.annotation(rel), ensure_ascii=False, sort_keys=True) + "\n")
    return manifest


def parse_record(record: dict, line: Optional[int] = None) -> tuple[list[TextLine], list[CharBox]]:
    try:
        text_lines = [
            TextLine(check_quad(t["points"], "text line box").tolist(), str(t["text"]), bool(t.get("ignore", False)))
            for t in record["text_lines"]
        ]
        chars = []
        for c in record["chars"]:
            ch = str(c["char"])
            if len(ch) != 1:
                raise ValueError(f"char record must hold a single character, got {ch!r}")
            chars.append(CharBox(check_quad(c["points"], "char box").tolist(), ch))
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"malformed annotation: {exc}", line) from exc
    return text_lines, chars


def read_dataset(dir_path, load_images: bool = True) -> list[GlyphSample]:
    """Inverse of :func:`write_dataset`; validates every record."""
    root = Path(dir_path)
    manifest = root / MANIFEST_NAME if root.is_dir() else root
    root = manifest.parent
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"invalid JSON: {exc.msg}", lineno) from exc
            if "image" not in record:
                raise AnnotationError("missing 'image' field", lineno)
            text_lines, chars = parse_record(record, lineno)
            path = root / record["image"]
            if not path.exists():
                raise FileNotFoundError(f"image file missing: {path}")
            image = np.asarray(Image.open(path), dtype=np.uint8) if load_images else np.zeros((0, 0), np.uint8)
            samples.append(GlyphSample(image, text_lines, chars, record.get("meta", {})))
    return samples


@dataclass
class BenchmarkConfig:
    alphabet_size: int = 50
    styles_per_set: int = 20
    style_counts: Optional[dict[str, int]] = None  # per set; default keeps the 8:11:6 mix
    n_train: int = 5000
    n_test: int = 1000
    image_size: tuple[int, int] = (192, 64)
    glyph_px: int = 40
    min_len: int = 2
    max_len: int = 4
    max_lines: int = 1
    layouts: tuple[str, ...] = ("horizontal",)
    seed: int = 0

    def per_set_counts(self) -> dict[str, int]:
        if self.style_counts:
            return dict(self.style_counts)
        raw = [self.styles_per_set * r / 25 for r in (8, 11, 6)]
        counts = [int(math.floor(x)) for x in raw]
        for i in np.argsort([-(x - math.floor(x)) for x in raw])[: self.styles_per_set - sum(counts)]:
            counts[i] += 1
        return dict(zip(DIFFICULTIES, counts))


def _draw_texts(cfg: BenchmarkConfig, n_images: int, rng: np.random.Generator) -> list[list[str]]:
    """Stratified class sampling: cycle through shuffled permutations of the alphabet."""
    stream: list[int] = []

    def take(k):
        nonlocal stream
        while len(stream) < k:
            stream.extend(rng.permutation(cfg.alphabet_size).tolist())
        out, stream = stream[:k], stream[k:]
        return out

    out = []
    for _ in range(n_images):
        n_lines = int(rng.integers(1, cfg.max_lines + 1))
        out.append(["".join(class_to_char(c) for c in take(int(rng.integers(cfg.min_len, cfg.max_len + 1)))) for _ in range(n_lines)])
    return out


def _render_set(cfg, texts, style_set, templates, seed_tag, rng) -> list[GlyphSample]:
    samples = []
    for i, lines in enumerate(texts):
        styles = [style_set[int(rng.integers(len(style_set)))] for _ in lines]
        layout = cfg.layouts[int(rng.integers(len(cfg.layouts)))]
        samples.append(
            compose_scene(lines, styles, layout, rng_seed=hash_seed(cfg.seed, seed_tag, i),
                          templates=templates, image_size=cfg.image_size, glyph_px=cfg.glyph_px)
        )
    return samples


def hash_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31))


def generate_benchmark(cfg: BenchmarkConfig) -> dict:
    """Build train / test_A / test_B splits; test_B repeats test_A's content in B styles.

    Returns a dict with the samples per split, the two style sets and the templates.
    """
    per_set = cfg.per_set_counts()
    pool = make_style_pool({d: 2 * n for d, n in per_set.items()}, seed=cfg.seed)
    set_a, set_b = split_styles(pool, rng_seed=cfg.seed)
    templates = make_templates(cfg.alphabet_size, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 17])
    train_texts = _draw_texts(cfg, cfg.n_train, rng)
    test_texts = _draw_texts(cfg, cfg.n_test, rng)
    train = _render_set(cfg, train_texts, set_a, templates, 1, np.random.default_rng([cfg.seed, 19]))
    test_a = _render_set(cfg, test_texts, set_a, templates, 2, np.random.default_rng([cfg.seed, 23]))
    # B keeps A's content and layout seed stream; only the style draw differs
    test_b = _render_set(cfg, test_texts, set_b, templates, 2, np.random.default_rng([cfg.seed, 23]))
    return {"train": train, "test_A": test_a, "test_B": test_b, "set_A": set_a, "set_B": set_b, "templates": templates}
