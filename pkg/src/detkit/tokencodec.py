"""Box/score text codec shared by instruction data and model-output parsing.

Wire grammar (see ``docs/answer_grammar.ebnf``)::

    answer    = negative | group { "; " group }
    group     = "[" num ", " num ", " num ", " num ", " num "]"        (plain)
              | coord coord coord coord score                           (extra_vocab)
    coord     = "<bin_" int ">"
    score     = "<score_" int ">"

Coordinates are ``x1, y1, x2, y2`` normalised by image width/height; the fifth
field is the confidence. The parser accepts free text around groups and
resynchronises after a malformed group, so one bad fragment never costs the
rest of the answer.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

from .detmodel import BBox, Detection, DetkitError, ImageRecord

NEGATIVE_ANSWER = "There are no objects of this category in the image."
GROUP_SEPARATOR = "; "
MODES = ("plain", "extra_vocab")


class CodecError(DetkitError, ValueError):
    pass


@dataclass(frozen=True)
class TokenCodecConfig:
    mode: str = "plain"
    coord_precision: int = 3
    coord_bins: int = 1000
    score_bins: int = 100

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise CodecError(f"unknown codec mode {self.mode!r}; expected one of {MODES}")
        if self.coord_precision < 1:
            raise CodecError("coord_precision must be >= 1")
        if self.coord_bins < 2 or self.score_bins < 2:
            raise CodecError("coord_bins and score_bins must be >= 2")

    @property
    def coord_half_step(self) -> float:
        """Worst-case normalised coordinate error of one encode/parse trip."""
        if self.mode == "plain":
            return 0.5 * 10.0 ** -self.coord_precision
        return 0.5 / (self.coord_bins - 1)

    @property
    def score_half_step(self) -> float:
        if self.mode == "plain":
            return 0.5 * 10.0 ** -self.coord_precision
        return 0.5 / (self.score_bins - 1)


@dataclass
class ParseOutcome:
    detections: list[Detection] = field(default_factory=list)
    parse_errors: list[tuple[tuple[int, int], str]] = field(default_factory=list)  # (span, reason)


def vocab_tokens(cfg: TokenCodecConfig) -> list[str]:
    if cfg.mode != "extra_vocab":
        raise CodecError("vocab_tokens needs mode='extra_vocab'")
    return [f"<bin_{k}>" for k in range(cfg.coord_bins)] + [f"<score_{k}>" for k in range(cfg.score_bins)]


def _normalised(item, image: ImageRecord) -> tuple[float, float, float, float, float]:
    b = item.bbox
    score = getattr(item, "score", 1.0)
    vals = (b.x1 / image.width, b.y1 / image.height, b.x2 / image.width, b.y2 / image.height)
    if not all(0.0 <= v <= 1.0 for v in vals):
        raise CodecError(f"box {b} lies outside the {image.width}x{image.height} image")
    if not 0.0 <= score <= 1.0:
        raise CodecError(f"score {score} outside [0, 1]")
    return (*vals, score)


def encode_answer(dets: Sequence, image: ImageRecord, cfg: TokenCodecConfig) -> str:
    """Render boxes (anything with ``bbox`` and optional ``score``) as answer text.

    Records without a ``score`` attribute are ground truth and encode as 1.0.
    """
    if not dets:
        return NEGATIVE_ANSWER
    groups = []
    for d in dets:
        *coords, score = _normalised(d, image)
        if cfg.mode == "plain":
            p = cfg.coord_precision
            groups.append("[" + ", ".join(f"{v:.{p}f}" for v in (*coords, score)) + "]")
        else:
            cb, sb = cfg.coord_bins - 1, cfg.score_bins - 1
            groups.append(
                "".join(f"<bin_{round(v * cb)}>" for v in coords) + f"<score_{round(score * sb)}>"
            )
    return GROUP_SEPARATOR.join(groups)


def split_groups(answer: str) -> list[str]:
    if answer == NEGATIVE_ANSWER:
        return []
    return answer.split(GROUP_SEPARATOR)


Span = tuple[int, int]


class _PlainParser:
    """Recursive descent over ``[n, n, n, n, n]`` groups embedded in free text."""

    _num = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.groups: list[tuple[Span, list[float]]] = []
        self.errors: list[tuple[Span, str]] = []

    def parse(self) -> None:
        while True:
            start = self.text.find("[", self.pos)
            if start < 0:
                return
            self.pos = start + 1
            try:
                values = self._group()
                self.groups.append(((start, self.pos), values))
            except _Fail as f:
                self.errors.append(((start, f.at), f.reason))
                self.pos = max(f.at, start + 1)

    def _ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _number(self) -> float:
        self._ws()
        m = self._num.match(self.text, self.pos)
        if not m:
            if self.pos >= len(self.text):
                raise _Fail(self.pos, "truncated group")
            raise _Fail(self.pos, f"expected number, got {self.text[self.pos]!r}")
        self.pos = m.end()
        return float(m.group())

    def _group(self) -> list[float]:
        values = [self._number()]
        while True:
            self._ws()
            if self.pos >= len(self.text):
                raise _Fail(self.pos, "truncated group")
            c = self.text[self.pos]
            if c == "]":
                self.pos += 1
                break
            if c != ",":
                raise _Fail(self.pos, f"expected ',' or ']', got {c!r}")
            self.pos += 1
            values.append(self._number())
        if len(values) != 5:
            raise _Fail(self.pos, f"expected 5 values (x1, y1, x2, y2, score), got {len(values)}")
        return values


class _Fail(Exception):
    def __init__(self, at: int, reason: str):
        self.at = at
        self.reason = reason


_TOKEN = re.compile(r"<(bin|score)_(\d+)>")


def _parse_vocab(text: str, cfg: TokenCodecConfig) -> tuple[list[tuple[Span, list[float]]], list[tuple[Span, str]]]:
    groups: list[tuple[Span, list[float]]] = []
    errors: list[tuple[Span, str]] = []
    buf: list[float] = []
    start = end = 0

    def fail(reason: str, until: int) -> None:
        errors.append(((start, until), reason))
        buf.clear()

    for m in _TOKEN.finditer(text):
        kind, k = m.group(1), int(m.group(2))
        if buf and text[end : m.start()].strip():
            fail("truncated group", end)
        if kind == "bin" and len(buf) == 4:
            fail("group has no score token", end)
        if not buf:
            start = m.start()
        end = m.end()
        if kind == "bin":
            if k >= cfg.coord_bins:
                fail(f"coordinate bin {k} out of range", end)
            else:
                buf.append(k / (cfg.coord_bins - 1))
        elif len(buf) != 4:
            fail(f"score token after {len(buf)} coordinate(s)", end)
        elif k >= cfg.score_bins:
            fail(f"score bin {k} out of range", end)
        else:
            groups.append(((start, end), buf + [k / (cfg.score_bins - 1)]))
            buf.clear()
    if buf:
        fail("truncated group", end)
    return groups, errors


def parse_answer(text: str, image: ImageRecord, category: int, cfg: TokenCodecConfig) -> ParseOutcome:
    """Extract detections from model text. Never raises on bad input.

    Coordinates are de-normalised to pixels, inverted corners are swapped,
    and boxes are clamped to the image. Groups with a score outside [0, 1]
    or an empty box after clamping are reported as errors.
    """
    if cfg.mode == "plain":
        p = _PlainParser(text)
        p.parse()
        groups, errors = p.groups, p.errors
    else:
        groups, errors = _parse_vocab(text, cfg)
    out = ParseOutcome(parse_errors=list(errors))
    for span, vals in groups:
        x1, y1, x2, y2, score = vals
        if not 0.0 <= score <= 1.0:
            out.parse_errors.append((span, f"score {score} outside [0, 1]"))
            continue
        x1, x2 = sorted((x1, x2))
        y1, y2 = sorted((y1, y2))
        box = BBox(x1 * image.width, y1 * image.height, x2 * image.width, y2 * image.height)
        box = box.clamp(image.width, image.height)
        if box.is_degenerate:
            out.parse_errors.append((span, "empty box"))
            continue
        out.detections.append(Detection(image.image_id, category, box, score))
    return out
