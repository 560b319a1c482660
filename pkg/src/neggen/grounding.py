"""Grounding samples: an image, a caption, and boxes linked to caption spans."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

_WORD_RE = re.compile(r"[^\W_]+")


class DatasetParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(ValueError):
    def __init__(self, sample_id: str, field: str, message: str):
        super().__init__(f"sample {sample_id!r}, {field}: {message}")
        self.sample_id = sample_id
        self.field = field


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def shifted(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    @classmethod
    def from_list(cls, values) -> BoundingBox:
        if len(values) != 4:
            raise ValueError("box needs 4 coordinates")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class PhraseSpan:
    """Half-open character interval ``[start, end)`` into a caption."""

    start: int
    end: int

    def shifted(self, delta: int) -> PhraseSpan:
        return PhraseSpan(self.start + delta, self.end + delta)

    def as_list(self) -> list[int]:
        return [self.start, self.end]


@dataclass(frozen=True)
class Region:
    box: BoundingBox
    span: PhraseSpan


@dataclass(frozen=True)
class ImageRef:
    path: str
    width: int
    height: int


@dataclass(frozen=True)
class GroundingSample:
    id: str
    image: ImageRef
    caption: str
    regions: tuple[Region, ...]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "caption": self.caption,
            "image": {"path": self.image.path, "width": self.image.width, "height": self.image.height},
            "regions": [{"box": r.box.as_list(), "span": r.span.as_list()} for r in self.regions],
        }


def validate_sample(sample: GroundingSample) -> None:
    sid = sample.id
    if not isinstance(sid, str) or not sid:
        raise ValidationError(str(sid), "id", "id must be a non-empty string")
    if sample.image.width <= 0 or sample.image.height <= 0:
        raise ValidationError(sid, "image", "image dimensions must be positive")
    n = len(sample.caption)
    for k, region in enumerate(sample.regions):
        box, span = region.box, region.span
        field = f"regions[{k}]"
        if not box.x1 < box.x2:
            raise ValidationError(sid, field + ".box", "x1 < x2 violated")
        if not box.y1 < box.y2:
            raise ValidationError(sid, field + ".box", "y1 < y2 violated")
        if box.x1 < 0 or box.y1 < 0 or box.x2 > sample.image.width or box.y2 > sample.image.height:
            raise ValidationError(sid, field + ".box", "box outside image bounds")
        if span.start < 0:
            raise ValidationError(sid, field + ".span", "span start is negative")
        if span.end > n:
            raise ValidationError(sid, field + ".span", "span end exceeds caption length")
        if not span.start < span.end:
            raise ValidationError(sid, field + ".span", "span is empty")
        if not sample.caption[span.start:span.end].strip():
            raise ValidationError(sid, field + ".span", "span text is whitespace")


def sample_from_dict(obj: dict) -> GroundingSample:
    """Build a sample from its JSON object; raises ``ValueError`` on bad shape."""
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    try:
        img = obj["image"]
        image = ImageRef(str(img["path"]), int(img["width"]), int(img["height"]))
        regions = []
        for r in obj.get("regions", []):
            start, end = r["span"]
            if int(start) != start or int(end) != end:
                raise ValueError("span indices must be integers")
            regions.append(Region(BoundingBox.from_list(r["box"]), PhraseSpan(int(start), int(end))))
        caption = obj["caption"]
        if not isinstance(caption, str):
            raise ValueError("caption must be a string")
        return GroundingSample(str(obj["id"]), image, caption, tuple(regions))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"missing or malformed field: {exc}") from exc


def load_dataset(path, *, skip_invalid: bool = False) -> list[GroundingSample]:
    samples: list[GroundingSample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sample = sample_from_dict(json.loads(line))
            except ValueError as exc:  # JSONDecodeError is a ValueError
                if skip_invalid:
                    log.warning("skipping line %d: %s", line_no, exc)
                    continue
                raise DatasetParseError(line_no, str(exc)) from exc
            try:
                validate_sample(sample)
                if sample.id in seen:
                    raise ValidationError(sample.id, "id", "duplicate id")
            except ValidationError:
                if skip_invalid:
                    log.warning("skipping invalid sample on line %d", line_no)
                    continue
                raise
            seen.add(sample.id)
            samples.append(sample)
    return samples


def dump_dataset(samples: Iterable[GroundingSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def span_text(sample: GroundingSample, index: int) -> str:
    if not 0 <= index < len(sample.regions):
        raise IndexError(f"region index {index} out of range for sample {sample.id!r}")
    span = sample.regions[index].span
    return sample.caption[span.start:span.end]


def word_tokens(text: str) -> list[str]:
    """Case-folded alphanumeric tokens; everything else is a separator."""
    return _WORD_RE.findall(text.casefold())


def build_vocabulary(samples: Iterable[GroundingSample]) -> Counter:
    vocab: Counter = Counter()
    for s in samples:
        vocab.update(word_tokens(s.caption))
    return vocab


def resolve_image_path(sample: GroundingSample, base: Path | None) -> Path:
    p = Path(sample.image.path)
    if base is not None and not p.is_absolute():
        return base / p
    return p
