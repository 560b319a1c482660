"""Training-sample assembly: negative sampling, shuffled concatenation with exact
span remapping, token assignment matrices, and image pair packing."""
from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from neggen import kernels
from neggen.grounding import BoundingBox, GroundingSample, PhraseSpan
from neggen.negimage import KEPT, GeneratedImageRecord
from neggen.negtext import NegativePair
from neggen.prompts import MASK_TOKEN

log = logging.getLogger(__name__)

DEFAULT_SEPARATOR = ". "
POSITIVE = "positive"
GENERATED_CAPTION = "generated_caption"
ORIGINAL_AS_NEGATIVE = "negative:original_caption"


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


class DefaultTokenizer:
    """Words (alphanumeric runs) and single punctuation marks, with character spans."""

    _re = re.compile(r"[^\W_]+|[^\w\s]|_")

    def tokenize(self, text: str) -> list[Token]:
        return [Token(m.group(), m.start(), m.end()) for m in self._re.finditer(text)]


@dataclass(frozen=True)
class Segment:
    source: str
    start: int
    end: int


@dataclass(frozen=True)
class TrainingRegion:
    box: BoundingBox
    span: PhraseSpan
    image: int = 0


@dataclass(frozen=True)
class PlacedImage:
    path: str
    x: int
    y: int
    width: int
    height: int
    root: str = "dataset"  # "dataset": relative to the image root; "out": relative to the output tree

    @property
    def rect(self) -> BoundingBox:
        return BoundingBox(self.x, self.y, self.x + self.width, self.y + self.height)


@dataclass(frozen=True)
class AssignmentMatrix:
    rows: int
    cols: int
    ones: tuple[tuple[int, int], ...]

    def dense(self) -> np.ndarray:
        a = np.zeros((self.rows, self.cols), dtype=np.uint8)
        for l, j in self.ones:
            a[l, j] = 1
        return a

    @classmethod
    def from_dense(cls, a: np.ndarray) -> AssignmentMatrix:
        ls, js = np.nonzero(a)
        return cls(int(a.shape[0]), int(a.shape[1]), tuple((int(l), int(j)) for l, j in zip(ls, js)))


@dataclass(frozen=True)
class TextPiece:
    text: str
    source: str
    regions: tuple[TrainingRegion, ...] = ()


@dataclass
class TrainingSample:
    id: str
    images: list[PlacedImage]
    canvas: tuple[int, int]
    text: str
    segments: list[Segment]
    regions: list[TrainingRegion]
    matrix: AssignmentMatrix
    composite: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "images": [{"path": im.path, "root": im.root, "placement": [im.x, im.y],
                        "size": [im.width, im.height]} for im in self.images],
            "canvas": list(self.canvas),
            "composite": self.composite,
            "text": self.text,
            "segments": [{"source": s.source, "range": [s.start, s.end]} for s in self.segments],
            "regions": [{"box": r.box.as_list(), "span": r.span.as_list(), "image": r.image} for r in self.regions],
            "matrix": {"rows": self.matrix.rows, "cols": self.matrix.cols, "ones": [list(o) for o in self.matrix.ones]},
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrainingSample:
        m = d["matrix"]
        return cls(
            d["id"],
            [PlacedImage(im["path"], *im["placement"], *im.get("size", [0, 0]), im.get("root", "dataset"))
             for im in d["images"]],
            tuple(d["canvas"]),
            d["text"],
            [Segment(s["source"], *s["range"]) for s in d["segments"]],
            [TrainingRegion(BoundingBox.from_list(r["box"]), PhraseSpan(*r["span"]), r.get("image", 0))
             for r in d["regions"]],
            AssignmentMatrix(m["rows"], m["cols"], tuple(tuple(o) for o in m["ones"])),
            d.get("composite"),
        )


# ------------------------------------------------------------------ text

def sample_negatives(pool: list[NegativePair], k: int, seed: int) -> tuple[list[NegativePair], int]:
    """``k`` distinct negatives from ``pool`` (never with replacement).

    Returns ``(chosen, shortfall)``.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    if k < 2:
        warnings.warn("K < 2: fewer negatives than the method calls for", stacklevel=2)
    uniq = list({p.negative: p for p in pool}.values())
    if not uniq:
        log.warning("empty negative pool")
        return [], k
    if len(uniq) <= k:
        chosen = list(uniq)
        random.Random(seed).shuffle(chosen)
        return chosen, k - len(uniq)
    return random.Random(seed).sample(uniq, k), 0


def check_separator(separator: str) -> None:
    if MASK_TOKEN in separator:
        raise ValueError("separator must not contain [Mask]")
    if not separator or separator[0].isalnum() or separator[-1].isalnum():
        raise ValueError("separator must start and end with a non-alphanumeric character")


def shuffle_and_concat(pieces: list[TextPiece], separator: str = DEFAULT_SEPARATOR, seed: int | None = None,
                       order: list[int] | None = None) -> tuple[str, list[Segment], list[TrainingRegion]]:
    """Join ``pieces`` in shuffled (or given) order, shifting every region span
    by the offset of its piece."""
    check_separator(separator)
    if order is None:
        order = list(range(len(pieces)))
        random.Random(seed).shuffle(order)
    elif sorted(order) != list(range(len(pieces))):
        raise ValueError("order must be a permutation of the pieces")
    parts, segments, regions = [], [], []
    offset = 0
    for n, idx in enumerate(order):
        piece = pieces[idx]
        if n:
            parts.append(separator)
            offset += len(separator)
        parts.append(piece.text)
        segments.append(Segment(piece.source, offset, offset + len(piece.text)))
        regions.extend(TrainingRegion(r.box, r.span.shifted(offset), r.image) for r in piece.regions)
        offset += len(piece.text)
    return "".join(parts), segments, regions


def build_assignment_matrix(text: str, regions: list[TrainingRegion], tokenizer=None) -> AssignmentMatrix:
    tokenizer = tokenizer or DefaultTokenizer()
    tokens = tokenizer.tokenize(text)
    for r in regions:
        if not 0 <= r.span.start < r.span.end <= len(text):
            raise ValueError(f"region span {r.span.as_list()} invalid for text of length {len(text)}")
    a = kernels.span_overlap([r.span.as_list() for r in regions], [[t.start, t.end] for t in tokens])
    a = a.reshape(len(regions), len(tokens))
    empty = np.flatnonzero(a.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"region {int(empty[0])} covers no token; check separator/tokenizer")
    return AssignmentMatrix.from_dense(a)


def _positive_piece(sample: GroundingSample, source: str = POSITIVE, image: int = 0,
                    dx: float = 0, dy: float = 0) -> TextPiece:
    return TextPiece(sample.caption, source,
                     tuple(TrainingRegion(r.box.shifted(dx, dy), r.span, image) for r in sample.regions))


def assemble_text_sample(sample: GroundingSample, pool: list[NegativePair], k: int, seed: int,
                         separator: str = DEFAULT_SEPARATOR, tokenizer=None) -> tuple[TrainingSample, int]:
    """Original image with its caption and ``k`` sampled negatives. Returns ``(sample, shortfall)``."""
    chosen, shortfall = sample_negatives(pool, k, seed)
    pieces = [_positive_piece(sample)] + [TextPiece(p.negative, f"negative:{p.strategy}") for p in chosen]
    text, segments, regions = shuffle_and_concat(pieces, separator, seed=seed + 1)
    img = PlacedImage(sample.image.path, 0, 0, sample.image.width, sample.image.height)
    ts = TrainingSample(sample.id, [img], (sample.image.width, sample.image.height), text, segments, regions,
                        build_assignment_matrix(text, regions, tokenizer))
    return ts, shortfall


# ------------------------------------------------------------------ generated images

def make_negative_grounding_sample(record: GeneratedImageRecord, seed: int = 0,
                                   separator: str = DEFAULT_SEPARATOR, tokenizer=None) -> TrainingSample:
    """The generated image as grounding data: its edited caption is positive and
    the original caption becomes a negative."""
    if record.status != KEPT:
        raise ValueError(f"record {record.record_id!r} is {record.status}, not kept")
    edited = record.edited_sample()
    pieces = [_positive_piece(edited, GENERATED_CAPTION), TextPiece(record.caption, ORIGINAL_AS_NEGATIVE)]
    text, segments, regions = shuffle_and_concat(pieces, separator, seed=seed)
    w, h = edited.image.width, edited.image.height
    return TrainingSample(f"{record.record_id}#gen", [PlacedImage(edited.image.path, 0, 0, w, h, "out")], (w, h), text,
                          segments, regions, build_assignment_matrix(text, regions, tokenizer))


def pair_layout(width: int, height: int, generated_first: bool) -> tuple[str, tuple[int, int], list[tuple[int, int]]]:
    """Placement of (original, generated) for two equal-size images.

    Side by side when height >= width, stacked otherwise.
    Returns ``(orientation, canvas, [offset_original, offset_generated])``.
    """
    if height >= width:
        orientation, canvas, step = "side_by_side", (2 * width, height), (width, 0)
    else:
        orientation, canvas, step = "stacked", (width, 2 * height), (0, height)
    offsets = [(0, 0), step] if not generated_first else [step, (0, 0)]
    return orientation, canvas, offsets


def pack_pair_sample(original: GroundingSample, record: GeneratedImageRecord, seed: int = 0,
                     separator: str = DEFAULT_SEPARATOR, tokenizer=None) -> TrainingSample:
    """Original and generated image in one canvas, captions concatenated in the same order.

    Each caption's regions point only at boxes of its own image, so the two
    images' boxes act as negatives for each other's caption.
    """
    if record.status != KEPT:
        raise ValueError(f"record {record.record_id!r} is {record.status}, not kept")
    if record.sample_id != original.id:
        raise ValueError(f"record {record.record_id!r} belongs to {record.sample_id!r}, not {original.id!r}")
    edited = record.edited_sample()
    w, h = original.image.width, original.image.height
    if (edited.image.width, edited.image.height) != (w, h):
        raise LayoutError("pair packing needs equal image dimensions")
    generated_first = random.Random(seed).random() < 0.5
    _, canvas, (off_o, off_g) = pair_layout(w, h, generated_first)
    img_o = 1 if generated_first else 0
    img_g = 1 - img_o
    pieces = [_positive_piece(original, POSITIVE, img_o, *off_o),
              _positive_piece(edited, GENERATED_CAPTION, img_g, *off_g)]
    order = [1, 0] if generated_first else [0, 1]
    text, segments, regions = shuffle_and_concat(pieces, separator, order=order)
    placed = {img_o: PlacedImage(original.image.path, *off_o, w, h),
              img_g: PlacedImage(edited.image.path, *off_g, w, h, "out")}
    return TrainingSample(f"{record.record_id}#pair", [placed[0], placed[1]], canvas, text, segments, regions,
                          build_assignment_matrix(text, regions, tokenizer))


# ------------------------------------------------------------------ output

def training_jsonl_bytes(samples: list[TrainingSample]) -> bytes:
    lines = [json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True, separators=(",", ":")) for s in samples]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def emit_training_set(samples: list[TrainingSample], path, manifest_path=None) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = training_jsonl_bytes(samples)
    path.write_bytes(data)
    sources = Counter(seg.source for s in samples for seg in s.segments)
    manifest = {
        "file": path.name,
        "count": len(samples),
        "segments": sum(sources.values()),
        "segments_by_source": dict(sorted(sources.items())),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    manifest_path = Path(manifest_path) if manifest_path else path.with_name("manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_training_set(path) -> list[TrainingSample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingSample.from_dict(json.loads(line)) for line in fh if line.strip()]
